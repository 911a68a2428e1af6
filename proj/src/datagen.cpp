#include "cdm/datagen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "cdm/error.hpp"
#include "cdm/io.hpp"

namespace cdm::datagen {

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::string_view (&names)[N], const char* what) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == s) return static_cast<E>(i);
  }
  throw ConfigError(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

constexpr std::string_view kScenarioNames[] = {"lowdim", "highdim"};
constexpr std::string_view kNoiseNames[] = {"gaussian", "gamma", "nlm"};
constexpr std::string_view kVarianceNames[] = {"homo", "hetero"};
constexpr std::string_view kSplitNames[] = {"train", "cal", "test"};

double logistic_bump(double x, double slope) { return 2.0 / (1.0 + std::exp(-slope * (x - 0.5))); }

// Weighted average of x[begin, end) with weights 1 + 9 (k - begin) / (end - begin - 1).
double ramp_average(std::span<const double> x, std::size_t begin, std::size_t end) {
  const std::size_t len = end - begin;
  if (len == 1) return x[begin];
  double num = 0.0;
  double den = 0.0;
  for (std::size_t k = begin; k < end; ++k) {
    const double w = 1.0 + 9.0 * static_cast<double>(k - begin) / static_cast<double>(len - 1);
    num += w * x[k];
    den += w;
  }
  return num / den;
}

double norm2(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

// Smallest order statistic with empirical CDF >= p.
double empirical_quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  auto k = static_cast<std::size_t>(std::ceil(p * static_cast<double>(v.size())));
  k = std::clamp<std::size_t>(k, 1, v.size());
  return v[k - 1];
}

// Type-7 (linear interpolation) sample quantile.
double interpolated_quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double h = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct Unit {
  int t;
  double y1;
  double pi;
};

// Outcome, treatment and propensity for one covariate row of the synthetic
// design.
Unit draw_unit(const DgpConfig& cfg, std::span<const double> x, Rng& noise_rng, Rng& treat_rng) {
  Unit u{};
  u.pi = propensity_true(x);
  u.y1 = conditional_mean(cfg.scenario, x) + sigma_fn(x, cfg.variance, cfg.d) * sample_noise(cfg.noise, noise_rng);
  u.t = std::bernoulli_distribution(u.pi)(treat_rng) ? 1 : 0;
  return u;
}

void push_unit(Dataset& ds, std::span<const double> x, int t, double y1, double y0, double pi, Split s) {
  ds.X.append_row(x);
  ds.t.push_back(t);
  ds.y1_true.push_back(y1);
  ds.y0_true.push_back(y0);
  ds.y.push_back(t == 1 ? y1 : y0);
  ds.pi_true.push_back(pi);
  ds.split.push_back(s);
}

std::vector<std::string_view> split_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    auto cell = line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
    while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r')) cell.remove_suffix(1);
    out.push_back(cell);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

double parse_number(std::string_view s) {
  if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw FormatError("not a number: '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace

std::string_view to_string(Scenario s) { return kScenarioNames[static_cast<int>(s)]; }
std::string_view to_string(Noise n) { return kNoiseNames[static_cast<int>(n)]; }
std::string_view to_string(Variance v) { return kVarianceNames[static_cast<int>(v)]; }
std::string_view to_string(Split s) { return kSplitNames[static_cast<int>(s)]; }
Scenario parse_scenario(std::string_view s) { return parse_enum<Scenario>(s, kScenarioNames, "scenario"); }
Noise parse_noise(std::string_view s) { return parse_enum<Noise>(s, kNoiseNames, "noise family"); }
Variance parse_variance(std::string_view s) { return parse_enum<Variance>(s, kVarianceNames, "variance mode"); }
Split parse_split(std::string_view s) { return parse_enum<Split>(s, kSplitNames, "split tag"); }

void DgpConfig::validate() const {
  if (d < 2) throw ConfigError("d must be at least 2");
  if (scenario == Scenario::highdim && d % 4 != 0) throw ConfigError("highdim scenario requires d divisible by 4");
  if (n_train < 1 || n_cal < 1 || n_test < 1) throw ConfigError("n_train, n_cal and n_test must be >= 1");
}

std::vector<std::size_t> Dataset::rows(Split s, std::optional<int> arm) const {
  if (!has_split()) throw FormatError("dataset has no split column");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < size(); ++i) {
    if (split[i] == s && (!arm || t[i] == *arm)) idx.push_back(i);
  }
  return idx;
}

void Dataset::validate() const {
  const std::size_t n = size();
  if (X.rows() != n || t.size() != n) throw ShapeError("dataset columns differ in length");
  if (!split.empty() && split.size() != n) throw ShapeError("split column length differs");
  for (int v : t) {
    if (v != 0 && v != 1) throw FormatError("treatment must be 0 or 1");
  }
  if (has_oracles()) {
    if (y0_true.size() != n || pi_true.size() != n || y1_true.size() != n) {
      throw ShapeError("oracle columns differ in length");
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (y[i] != t[i] * y1_true[i] + (1 - t[i]) * y0_true[i]) {
        throw FormatError("row " + std::to_string(i) + " violates y = t*y1 + (1-t)*y0");
      }
      if (!(pi_true[i] > 0.0 && pi_true[i] < 1.0)) throw FormatError("pi_true outside (0, 1)");
    }
  }
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

Matrix gen_covariates(std::size_t n, std::size_t d, Rng& rng) {
  Matrix X(n, d);
  for (auto& v : X.storage()) v = normal_cdf(standard_normal(rng));
  return X;
}

double mean_lowdim(std::span<const double> x) {
  if (x.size() < 2) throw ShapeError("mean_lowdim needs at least two coordinates");
  return logistic_bump(x[0], 12.0) * logistic_bump(x[1], 12.0);
}

double mean_highdim(std::span<const double> x) {
  const std::size_t d = x.size();
  if (d < 4 || d % 4 != 0) throw ShapeError("mean_highdim needs d divisible by 4");
  const double z1 = ramp_average(x, 0, d / 4);
  const double z2 = ramp_average(x, d / 4, d / 2);
  const double z3 = ramp_average(x, d / 2, d);
  const double f1 = logistic_bump(z1, 60.0);
  const double f2 = 4.0 / (1.0 + (z2 - 0.5) * (z2 - 0.5)) + 1.0;
  const double f3 = std::exp(std::pow(z3 - 0.5, 3) + 1.0) + 1.0;
  return f1 * f2 - f3;
}

double conditional_mean(Scenario s, std::span<const double> x) {
  return s == Scenario::lowdim ? mean_lowdim(x) : mean_highdim(x);
}

double sample_nlm_raw(Rng& rng) {
  const double g = std::gamma_distribution<double>(5.5, 2.0)(rng);
  const bool negative = std::bernoulli_distribution(0.5)(rng);
  return negative ? -std::sqrt(g) : std::sqrt(g);
}

double sample_noise(Noise family, Rng& rng) {
  switch (family) {
    case Noise::gaussian:
      return standard_normal(rng);
    case Noise::gamma:
      return (std::gamma_distribution<double>(2.0, 1.0)(rng) - 2.0) / std::numbers::sqrt2;
    case Noise::nlm:
      return sample_nlm_raw(rng) / std::sqrt(11.0);
  }
  throw ConfigError("unknown noise family");
}

double sigma_fn(std::span<const double> x, Variance mode, std::size_t d) {
  if (mode == Variance::homo) return 1.0;
  if (x.empty()) throw ShapeError("sigma_fn: empty covariate vector");
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(x.size());
  if (mu < 0.5) return 0.5;
  return 5.0 * std::sqrt(static_cast<double>(d) / 10.0) * std::abs(std::cos(std::numbers::pi * mu));
}

double beta24_cdf(double u) {
  if (u <= 0.0) return 0.0;
  if (u >= 1.0) return 1.0;
  const double u2 = u * u;
  return u2 * (10.0 + u * (-20.0 + u * (15.0 - 4.0 * u)));
}

double propensity_true(std::span<const double> x) {
  if (x.empty()) throw ShapeError("propensity_true: empty covariate vector");
  return 0.25 * (1.0 + beta24_cdf(x[0]));
}

double shift_threshold(const DgpConfig& config) {
  config.validate();
  Rng ref(derive_seed(config.seed, "reference"));
  const Matrix R = gen_covariates(config.n_train + config.n_cal, config.d, ref);
  std::vector<double> norms(R.rows());
  for (std::size_t i = 0; i < R.rows(); ++i) norms[i] = norm2(R.row(i));
  return empirical_quantile(std::move(norms), 0.9);
}

Dataset gen_dataset(const DgpConfig& config) {
  config.validate();
  Dataset ds;
  ds.X = Matrix(0, config.d);

  Rng cov(derive_seed(config.seed, "covariates"));
  Rng noise(derive_seed(config.seed, "noise"));
  Rng treat(derive_seed(config.seed, "treatment"));
  const Matrix X = gen_covariates(config.n_train + config.n_cal, config.d, cov);
  for (std::size_t i = 0; i < X.rows(); ++i) {
    const auto x = X.row(i);
    const Unit u = draw_unit(config, x, noise, treat);
    push_unit(ds, x, u.t, u.y1, 0.0, u.pi, i < config.n_train ? Split::train : Split::cal);
  }

  Rng test_cov(derive_seed(config.seed, "test-covariates"));
  Rng test_noise(derive_seed(config.seed, "test-noise"));
  Rng test_treat(derive_seed(config.seed, "test-treatment"));
  const bool shifted = config.variance == Variance::hetero;
  const double q = shifted ? shift_threshold(config) : 0.0;
  std::vector<double> x(config.d);
  std::size_t kept = 0;
  while (kept < config.n_test) {
    for (auto& v : x) v = normal_cdf(standard_normal(test_cov));
    if (shifted && norm2(x) < q) continue;
    const Unit u = draw_unit(config, x, test_noise, test_treat);
    push_unit(ds, x, u.t, u.y1, 0.0, u.pi, Split::test);
    ++kept;
  }
  return ds;
}

bool ColumnFilter::accepts(double v) const {
  if (op == "<") return v < value;
  if (op == "<=") return v <= value;
  if (op == ">") return v > value;
  if (op == ">=") return v >= value;
  if (op == "==") return v == value;
  if (op == "!=") return v != value;
  throw ConfigError("unknown filter operator '" + op + "'");
}

void SemiSyntheticConfig::validate() const {
  if (!(fit_fraction > 0.0 && fit_fraction < 1.0)) throw ConfigError("fit_fraction must lie in (0, 1)");
  if (n_train < 1 || n_cal < 1 || n_test_candidates < 1) throw ConfigError("generated sizes must be >= 1");
  if (!(iqr_factor >= 0.0)) throw ConfigError("iqr_factor must be >= 0");
  if (!(0.0 < pi_lo && pi_lo < pi_hi && pi_hi < 1.0)) throw ConfigError("need 0 < pi_lo < pi_hi < 1");
  for (const auto& f : test_filter) f.accepts(0.0);
}

std::size_t Table::column(std::string_view name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw FormatError("missing column '" + std::string(name) + "'");
}

bool Table::has_column(std::string_view name) const {
  return std::find(header.begin(), header.end(), name) != header.end();
}

double Table::number(std::size_t row, std::size_t col) const {
  try {
    return parse_number(cells.at(row).at(col));
  } catch (const FormatError& e) {
    throw FormatError("row " + std::to_string(row + 2) + ", column '" + header[col] + "': " + e.what());
  }
}

Table parse_table(std::string_view text) {
  Table tab;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_line(line);
    if (tab.header.empty()) {
      tab.header.assign(cells.begin(), cells.end());
      continue;
    }
    if (cells.size() != tab.header.size()) {
      throw FormatError("line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                        " cells, header has " + std::to_string(tab.header.size()));
    }
    tab.cells.emplace_back(cells.begin(), cells.end());
  }
  if (tab.header.empty()) throw FormatError("empty table");
  return tab;
}

Table read_table(const std::string& path) { return parse_table(io::read_file(path)); }

Dataset semi_synthetic(const Table& source, const SemiSyntheticConfig& config, SemiSyntheticFit* fit_out) {
  config.validate();
  const std::size_t tcol = source.column(config.treatment_column);
  const std::size_t ycol = source.column(config.outcome_column);

  std::vector<std::string> cov_names = config.covariate_columns;
  if (cov_names.empty()) {
    static const std::string_view skip[] = {"y1_true", "y0_true", "pi_true", "split"};
    for (const auto& h : source.header) {
      if (h == config.treatment_column || h == config.outcome_column) continue;
      if (std::find(std::begin(skip), std::end(skip), h) != std::end(skip)) continue;
      cov_names.push_back(h);
    }
  }
  if (cov_names.empty()) throw FormatError("no covariate columns");
  std::vector<std::size_t> cov_cols;
  for (const auto& name : cov_names) cov_cols.push_back(source.column(name));
  std::vector<std::size_t> filter_cols;
  for (const auto& f : config.test_filter) filter_cols.push_back(source.column(f.column));

  const std::size_t n = source.cells.size();
  if (n < 4) throw FormatError("source table needs at least 4 rows");
  Matrix X(n, cov_cols.size());
  std::vector<int> t(n);
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < cov_cols.size(); ++k) X(i, k) = source.number(i, cov_cols[k]);
    const double tv = source.number(i, tcol);
    if (tv != 0.0 && tv != 1.0) throw FormatError("treatment column must hold 0/1");
    t[i] = static_cast<int>(tv);
    y[i] = source.number(i, ycol);
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng shuffle(derive_seed(config.seed, "fit-split"));
  std::shuffle(order.begin(), order.end(), shuffle);
  auto n_fit = static_cast<std::size_t>(std::llround(config.fit_fraction * static_cast<double>(n)));
  n_fit = std::clamp<std::size_t>(n_fit, 1, n - 1);
  std::vector<std::size_t> fit_rows(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_fit));
  std::vector<std::size_t> pool(order.begin() + static_cast<std::ptrdiff_t>(n_fit), order.end());
  std::sort(fit_rows.begin(), fit_rows.end());
  std::sort(pool.begin(), pool.end());

  std::vector<std::size_t> treated;
  for (auto i : fit_rows) {
    if (t[i] == 1) treated.push_back(i);
  }
  if (treated.empty()) throw FormatError("no treated rows in the fitting split");

  SemiSyntheticFit fit;
  fit.covariate_columns = cov_names;
  {
    const Matrix Xt = X.select_rows(treated);
    std::vector<double> yt;
    for (auto i : treated) yt.push_back(y[i]);
    auto mcfg = config.outcome_model;
    mcfg.min_leaf = std::min(mcfg.min_leaf, std::max<std::size_t>(1, treated.size() / 2));
    fit.mean_model = propensity::fit_gbm_regression(Xt, yt, mcfg);
    std::vector<double> resid(treated.size());
    for (std::size_t j = 0; j < treated.size(); ++j) {
      resid[j] = yt[j] - propensity::predict_value(fit.mean_model, Xt.row(j));
    }
    fit.residual_iqr = interpolated_quantile(resid, 0.75) - interpolated_quantile(resid, 0.25);
  }
  {
    const Matrix Xf = X.select_rows(fit_rows);
    std::vector<int> tf;
    for (auto i : fit_rows) tf.push_back(t[i]);
    auto pcfg = config.propensity_model;
    pcfg.clip_lo = config.pi_lo;
    pcfg.clip_hi = config.pi_hi;
    pcfg.min_leaf = std::min(pcfg.min_leaf, std::max<std::size_t>(1, fit_rows.size() / 2));
    fit.propensity_model = propensity::fit_gbm(Xf, tf, pcfg);
  }

  Dataset ds;
  ds.X = Matrix(0, cov_cols.size());
  Rng draw(derive_seed(config.seed, "covariates"));
  Rng noise(derive_seed(config.seed, "noise"));
  Rng treat(derive_seed(config.seed, "treatment"));
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  const double spread = config.iqr_factor * fit.residual_iqr;

  auto emit = [&](std::size_t src, Split s) {
    const auto x = X.row(src);
    const double pi = propensity::predict_propensity(fit.propensity_model, x);
    const int ti = std::bernoulli_distribution(pi)(treat) ? 1 : 0;
    const double y1 = propensity::predict_value(fit.mean_model, x) + spread * standard_normal(noise);
    push_unit(ds, x, ti, y1, 0.0, pi, s);
  };
  for (std::size_t i = 0; i < config.n_train + config.n_cal; ++i) {
    emit(pool[pick(draw)], i < config.n_train ? Split::train : Split::cal);
  }
  for (std::size_t i = 0; i < config.n_test_candidates; ++i) {
    const std::size_t src = pool[pick(draw)];
    bool keep = true;
    for (std::size_t f = 0; f < filter_cols.size() && keep; ++f) {
      keep = config.test_filter[f].accepts(source.number(src, filter_cols[f]));
    }
    if (keep) emit(src, Split::test);
  }
  if (ds.rows(Split::test).empty()) throw ConfigError("test filter rejected every candidate row");
  if (fit_out) *fit_out = std::move(fit);
  return ds;
}

Dataset semi_synthetic_from_csv(const std::string& path, const SemiSyntheticConfig& config, SemiSyntheticFit* fit) {
  return semi_synthetic(read_table(path), config, fit);
}

std::string format_dataset_csv(const Dataset& data) {
  data.validate();
  std::string out;
  for (std::size_t k = 0; k < data.dim(); ++k) out += "x" + std::to_string(k + 1) + ",";
  out += "t,y";
  if (data.has_oracles()) out += ",y1_true,y0_true,pi_true";
  if (data.has_split()) out += ",split";
  out += '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (double v : data.X.row(i)) out += io::format_double(v) + ",";
    out += std::to_string(data.t[i]) + "," + io::format_double(data.y[i]);
    if (data.has_oracles()) {
      out += "," + io::format_double(data.y1_true[i]) + "," + io::format_double(data.y0_true[i]) + "," +
             io::format_double(data.pi_true[i]);
    }
    if (data.has_split()) {
      out += ",";
      out += to_string(data.split[i]);
    }
    out += '\n';
  }
  return out;
}

void write_dataset_csv(const Dataset& data, const std::string& path) {
  io::write_file_atomic(path, format_dataset_csv(data));
}

Dataset parse_dataset_csv(std::string_view text) {
  const Table tab = parse_table(text);
  std::size_t d = 0;
  while (tab.has_column("x" + std::to_string(d + 1))) ++d;
  if (d == 0) throw FormatError("dataset needs covariate columns x1..xd");
  std::vector<std::size_t> xcols;
  for (std::size_t k = 0; k < d; ++k) xcols.push_back(tab.column("x" + std::to_string(k + 1)));
  const std::size_t tcol = tab.column("t");
  const std::size_t ycol = tab.column("y");
  const bool oracles = tab.has_column("y1_true");
  const bool has_split = tab.has_column("split");

  Dataset ds;
  const std::size_t n = tab.cells.size();
  ds.X = Matrix(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) ds.X(i, k) = tab.number(i, xcols[k]);
    const double tv = tab.number(i, tcol);
    if (tv != 0.0 && tv != 1.0) throw FormatError("row " + std::to_string(i + 2) + ": t must be 0 or 1");
    ds.t.push_back(static_cast<int>(tv));
    ds.y.push_back(tab.number(i, ycol));
    if (oracles) {
      ds.y1_true.push_back(tab.number(i, tab.column("y1_true")));
      ds.y0_true.push_back(tab.number(i, tab.column("y0_true")));
      ds.pi_true.push_back(tab.number(i, tab.column("pi_true")));
    }
    if (has_split) ds.split.push_back(parse_split(tab.cells[i][tab.column("split")]));
  }
  ds.validate();
  return ds;
}

Dataset read_dataset_csv(const std::string& path) { return parse_dataset_csv(io::read_file(path)); }

}  // namespace cdm::datagen
