#include "cdm/bench.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

#include "cdm/error.hpp"
#include "cdm/io.hpp"

namespace cdm::bench {

namespace {

constexpr std::string_view kMethodNames[] = {"cdm", "cdm_nolocal", "mlp", "naive", "cqr", "causal_forest"};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<double> gather(std::span<const double> v, std::span<const std::size_t> idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

double type7_quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double h = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

void zero_grad(nn::MlpParams& g) {
  for (auto& l : g.layers) {
    std::fill(l.weight.begin(), l.weight.end(), 0.0);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
  }
}

double mlp_mse(const nn::MlpParams& net, const Matrix& X, std::span<const double> ystd,
               std::span<const std::size_t> rows, nn::MlpWorkspace& ws) {
  constexpr std::size_t kChunk = 1024;
  double sse = 0.0;
  nn::FeatureBatch in;
  for (std::size_t start = 0; start < rows.size(); start += kChunk) {
    const std::size_t cnt = std::min(kChunk, rows.size() - start);
    in.resize(X.cols(), cnt);
    for (std::size_t b = 0; b < cnt; ++b) {
      const auto x = X.row(rows[start + b]);
      for (std::size_t k = 0; k < x.size(); ++k) in.at(k, b) = x[k];
    }
    const auto& out = ws.forward(net, in);
    for (std::size_t b = 0; b < cnt; ++b) {
      const double e = out.at(0, b) - ystd[rows[start + b]];
      sse += e * e;
    }
  }
  return sse / static_cast<double>(rows.size());
}

struct Cell {
  Method method;
  double c_selected;
  bool has_c;
  SetMetrics metrics;
  double seconds;
};

}  // namespace

std::string_view to_string(Method m) { return kMethodNames[static_cast<int>(m)]; }

Method parse_method(std::string_view s) {
  for (std::size_t i = 0; i < std::size(kMethodNames); ++i) {
    if (kMethodNames[i] == s) return static_cast<Method>(i);
  }
  throw ConfigError("unknown method '" + std::string(s) + "'");
}

bool is_external(Method m) { return m == Method::cqr || m == Method::causal_forest; }

void ConformalConfig::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  if (M < 1) throw ConfigError("M must be >= 1");
  if (c_grid.empty()) throw ConfigError("bandwidth grid must not be empty");
  for (double c : c_grid) {
    if (!(c > 0.0)) throw ConfigError("bandwidth factors must be positive or inf");
  }
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("validation fraction must lie in (0, 1)");
}

void MlpTrainConfig::validate() const {
  if (epochs < 1 || batch_size < 1) throw ConfigError("mlp: epochs and batch_size must be >= 1");
  if (!(optimizer.lr > 0.0)) throw ConfigError("mlp: learning rate must be positive");
  if (lr_decay_every < 1) throw ConfigError("mlp: lr_decay_every must be >= 1");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("mlp: val_fraction must lie in [0, 1)");
  if (eval_every < 1 || patience < 1) throw ConfigError("mlp: eval_every and patience must be >= 1");
}

double MlpRegressor::predict(std::span<const double> x) const {
  return y_mean + y_sd * nn::mlp_forward(net, x)[0];
}

MlpRegressor train_mlp_regressor(const Matrix& X, std::span<const double> y, const MlpTrainConfig& config,
                                 const diffusion::EpochCallback& on_epoch) {
  config.validate();
  const std::size_t n = X.rows();
  if (y.size() != n) throw ShapeError("train_mlp_regressor: X and y row counts differ");
  if (n < 2) throw ConfigError("train_mlp_regressor needs at least 2 samples");

  MlpRegressor model;
  model.y_mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : y) ss += (v - model.y_mean) * (v - model.y_mean);
  model.y_sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (!(model.y_sd > 1e-12 * std::max(1.0, std::abs(model.y_mean)))) model.y_sd = 1.0;
  std::vector<double> ystd(n);
  for (std::size_t i = 0; i < n; ++i) ystd[i] = (y[i] - model.y_mean) / model.y_sd;

  model.net = nn::init_mlp(X.cols(), config.hidden, 1, derive_seed(config.seed, "init"));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_seed(config.seed, "split"));
  std::shuffle(order.begin(), order.end(), split_rng);
  auto n_val = static_cast<std::size_t>(std::llround(config.val_fraction * static_cast<double>(n)));
  if (n_val >= n) n_val = n - 1;
  std::vector<std::size_t> val_rows(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> fit_rows(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(fit_rows.begin(), fit_rows.end());

  Rng rng(derive_seed(config.seed, "train"));
  auto state = nn::AdamWState::init(model.net, config.optimizer);
  nn::MlpWorkspace ws;
  nn::MlpParams grad = model.net.zeros_like();
  nn::FeatureBatch in, upstream;
  nn::MlpParams best = model.net;
  double best_val = std::numeric_limits<double>::infinity();
  int bad_evals = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    state.config.lr = nn::lr_at_epoch(epoch, config.optimizer.lr, config.lr_decay, config.lr_decay_every);
    std::shuffle(fit_rows.begin(), fit_rows.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < fit_rows.size(); start += config.batch_size) {
      const std::size_t cnt = std::min(config.batch_size, fit_rows.size() - start);
      in.resize(X.cols(), cnt);
      for (std::size_t b = 0; b < cnt; ++b) {
        const auto x = X.row(fit_rows[start + b]);
        for (std::size_t k = 0; k < x.size(); ++k) in.at(k, b) = x[k];
      }
      const auto& out = ws.forward(model.net, in);
      upstream.resize(1, cnt);
      for (std::size_t b = 0; b < cnt; ++b) {
        const double e = out.at(0, b) - ystd[fit_rows[start + b]];
        loss_sum += e * e;
        upstream.at(0, b) = 2.0 * e / static_cast<double>(cnt);
      }
      zero_grad(grad);
      ws.backward(model.net, upstream, grad);
      nn::adamw_step(model.net, grad, state);
    }
    model.epochs_trained = epoch + 1;

    diffusion::EpochLog log{epoch, state.config.lr, loss_sum / static_cast<double>(fit_rows.size()), std::nullopt};
    bool stop = false;
    if (!val_rows.empty() && (epoch + 1) % config.eval_every == 0) {
      const double v = mlp_mse(model.net, X, ystd, val_rows, ws);
      log.val_loss = v;
      if (v < best_val) {
        best_val = v;
        best = model.net;
        bad_evals = 0;
      } else if (++bad_evals >= config.patience) {
        stop = true;
      }
    }
    if (on_epoch) on_epoch(log);
    if (stop) break;
  }
  if (!val_rows.empty()) {
    if (mlp_mse(model.net, X, ystd, val_rows, ws) < best_val) best = model.net;
    model.net = std::move(best);
  }
  model.net.validate();
  return model;
}

void ExperimentConfig::validate() const {
  if (experiment_id.empty()) throw ConfigError("experiment_id must not be empty");
  if (replicates < 1) throw ConfigError("replicates must be >= 1");
  if (methods.empty()) throw ConfigError("at least one method is required");
  for (auto m : methods) {
    if (is_external(m)) {
      throw ConfigError("method '" + std::string(to_string(m)) +
                        "' is computed externally; supply it through external_results");
    }
  }
  if (workers < 0) throw ConfigError("workers must be >= 0");
  if (const auto* dgp = std::get_if<datagen::DgpConfig>(&data)) {
    dgp->validate();
  } else {
    const auto& src = std::get<SemiSyntheticSource>(data);
    if (src.path.empty()) throw ConfigError("csv source needs a path");
    src.config.validate();
  }
  diffusion.validate();
  mlp.validate();
  propensity.validate();
  conformal.validate();
}

std::uint64_t replicate_seed(std::uint64_t root, int replicate) {
  return derive_seed(root, "replicate", {static_cast<std::uint64_t>(replicate)});
}

datagen::Dataset replicate_dataset(const ExperimentConfig& config, int replicate) {
  const std::uint64_t data_seed = derive_seed(replicate_seed(config.seed, replicate), "data");
  if (const auto* dgp = std::get_if<datagen::DgpConfig>(&config.data)) {
    auto cfg = *dgp;
    cfg.seed = data_seed;
    return datagen::gen_dataset(cfg);
  }
  const auto& src = std::get<SemiSyntheticSource>(config.data);
  auto cfg = src.config;
  cfg.seed = data_seed;
  cfg.outcome_model.seed = derive_seed(data_seed, "outcome-model");
  cfg.propensity_model.seed = derive_seed(data_seed, "propensity-model");
  return datagen::semi_synthetic_from_csv(src.path, cfg);
}

TrainSplit split_treated_train(const datagen::Dataset& data, double val_fraction, std::uint64_t seed) {
  auto treated = data.rows(datagen::Split::train, 1);
  if (treated.size() < 2) throw ConfigError("need at least 2 treated training rows");
  Rng rng(derive_seed(seed, "treated-train-split"));
  std::shuffle(treated.begin(), treated.end(), rng);
  auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(treated.size())));
  n_val = std::min(n_val, treated.size() - 2);
  TrainSplit out;
  out.validation.assign(treated.begin(), treated.begin() + static_cast<std::ptrdiff_t>(n_val));
  out.fit.assign(treated.begin() + static_cast<std::ptrdiff_t>(n_val), treated.end());
  std::sort(out.validation.begin(), out.validation.end());
  std::sort(out.fit.begin(), out.fit.end());
  return out;
}

propensity::PropensityModel fit_propensity(const datagen::Dataset& data, const propensity::GbmConfig& config) {
  const auto rows = data.rows(datagen::Split::train);
  if (rows.empty()) throw ConfigError("no training rows");
  std::vector<int> t;
  std::size_t treated = 0;
  for (auto i : rows) {
    t.push_back(data.t[i]);
    treated += static_cast<std::size_t>(data.t[i]);
  }
  if (treated == 0 || treated == rows.size()) {
    const double frac = static_cast<double>(treated) / static_cast<double>(rows.size());
    return propensity::ConstantPropensity{std::clamp(frac, config.clip_lo, config.clip_hi)};
  }
  auto cfg = config;
  cfg.min_leaf = std::min(cfg.min_leaf, std::max<std::size_t>(1, rows.size() / 2));
  return propensity::fit_gbm(data.X.select_rows(rows), t, cfg);
}

ScoreSource::ScoreSource(diffusion::DiffusionModel model, std::size_t M) : model_(std::move(model)), M_(M) {
  if (M < 1) throw ConfigError("M must be >= 1");
}

ScoreSource::ScoreSource(MlpRegressor model) : model_(std::move(model)), M_(1) {}

std::string_view ScoreSource::tag() const { return diffusion() ? "diffusion" : "mlp"; }

std::size_t ScoreSource::draws_per_row() const { return M_; }

std::size_t ScoreSource::covariate_dim() const {
  return diffusion() ? diffusion()->covariate_dim : mlp()->net.in_dim();
}

Matrix ScoreSource::draws(const Matrix& X, std::uint64_t stream, int workers) const {
  if (X.rows() > 0 && X.cols() != covariate_dim()) throw ShapeError("score source: covariate dimension mismatch");
  const std::size_t n = X.rows();
  if (const auto* reg = mlp()) {
    Matrix out(n, 1);
    for (std::size_t i = 0; i < n; ++i) out(i, 0) = reg->predict(X.row(i));
    return out;
  }
  std::vector<std::uint64_t> seeds(n);
  for (std::size_t i = 0; i < n; ++i) seeds[i] = derive_seed(stream, {i});
  const int w = resolve_workers(workers);
  if (w <= 1 || n < 2) return diffusion::sample_many(*diffusion(), X, M_, seeds);

  const std::size_t chunk = (n + static_cast<std::size_t>(w) - 1) / static_cast<std::size_t>(w);
  const std::size_t tasks = (n + chunk - 1) / chunk;
  Matrix out(n, M_);
  auto errors = run_pool(tasks, w, [&](std::size_t task) {
    const std::size_t lo = task * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    std::vector<std::size_t> idx(hi - lo);
    std::iota(idx.begin(), idx.end(), lo);
    const Matrix part = diffusion::sample_many(*diffusion(), X.select_rows(idx),
                                               M_, std::span<const std::uint64_t>(seeds).subspan(lo, hi - lo));
    for (std::size_t i = lo; i < hi; ++i) {
      const auto r = part.row(i - lo);
      std::copy(r.begin(), r.end(), out.row(i).begin());
    }
  });
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

Matrix kernel_noise(std::size_t rows, std::size_t d, std::uint64_t stream) {
  Rng rng(stream);
  Matrix z(rows, d);
  for (auto& v : z.storage()) v = standard_normal(rng);
  return z;
}

conformal::CalibrationSet calibrate(const Matrix& X, std::span<const double> y, const Matrix& draws,
                                    const propensity::PropensityModel& pi) {
  if (X.rows() != y.size() || draws.rows() != y.size()) throw ShapeError("calibrate: row counts differ");
  if (y.empty()) throw ConfigError("no treated calibration rows");
  std::vector<double> scores(y.size());
  std::vector<double> balance(y.size());
  for (std::size_t j = 0; j < y.size(); ++j) {
    scores[j] = conformal::nonconformity_score(y[j], draws.row(j));
    balance[j] = conformal::balance_weight(1, propensity::predict_propensity(pi, X.row(j)));
  }
  return conformal::CalibrationSet(X, std::move(scores), std::move(balance));
}

std::vector<conformal::PointPrediction> predict_sets(const conformal::CalibrationSet& cal, const Matrix& X_test,
                                                     const Matrix& draws, const Matrix& noise,
                                                     const propensity::PropensityModel& pi, conformal::Bandwidth h,
                                                     double alpha) {
  if (draws.rows() != X_test.rows()) throw ShapeError("predict_sets: one draw row per test row required");
  if (h.localized() && noise.rows() != X_test.rows()) throw ShapeError("predict_sets: one noise row per test row");
  std::vector<conformal::PointPrediction> out;
  out.reserve(X_test.rows());
  const std::vector<double> no_noise(X_test.cols(), 0.0);
  for (std::size_t k = 0; k < X_test.rows(); ++k) {
    const auto x = X_test.row(k);
    const double wb = conformal::balance_weight(1, propensity::predict_propensity(pi, x));
    const auto z = h.localized() ? noise.row(k) : std::span<const double>(no_noise);
    out.push_back(conformal::predict_point(cal, x, wb, h, z, draws.row(k), alpha));
  }
  return out;
}

conformal::PredictionSet naive_interval(std::span<const double> draws, double alpha) {
  if (draws.empty()) throw ConfigError("naive_interval: no draws");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  std::vector<double> v(draws.begin(), draws.end());
  const double lo = type7_quantile(v, alpha / 2.0);
  const double hi = type7_quantile(v, 1.0 - alpha / 2.0);
  return conformal::PredictionSet::from_intervals({{lo, hi}});
}

SetMetrics evaluate_sets(std::span<const conformal::PredictionSet> sets, std::span<const double> truth) {
  if (sets.size() != truth.size()) throw ShapeError("evaluate_sets: one truth value per set required");
  if (sets.empty()) throw ConfigError("evaluate_sets: no sets");
  SetMetrics m;
  m.n = sets.size();
  std::size_t covered = 0;
  std::vector<double> lengths(sets.size());
  for (std::size_t k = 0; k < sets.size(); ++k) {
    covered += sets[k].contains(truth[k]) ? 1 : 0;
    lengths[k] = sets[k].total_length();
    if (std::isinf(lengths[k])) ++m.infinite_count;
  }
  m.coverage = static_cast<double>(covered) / static_cast<double>(m.n);
  std::sort(lengths.begin(), lengths.end());
  const std::size_t mid = m.n / 2;
  m.median_length = m.n % 2 == 1 ? lengths[mid] : 0.5 * (lengths[mid - 1] + lengths[mid]);
  return m;
}

double choose_bandwidth(std::span<const BandwidthTrial> trials, double alpha) {
  if (trials.empty()) throw ConfigError("choose_bandwidth: no trials");
  std::vector<const BandwidthTrial*> pool;
  for (const auto& t : trials)
    if (std::isfinite(t.median_length)) pool.push_back(&t);
  if (pool.empty())
    for (const auto& t : trials) pool.push_back(&t);
  const BandwidthTrial* best = nullptr;
  for (const auto* t : pool) {
    if (t->coverage >= 1.0 - alpha && (!best || t->c < best->c)) best = t;
  }
  if (best) return best->c;
  for (const auto* t : pool) {
    if (!best || t->coverage > best->coverage ||
        (t->coverage == best->coverage &&
         (t->median_length < best->median_length || (t->median_length == best->median_length && t->c < best->c)))) {
      best = t;
    }
  }
  return best->c;
}

BandwidthChoice select_bandwidth(const conformal::CalibrationSet& cal, const Matrix& X_val,
                                 std::span<const double> y_val, const Matrix& val_draws, const Matrix& val_noise,
                                 const propensity::PropensityModel& pi, std::span<const double> grid, double alpha) {
  if (grid.empty()) throw ConfigError("select_bandwidth: empty grid");
  BandwidthChoice choice;
  if (grid.size() == 1) {
    choice.c = grid[0];
    return choice;
  }
  if (X_val.rows() == 0) throw ConfigError("select_bandwidth: no validation rows");
  const std::size_t d = X_val.cols();
  for (double c : grid) {
    const auto preds = predict_sets(cal, X_val, val_draws, val_noise, pi, conformal::Bandwidth::from_factor(c, d), alpha);
    std::vector<conformal::PredictionSet> sets;
    sets.reserve(preds.size());
    for (const auto& p : preds) sets.push_back(p.set);
    const auto m = evaluate_sets(sets, y_val);
    choice.trials.push_back({c, m.coverage, m.median_length});
  }
  choice.c = choose_bandwidth(choice.trials, alpha);
  return choice;
}

std::vector<Record> run_replicate(const ExperimentConfig& config, int replicate, std::span<const Method> methods,
                                  const ReplicateLog& log) {
  auto info = [&](const std::string& msg) {
    if (log.info) log.info(msg);
  };
  auto wants = [&](Method m) { return std::find(methods.begin(), methods.end(), m) != methods.end(); };
  for (auto m : methods) {
    if (is_external(m)) throw ConfigError("method '" + std::string(to_string(m)) + "' is not computed internally");
  }

  try {
    const auto t_start = Clock::now();
    const std::uint64_t rs = replicate_seed(config.seed, replicate);
    const auto data = replicate_dataset(config, replicate);
    if (!data.has_oracles()) throw FormatError("replicate data lacks oracle outcomes");
    const std::size_t d = data.dim();
    const double alpha = config.conformal.alpha;

    auto pcfg = config.propensity;
    pcfg.seed = derive_seed(rs, "propensity");
    const auto pi = fit_propensity(data, pcfg);

    const auto split = split_treated_train(data, config.conformal.val_fraction, rs);
    const auto cal_rows = data.rows(datagen::Split::cal, 1);
    const auto test_rows = data.rows(datagen::Split::test);
    if (test_rows.empty()) throw ConfigError("no test rows");
    const Matrix X_fit = data.X.select_rows(split.fit);
    const auto y_fit = gather(data.y, split.fit);
    const Matrix X_val = data.X.select_rows(split.validation);
    const auto y_val = gather(data.y, split.validation);
    const Matrix X_cal = data.X.select_rows(cal_rows);
    const auto y_cal = gather(data.y, cal_rows);
    const Matrix X_test = data.X.select_rows(test_rows);
    std::vector<double> tau(test_rows.size());
    for (std::size_t k = 0; k < test_rows.size(); ++k) {
      tau[k] = data.y1_true[test_rows[k]] - data.y0_true[test_rows[k]];
    }
    const Matrix noise_test = kernel_noise(X_test.rows(), d, derive_seed(rs, "kernel", {1}));
    const Matrix noise_val = kernel_noise(X_val.rows(), d, derive_seed(rs, "kernel", {2}));
    const double shared_seconds = seconds_since(t_start);
    info("replicate " + std::to_string(replicate) + ": " + std::to_string(split.fit.size()) + " fit, " +
         std::to_string(split.validation.size()) + " validation, " + std::to_string(cal_rows.size()) + " cal, " +
         std::to_string(test_rows.size()) + " test rows");

    std::vector<Cell> cells;
    auto sets_of = [](const std::vector<conformal::PointPrediction>& preds) {
      std::vector<conformal::PredictionSet> s;
      s.reserve(preds.size());
      for (const auto& p : preds) s.push_back(p.set);
      return s;
    };

    if (wants(Method::cdm) || wants(Method::cdm_nolocal) || wants(Method::naive)) {
      const auto t0 = Clock::now();
      auto dcfg = config.diffusion;
      dcfg.seed = derive_seed(rs, "train:diffusion");
      ScoreSource src(diffusion::train_denoiser(X_fit, y_fit, dcfg, log.on_epoch), config.conformal.M);
      info("replicate " + std::to_string(replicate) + ": diffusion trained for " +
           std::to_string(src.diffusion()->epochs_trained) + " epochs");
      const std::uint64_t stream = derive_seed(rs, "draws:diffusion");
      const Matrix draws_test = src.draws(X_test, derive_seed(stream, {1}));
      const double source_seconds = seconds_since(t0);

      std::optional<conformal::CalibrationSet> cal;
      double cal_seconds = 0.0;
      if (wants(Method::cdm) || wants(Method::cdm_nolocal)) {
        const auto t1 = Clock::now();
        cal.emplace(calibrate(X_cal, y_cal, src.draws(X_cal, derive_seed(stream, {0})), pi));
        cal_seconds = seconds_since(t1);
      }
      if (wants(Method::cdm)) {
        const auto t1 = Clock::now();
        const auto& grid = config.conformal.c_grid;
        BandwidthChoice choice;
        if (grid.size() == 1) {
          choice.c = grid[0];
        } else {
          const Matrix draws_val = src.draws(X_val, derive_seed(stream, {2}));
          choice = select_bandwidth(*cal, X_val, y_val, draws_val, noise_val, pi, grid, alpha);
        }
        const auto preds = predict_sets(*cal, X_test, draws_test, noise_test, pi,
                                        conformal::Bandwidth::from_factor(choice.c, d), alpha);
        cells.push_back({Method::cdm, choice.c, true, evaluate_sets(sets_of(preds), tau),
                         shared_seconds + source_seconds + cal_seconds + seconds_since(t1)});
        info("replicate " + std::to_string(replicate) + ": cdm selected c=" + io::format_double(choice.c));
      }
      if (wants(Method::cdm_nolocal)) {
        const auto t1 = Clock::now();
        const auto preds = predict_sets(*cal, X_test, draws_test, noise_test, pi, conformal::Bandwidth::none(), alpha);
        cells.push_back({Method::cdm_nolocal, conformal::kInf, false, evaluate_sets(sets_of(preds), tau),
                         shared_seconds + source_seconds + cal_seconds + seconds_since(t1)});
      }
      if (wants(Method::naive)) {
        const auto t1 = Clock::now();
        std::vector<conformal::PredictionSet> sets;
        for (std::size_t k = 0; k < X_test.rows(); ++k) sets.push_back(naive_interval(draws_test.row(k), alpha));
        cells.push_back({Method::naive, conformal::kInf, false, evaluate_sets(sets, tau),
                         shared_seconds + source_seconds + seconds_since(t1)});
      }
    }

    if (wants(Method::mlp)) {
      const auto t0 = Clock::now();
      auto mcfg = config.mlp;
      mcfg.seed = derive_seed(rs, "train:mlp");
      ScoreSource src(train_mlp_regressor(X_fit, y_fit, mcfg, log.on_epoch));
      const std::uint64_t stream = derive_seed(rs, "draws:mlp");
      const auto cal = calibrate(X_cal, y_cal, src.draws(X_cal, derive_seed(stream, {0})), pi);
      const auto preds = predict_sets(cal, X_test, src.draws(X_test, derive_seed(stream, {1})), noise_test, pi,
                                      conformal::Bandwidth::none(), alpha);
      cells.push_back({Method::mlp, conformal::kInf, false, evaluate_sets(sets_of(preds), tau),
                       shared_seconds + seconds_since(t0)});
    }

    std::vector<Record> out;
    for (auto m : methods) {
      for (const auto& c : cells) {
        if (c.method != m) continue;
        Record r;
        r.experiment_id = config.experiment_id;
        r.method = m;
        r.replicate = replicate;
        r.seed = rs;
        r.coverage = c.metrics.coverage;
        r.median_length = c.metrics.median_length;
        r.infinite_count = c.metrics.infinite_count;
        r.n_test = c.metrics.n;
        r.alpha = alpha;
        if (c.has_c) r.c_selected = c.c_selected;
        r.wallclock_seconds = c.seconds;
        out.push_back(std::move(r));
      }
    }
    return out;
  } catch (const std::exception& e) {
    throw Error("replicate " + std::to_string(replicate) + ": " + e.what());
  }
}

std::vector<MethodSummary> aggregate(std::span<const Record> records) {
  std::map<int, std::vector<const Record*>> groups;
  for (const auto& r : records) groups[static_cast<int>(r.method)].push_back(&r);
  std::vector<MethodSummary> out;
  for (const auto& [key, recs] : groups) {
    MethodSummary s;
    s.method = static_cast<Method>(key);
    s.replicates = recs.size();
    const double R = static_cast<double>(recs.size());
    double sum = 0.0;
    for (const auto* r : recs) {
      sum += r->coverage;
      s.infinite_sets += r->infinite_count;
    }
    s.coverage_mean = sum / R;
    double ss = 0.0;
    for (const auto* r : recs) ss += (r->coverage - s.coverage_mean) * (r->coverage - s.coverage_mean);
    s.degenerate_interval = recs.size() < 2;
    s.coverage_sd = s.degenerate_interval ? 0.0 : std::sqrt(ss / (R - 1.0));
    const double half = 1.96 * s.coverage_sd / std::sqrt(R);
    s.coverage_lo = s.coverage_mean - half;
    s.coverage_hi = s.coverage_mean + half;

    std::vector<double> lengths;
    for (const auto* r : recs) {
      if (std::isfinite(r->median_length)) lengths.push_back(r->median_length);
    }
    s.finite_length_replicates = lengths.size();
    if (!lengths.empty()) {
      const double L = static_cast<double>(lengths.size());
      s.length_mean = std::accumulate(lengths.begin(), lengths.end(), 0.0) / L;
      double lss = 0.0;
      for (double v : lengths) lss += (v - s.length_mean) * (v - s.length_mean);
      s.length_sd = lengths.size() < 2 ? 0.0 : std::sqrt(lss / (L - 1.0));
      const double lhalf = 1.96 * s.length_sd / std::sqrt(L);
      s.length_lo = s.length_mean - lhalf;
      s.length_hi = s.length_mean + lhalf;
    }
    out.push_back(s);
  }
  return out;
}

std::vector<Record> read_external_records(const std::string& path) {
  const auto tab = datagen::read_table(path);
  const std::size_t mcol = tab.column("method");
  const std::size_t rcol = tab.column("replicate");
  const std::size_t ccol = tab.column("coverage");
  const std::size_t lcol = tab.column("median_length");
  const bool has_inf = tab.has_column("infinite_count");
  std::vector<Record> out;
  for (std::size_t i = 0; i < tab.cells.size(); ++i) {
    Record r;
    r.method = parse_method(tab.cells[i][mcol]);
    if (!is_external(r.method)) {
      throw FormatError(path + ": external results may only hold cqr or causal_forest records");
    }
    r.replicate = static_cast<int>(tab.number(i, rcol));
    r.coverage = tab.number(i, ccol);
    r.median_length = tab.number(i, lcol);
    if (has_inf) r.infinite_count = static_cast<std::size_t>(tab.number(i, tab.column("infinite_count")));
    if (!(r.coverage >= 0.0 && r.coverage <= 1.0)) throw FormatError(path + ": coverage outside [0, 1]");
    out.push_back(std::move(r));
  }
  return out;
}

int resolve_workers(int workers) {
  if (workers > 0) return workers;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

std::vector<std::exception_ptr> run_pool(std::size_t tasks, int workers, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(tasks);
  const auto w = static_cast<std::size_t>(std::min<std::size_t>(static_cast<std::size_t>(resolve_workers(workers)), tasks));
  if (w <= 1) {
    for (std::size_t i = 0; i < tasks; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
    return errors;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> threads;
  threads.reserve(w);
  for (std::size_t k = 0; k < w; ++k) {
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < tasks; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  return errors;
}

}  // namespace cdm::bench
