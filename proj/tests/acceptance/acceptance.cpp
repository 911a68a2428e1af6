// Acceptance checks. `acceptance N` runs criterion N, `acceptance` runs all
// of them. Each prints one PASS/FAIL line; the exit status is nonzero if any
// selected criterion failed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/logger.h>

#include "cdm/bench.hpp"
#include "cdm/cli.hpp"
#include "cdm/config.hpp"
#include "cdm/conformal.hpp"
#include "cdm/datagen.hpp"
#include "cdm/diffusion.hpp"
#include "cdm/io.hpp"
#include "cdm/numerics.hpp"
#include "cdm/propensity.hpp"

using namespace cdm;
using conformal::kInf;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  double max_seconds;  // 0 = no runtime bound
  std::function<Outcome()> run;
};

std::string fmt_real(double v, int digits = 4) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os.precision(digits);
  os << std::fixed << v;
  return os.str();
}

std::vector<double> random_masses(std::size_t n, Rng& rng) {
  std::vector<double> p(n);
  for (auto& v : p) {
    const double u = uniform01(rng);
    v = u < 0.15 ? 0.0 : -std::log(uniform01(rng) + 1e-300);
  }
  if (std::all_of(p.begin(), p.end(), [](double v) { return v == 0.0; })) p[rng() % n] = 1.0;
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  for (auto& v : p) v /= total;
  return p;
}

// Values drawn from a small grid half the time so ties are common.
double random_value(Rng& rng) {
  return uniform01(rng) < 0.5 ? double(rng() % 6) : 10 * uniform01(rng);
}

Outcome lemma1_exactness() {
  Rng rng(101);
  int disagreements = 0;
  for (int inst = 0; inst < 1000; ++inst) {
    const std::size_t n = 1 + rng() % 20;
    std::vector<double> v(n + 1);
    for (auto& x : v) x = random_value(rng);
    const auto p = random_masses(n + 1, rng);
    double beta = uniform01(rng);
    if (inst % 10 == 0) {
      // Land exactly on a cumulative mass.
      std::vector<std::size_t> order(n + 1);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
      double cum = 0.0;
      const std::size_t stop = rng() % (n + 1);
      for (std::size_t k = 0; k <= stop; ++k) cum += p[order[k]];
      beta = std::min(cum, 1.0);
    }
    if (!conformal::lemma1_check(v, p, beta)) ++disagreements;
  }
  return {disagreements == 0, "1000 instances, " + std::to_string(disagreements) + " disagreements"};
}

Outcome membership_equivalence() {
  Rng rng(202);
  int disagreements = 0, ties = 0, infinite = 0, inside = 0;
  for (int inst = 0; inst < 1000; ++inst) {
    const std::size_t M = 1 + rng() % 12;
    std::vector<double> s(M);
    double q, y;
    const int kind = inst % 4;
    if (kind == 0) {
      // Boundary tie on a dyadic grid, where s +- q is exact.
      for (auto& v : s) v = double(static_cast<int>(rng() % 129) - 64) / 16.0;
      q = double(rng() % 33) / 16.0;
      const double anchor = s[rng() % M];
      y = uniform01(rng) < 0.5 ? anchor - q : anchor + q;
      ++ties;
    } else {
      for (auto& v : s) v = 8 * standard_normal(rng);
      q = kind == 1 ? kInf : 3 * uniform01(rng);
      y = 10 * standard_normal(rng);
      if (kind == 1) ++infinite;
    }
    try {
      inside += conformal::membership_equivalence_check(y, s, q);
    } catch (const Error&) {
      ++disagreements;
    }
  }
  return {disagreements == 0, "1000 instances (" + std::to_string(ties) + " boundary ties, " +
                                  std::to_string(infinite) + " with Q=inf, " + std::to_string(inside) +
                                  " members), " + std::to_string(disagreements) + " disagreements"};
}

// Sort + cumulative sum, straight from the definition.
double brute_force_quantile(const std::vector<double>& scores, const std::vector<double>& masses, double level) {
  std::vector<std::pair<double, double>> pairs;
  for (std::size_t i = 0; i < scores.size(); ++i) pairs.emplace_back(scores[i], masses[i]);
  std::sort(pairs.begin(), pairs.end(), [](auto& a, auto& b) { return a.first < b.first; });
  double cum = 0.0;
  for (const auto& [s, m] : pairs) {
    cum += m;
    if (cum >= level) return s;
  }
  return kInf;
}

Outcome weighted_quantile_oracle() {
  Rng rng(303);
  int weighted_mismatch = 0, uniform_mismatch = 0;
  const int alphas_pct[] = {5, 10, 20, 25, 50};
  for (int inst = 0; inst < 500; ++inst) {
    const std::size_t n = 1 + rng() % 50;
    std::vector<double> s(n);
    for (auto& v : s) v = random_value(rng);
    auto all = random_masses(n + 1, rng);
    const double test_mass = all.back();
    all.pop_back();
    const double level = 1.0 - 0.01 * alphas_pct[rng() % 5];
    if (conformal::weighted_quantile(s, all, test_mass, level) != brute_force_quantile(s, all, level)) {
      ++weighted_mismatch;
    }

    const int a = alphas_pct[rng() % 5];
    std::vector<double> uniform(n, 1.0 / double(n + 1));
    const double q = conformal::weighted_quantile(s, uniform, 1.0 / double(n + 1), 1.0 - a / 100.0);
    // k = ceil((1 - alpha)(n + 1)) in integer arithmetic.
    const std::size_t k = ((100 - a) * (n + 1) + 99) / 100;
    auto sorted = s;
    std::sort(sorted.begin(), sorted.end());
    const double expected = k > n ? kInf : sorted[k - 1];
    if (q != expected) ++uniform_mismatch;
  }
  return {weighted_mismatch == 0 && uniform_mismatch == 0,
          "500 sets, " + std::to_string(weighted_mismatch) + " weighted and " + std::to_string(uniform_mismatch) +
              " uniform mismatches"};
}

double upstream_dot(const nn::MlpParams& p, const std::vector<double>& x, const std::vector<double>& g) {
  const auto y = nn::mlp_forward(p, x);
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * g[i];
  return s;
}

Outcome gradient_check() {
  Rng rng(404);
  const double step = 1e-5;
  // Relative error |a - b| / max(|a|, |b|, floor); the floor keeps entries
  // that are zero up to rounding from dividing by ~0.
  const double floor = 1e-6;
  double worst = 0.0;
  std::size_t entries = 0;
  for (int net = 0; net < 50; ++net) {
    const std::size_t in = 1 + rng() % 5, out = 1 + rng() % 3;
    std::vector<std::size_t> hidden(1 + rng() % 3);
    for (auto& h : hidden) h = 2 + rng() % 7;
    auto p = nn::init_mlp(in, hidden, out, rng());
    for (auto& l : p.layers)
      for (auto& b : l.bias) b = 0.2 * standard_normal(rng);
    std::vector<double> x(in), g(out);
    for (auto& v : x) v = standard_normal(rng);
    for (auto& v : g) v = standard_normal(rng);
    const auto grad = nn::mlp_backward(p, x, g);

    auto rel = [&](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor}); };
    for (std::size_t li = 0; li < p.layers.size(); ++li) {
      for (int which = 0; which < 2; ++which) {
        auto& buf = which == 0 ? p.layers[li].weight : p.layers[li].bias;
        const auto& gbuf = which == 0 ? grad.params.layers[li].weight : grad.params.layers[li].bias;
        for (std::size_t k = 0; k < buf.size(); ++k) {
          const double keep = buf[k];
          buf[k] = keep + step;
          const double up = upstream_dot(p, x, g);
          buf[k] = keep - step;
          const double down = upstream_dot(p, x, g);
          buf[k] = keep;
          worst = std::max(worst, rel(gbuf[k], (up - down) / (2 * step)));
          ++entries;
        }
      }
    }
    for (std::size_t k = 0; k < in; ++k) {
      auto xp = x, xm = x;
      xp[k] += step;
      xm[k] -= step;
      worst = std::max(worst, rel(grad.input[k], (upstream_dot(p, xp, g) - upstream_dot(p, xm, g)) / (2 * step)));
      ++entries;
    }
  }
  std::ostringstream os;
  os << "50 nets, " << entries << " entries, max relative error " << std::scientific << std::setprecision(2)
     << worst;
  return {worst <= 1e-4, os.str()};
}

nn::MlpParams scalar_param(double v) {
  nn::MlpParams p;
  nn::Layer l;
  l.in_dim = l.out_dim = 1;
  l.weight = {v};
  l.bias = {0.0};
  p.layers.push_back(l);
  return p;
}

Outcome adamw_single_step() {
  nn::AdamWConfig cfg;
  cfg.lr = 0.01;
  cfg.beta1 = 0.9;
  cfg.beta2 = 0.999;
  cfg.eps = 1e-8;
  cfg.weight_decay = 0.01;
  auto r = nn::adamw_step(scalar_param(1.0), scalar_param(1.0), nn::AdamWState::init(scalar_param(1.0), cfg));
  const double hand = 1.0 - 0.01 * 1.0 / (1.0 + 1e-8) - 0.01 * 0.01 * 1.0;
  const double got = r.params.layers[0].weight[0];
  const bool step_ok = std::abs(got - hand) <= 1e-12 && std::abs(got - 0.98990) < 5e-6;

  struct Case {
    double p, lr, wd;
  };
  const Case cases[] = {{4.0, 0.5, 0.25}, {1.0, 0.25, 0.5}, {-8.0, 0.125, 0.5}, {3.0, 1.0, 0.0}};
  int exact = 0;
  for (const auto& c : cases) {
    nn::AdamWConfig z;
    z.lr = c.lr;
    z.weight_decay = c.wd;
    auto zr = nn::adamw_step(scalar_param(c.p), scalar_param(0.0), nn::AdamWState::init(scalar_param(c.p), z));
    exact += zr.params.layers[0].weight[0] == c.p * (1.0 - c.lr * c.wd);
  }
  std::ostringstream os;
  os.precision(12);
  os << "p' = " << got << " (hand " << hand << "), zero-gradient decay exact in " << exact << "/4 cases";
  return {step_ok && exact == 4, os.str()};
}

Outcome noise_oracles() {
  const std::size_t n = 1000000;
  Rng rng(606);
  double r2 = 0.0, ns = 0.0, ns2 = 0.0, gs = 0.0, gs2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double raw = datagen::sample_nlm_raw(rng);
    r2 += raw * raw;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double v = datagen::sample_noise(datagen::Noise::nlm, rng);
    ns += v;
    ns2 += v * v;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double v = datagen::sample_noise(datagen::Noise::gamma, rng);
    gs += v;
    gs2 += v * v;
  }
  const double N = double(n);
  const double raw2 = r2 / N;
  const double nlm_sd = std::sqrt(ns2 / N - (ns / N) * (ns / N));
  const double gamma_mean = gs / N;
  const double gamma_sd = std::sqrt(gs2 / N - gamma_mean * gamma_mean);
  const bool ok = std::abs(raw2 - 11.0) <= 0.05 && std::abs(nlm_sd - 1.0) <= 0.01 && std::abs(gamma_mean) <= 0.01 &&
                  std::abs(gamma_sd - 1.0) <= 0.01;
  return {ok, "nlm E[x^2] " + fmt_real(raw2) + ", nlm sd " + fmt_real(nlm_sd) + ", gamma mean " + fmt_real(gamma_mean) +
                  ", gamma sd " + fmt_real(gamma_sd)};
}

Outcome propensity_oracle() {
  const bool exact = datagen::beta24_cdf(0.5) == 0.8125;
  datagen::DgpConfig dgp;
  dgp.d = 10;
  dgp.n_train = 5000;
  dgp.n_cal = 1;
  dgp.n_test = 1;
  dgp.seed = 707;
  const auto data = datagen::gen_dataset(dgp);
  const auto train = data.rows(datagen::Split::train);
  std::vector<int> t;
  for (auto i : train) t.push_back(data.t[i]);
  propensity::GbmConfig cfg;
  cfg.seed = 708;
  const auto model = propensity::fit_gbm(data.X.select_rows(train), t, cfg);
  Rng rng(709);
  const auto fresh = datagen::gen_covariates(5000, 10, rng);
  double mae = 0.0;
  for (std::size_t i = 0; i < fresh.rows(); ++i) {
    mae += std::abs(propensity::predict_propensity(model, fresh.row(i)) - datagen::propensity_true(fresh.row(i)));
  }
  mae /= double(fresh.rows());
  return {exact && mae <= 0.10,
          std::string("beta24(0.5) ") + (exact ? "== 0.8125" : "!= 0.8125") + ", propensity MAE " + fmt_real(mae)};
}

Outcome diffusion_recovery() {
  const std::size_t n = 4000;
  Rng rng(808);
  Matrix X(n, 1);
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    X(i, 0) = uniform01(rng);
    y[i] = 2 * X(i, 0) + 0.5 * standard_normal(rng);
  }
  diffusion::TrainConfig cfg;
  cfg.seed = 809;
  const auto model = diffusion::train_denoiser(X, y, cfg);
  const std::vector<double> x{0.5};
  Rng srng(810);
  const auto draws = diffusion::sample(model, x, 4000, srng);
  const double mean = std::accumulate(draws.begin(), draws.end(), 0.0) / double(draws.size());
  double ss = 0.0;
  for (double v : draws) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / double(draws.size() - 1));
  const bool ok = std::abs(mean - 1.0) <= 0.15 && sd >= 0.3 && sd <= 0.8;
  return {ok, "mean at x=0.5 " + fmt_real(mean) + " (target 1), sd " + fmt_real(sd) + " (target 0.5), " +
                  std::to_string(model.epochs_trained) + " epochs"};
}

bench::ExperimentConfig desk_config(datagen::Variance variance, std::vector<bench::Method> methods,
                                    std::uint64_t seed) {
  bench::ExperimentConfig c;
  datagen::DgpConfig dgp;
  dgp.scenario = datagen::Scenario::lowdim;
  dgp.noise = datagen::Noise::gaussian;
  dgp.variance = variance;
  dgp.d = 10;
  dgp.n_train = 2000;
  dgp.n_cal = 800;
  dgp.n_test = 500;
  c.data = dgp;
  c.methods = std::move(methods);
  c.conformal.alpha = 0.05;
  c.replicates = 10;
  c.seed = seed;
  c.experiment_id = "desk";
  return c;
}

std::vector<bench::MethodSummary> run_desk(const bench::ExperimentConfig& cfg, std::string& per_replicate) {
  std::vector<bench::Record> records;
  for (int r = 0; r < cfg.replicates; ++r) {
    auto recs = bench::run_replicate(cfg, r, cfg.methods);
    for (const auto& rec : recs) {
      if (rec.method == bench::Method::cdm) per_replicate += (per_replicate.empty() ? "" : " ") + fmt_real(rec.coverage, 3);
    }
    records.insert(records.end(), recs.begin(), recs.end());
  }
  return bench::aggregate(records);
}

const bench::MethodSummary& summary_of(const std::vector<bench::MethodSummary>& rows, bench::Method m) {
  for (const auto& r : rows)
    if (r.method == m) return r;
  throw Error("missing method in summary");
}

Outcome desk_coverage() {
  const auto cfg = desk_config(datagen::Variance::homo, {bench::Method::cdm}, 909);
  std::string reps;
  const auto rows = run_desk(cfg, reps);
  const auto& cdm = summary_of(rows, bench::Method::cdm);
  return {cdm.coverage_mean >= 0.92, "CDM mean coverage " + fmt_real(cdm.coverage_mean) + " over 10 replicates [" + reps +
                                         "], finite-median mean length " + fmt_real(cdm.length_mean, 3)};
}

Outcome shift_ordering() {
  const auto cfg = desk_config(datagen::Variance::hetero,
                               {bench::Method::cdm, bench::Method::cdm_nolocal, bench::Method::naive}, 1010);
  std::string reps;
  const auto rows = run_desk(cfg, reps);
  const double cdm = summary_of(rows, bench::Method::cdm).coverage_mean;
  const double nolocal = summary_of(rows, bench::Method::cdm_nolocal).coverage_mean;
  const double naive = summary_of(rows, bench::Method::naive).coverage_mean;
  const bool ok = cdm >= 0.90 && cdm >= naive && nolocal <= cdm + 0.02;
  return {ok, "mean coverage cdm " + fmt_real(cdm) + ", cdm_nolocal " + fmt_real(nolocal) + ", naive " + fmt_real(naive) +
                  "; cdm per replicate [" + reps + "]"};
}

Outcome pipeline_equivalence() {
  Rng rng(1111);
  int mismatches = 0;
  const int alphas_pct[] = {5, 10, 20};
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = 5 + rng() % 200, M = 1 + rng() % 10, d = 1 + rng() % 4;
    Matrix X(n, d), draws(n, M);
    std::vector<double> y(n);
    for (auto& v : X.storage()) v = uniform01(rng);
    for (auto& v : draws.storage()) v = standard_normal(rng);
    for (auto& v : y) v = 2 * standard_normal(rng);
    const propensity::PropensityModel pi = propensity::ConstantPropensity{0.05 + 0.9 * uniform01(rng)};
    const auto cal = bench::calibrate(X, y, draws, pi);

    const std::size_t nt = 3;
    Matrix Xt(nt, d), test_draws(nt, M), noise(nt, d);
    for (auto& v : Xt.storage()) v = uniform01(rng);
    for (auto& v : test_draws.storage()) v = standard_normal(rng);
    for (auto& v : noise.storage()) v = standard_normal(rng);
    const int a = alphas_pct[rng() % 3];
    const auto preds = bench::predict_sets(cal, Xt, test_draws, noise, pi,
                                           conformal::Bandwidth::from_factor(kInf, d), a / 100.0);

    auto sorted = cal.scores();
    std::sort(sorted.begin(), sorted.end());
    const std::size_t k = ((100 - a) * (n + 1) + 99) / 100;
    const double expected = k > n ? kInf : sorted[k - 1];
    for (const auto& p : preds) mismatches += p.quantile != expected;
  }
  return {mismatches == 0, "100 calibration sets, " + std::to_string(mismatches) + " quantile mismatches"};
}

Outcome experiment_determinism() {
  namespace fs = std::filesystem;
  const fs::path dir = fs::current_path() / "acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string config = R"({
    "experiment_id": "determinism",
    "seed": 1212,
    "replicates": 2,
    "methods": ["cdm", "cdm_nolocal", "mlp", "naive"],
    "data": {"variance": "hetero", "d": 10, "n_train": 800, "n_cal": 400, "n_test": 150},
    "diffusion": {"hidden": [64, 64], "epochs": 150},
    "mlp": {"hidden": [64, 64], "epochs": 150},
    "conformal": {"M": 20}
  })";
  io::write_file_atomic((dir / "config.json").string(), config);
  auto quiet = std::make_shared<spdlog::logger>("acceptance");
  auto run = [&](const std::string& name, int workers) {
    cli::GlobalOptions g;
    g.config_path = (dir / "config.json").string();
    g.out = (dir / name).string();
    g.workers = workers;
    const auto ctx = cli::make_context(g, quiet);
    std::ostringstream summary;
    const int rc = cli::cmd_experiment(ctx, summary);
    return std::pair{rc, io::read_file((dir / name).string())};
  };
  const auto [rc1, first] = run("first.jsonl", 1);
  const auto [rc2, second] = run("second.jsonl", 2);
  const bool identical = first == second;
  const auto lines = std::count(first.begin(), first.end(), '\n');
  fs::remove_all(dir);
  return {rc1 == 0 && rc2 == 0 && identical && lines == 8,
          std::to_string(lines) + " records, " + std::to_string(first.size()) + " bytes, documents " +
              (identical ? "byte-identical" : "differ") + " (1 vs 2 workers)"};
}

std::vector<Criterion> criteria() {
  return {
      {1, "lemma 1 exactness", 1.0, lemma1_exactness},
      {2, "membership equivalence", 1.0, membership_equivalence},
      {3, "weighted-quantile oracle", 1.0, weighted_quantile_oracle},
      {4, "gradient correctness", 30.0, gradient_check},
      {5, "adamw single step", 0.0, adamw_single_step},
      {6, "noise-family oracles", 10.0, noise_oracles},
      {7, "propensity oracle", 60.0, propensity_oracle},
      {8, "diffusion moment recovery", 300.0, diffusion_recovery},
      {9, "desk-scale coverage", 1800.0, desk_coverage},
      {10, "shift ordering", 2400.0, shift_ordering},
      {11, "pipeline equivalence", 0.0, pipeline_equivalence},
      {12, "determinism", 0.0, experiment_determinism},
  };
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));
  int failures = 0;
  for (const auto& c : criteria()) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::string timing = fmt_real(secs, 2) + " s";
    if (c.max_seconds > 0) {
      timing += " / limit " + fmt_real(c.max_seconds, 0) + " s";
      if (secs > c.max_seconds) {
        out.pass = false;
        out.detail += "; runtime bound exceeded";
      }
    }
    std::cout << (out.pass ? "PASS" : "FAIL") << "  criterion " << c.id << " (" << c.name << "): " << out.detail
              << " [" << timing << "]" << std::endl;
    failures += !out.pass;
  }
  return failures == 0 ? 0 : 1;
}
