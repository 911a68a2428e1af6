#include <doctest.h>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include "cdm/bench.hpp"

using namespace cdm;
using namespace cdm::bench;
using conformal::kInf;
using conformal::PredictionSet;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  datagen::DgpConfig dgp;
  dgp.d = 4;
  dgp.n_train = 300;
  dgp.n_cal = 200;
  dgp.n_test = 60;
  c.data = dgp;
  c.diffusion.hidden = {16, 16};
  c.diffusion.embed_dim = 8;
  c.diffusion.epochs = 15;
  c.mlp.hidden = {16};
  c.mlp.epochs = 15;
  c.propensity.n_trees = 20;
  c.conformal.M = 8;
  c.seed = 77;
  c.replicates = 1;
  return c;
}

Record record(Method m, double coverage, double length) {
  Record r;
  r.method = m;
  r.coverage = coverage;
  r.median_length = length;
  return r;
}

}  // namespace

TEST_CASE("method names") {
  for (auto m : {Method::cdm, Method::cdm_nolocal, Method::mlp, Method::naive, Method::cqr, Method::causal_forest})
    CHECK(parse_method(to_string(m)) == m);
  CHECK(is_external(Method::cqr));
  CHECK(!is_external(Method::naive));
  CHECK_THROWS_AS(parse_method("forest"), ConfigError);
}

TEST_CASE("naive interval") {
  const std::vector<double> same(10, 2.5);
  auto s = naive_interval(same, 0.05);
  CHECK(s.intervals().front() == conformal::Interval{2.5, 2.5});

  std::vector<double> grid(100);
  for (int i = 0; i < 100; ++i) grid[i] = i + 1;
  auto g = naive_interval(grid, 0.05);
  CHECK(!g.is_entire_line());
  REQUIRE(g.intervals().size() == 1);
  CHECK(g.intervals()[0].lo == doctest::Approx(1 + 0.025 * 99));
  CHECK(g.intervals()[0].hi == doctest::Approx(1 + 0.975 * 99));
}

TEST_CASE("set metrics") {
  std::vector<PredictionSet> sets{PredictionSet::entire_line(), PredictionSet::entire_line()};
  const std::vector<double> truth{1.0, -4.0};
  auto m = evaluate_sets(sets, truth);
  CHECK(m.coverage == 1.0);
  CHECK(m.median_length == kInf);
  CHECK(m.infinite_count == 2);

  std::vector<PredictionSet> mixed{PredictionSet::from_intervals({{0, 1}}), PredictionSet::from_intervals({{0, 3}}),
                                   PredictionSet::entire_line()};
  const std::vector<double> t3{2.0, 2.0, 2.0};
  auto m3 = evaluate_sets(mixed, t3);
  CHECK(m3.coverage == doctest::Approx(2.0 / 3));
  CHECK(m3.median_length == 3.0);
  CHECK(m3.infinite_count == 1);
}

TEST_CASE("aggregation") {
  std::vector<Record> recs{record(Method::cdm, 0.9, 2.0), record(Method::cdm, 1.0, 4.0), record(Method::naive, 0.8, 1.0)};
  auto rows = aggregate(recs);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].method == Method::cdm);
  CHECK(rows[0].coverage_mean == doctest::Approx(0.95));
  CHECK(rows[0].length_mean == doctest::Approx(3.0));
  const double half = 1.96 * std::sqrt(0.005) / std::sqrt(2.0);
  CHECK(rows[0].coverage_lo == doctest::Approx(0.95 - half));
  CHECK(rows[0].coverage_hi == doctest::Approx(0.95 + half));
  CHECK(!rows[0].degenerate_interval);
  CHECK(rows[1].degenerate_interval);
  CHECK(rows[1].coverage_lo == 0.8);
  CHECK(rows[1].coverage_hi == 0.8);

  std::vector<Record> inf{record(Method::cdm, 1.0, kInf), record(Method::cdm, 0.9, 2.0)};
  auto r2 = aggregate(inf);
  CHECK(r2[0].finite_length_replicates == 1);
  CHECK(r2[0].length_mean == 2.0);
}

TEST_CASE("bandwidth selection") {
  const std::size_t n = 40, nv = 20, d = 2;
  Rng rng(4);
  Matrix Xc(n, d), Xv(nv, d), draws(nv, 3), noise(nv, d);
  for (auto& v : Xc.storage()) v = uniform01(rng);
  for (auto& v : Xv.storage()) v = uniform01(rng);
  for (auto& v : draws.storage()) v = standard_normal(rng);
  for (auto& v : noise.storage()) v = standard_normal(rng);
  propensity::PropensityModel pi = propensity::ConstantPropensity{0.5};
  const std::vector<double> grid{0.05, 0.2, 1.0, kInf};

  SUBCASE("singleton grid is returned untouched") {
    conformal::CalibrationSet cal(Xc, std::vector<double>(n, 0.0), std::vector<double>(n, 2.0));
    const std::vector<double> yv(nv, 0.0), one{kInf};
    auto choice = select_bandwidth(cal, Xv, yv, draws, noise, pi, one, 0.05);
    CHECK(choice.c == kInf);
    CHECK(choice.trials.empty());
  }
  SUBCASE("full validation coverage goes to the smallest finite factor") {
    conformal::CalibrationSet cal(Xc, std::vector<double>(n, 0.0), std::vector<double>(n, 2.0));
    std::vector<double> yv(nv);
    for (std::size_t i = 0; i < nv; ++i) yv[i] = draws(i, 0);
    auto choice = select_bandwidth(cal, Xv, yv, draws, noise, pi, grid, 0.05);
    REQUIRE(choice.trials.size() == grid.size());
    for (const auto& t : choice.trials) CHECK(t.coverage == 1.0);
    CHECK(choice.trials.back().median_length == 0.0);
    double expected = kInf;
    for (const auto& t : choice.trials)
      if (std::isfinite(t.median_length)) expected = std::min(expected, t.c);
    CHECK(choice.c == expected);
  }
  SUBCASE("selection agrees with choose_bandwidth on the trials") {
    std::vector<double> scores(n);
    for (auto& s : scores) s = std::abs(standard_normal(rng));
    conformal::CalibrationSet cal(Xc, scores, std::vector<double>(n, 2.0));
    std::vector<double> yv(nv);
    for (auto& y : yv) y = standard_normal(rng);
    auto choice = select_bandwidth(cal, Xv, yv, draws, noise, pi, grid, 0.2);
    CHECK(choice.c == choose_bandwidth(choice.trials, 0.2));
  }
}

TEST_CASE("bandwidth rule") {
  using T = BandwidthTrial;
  SUBCASE("smallest qualifying factor wins over a shorter one") {
    const std::vector<T> t{{0.1, 0.96, 9.0}, {0.5, 0.97, 4.0}, {kInf, 0.95, 3.0}};
    CHECK(choose_bandwidth(t, 0.05) == 0.1);
  }
  SUBCASE("factors with unbounded median sets are skipped") {
    const std::vector<T> t{{0.02, 1.0, kInf}, {0.1, 0.99, kInf}, {0.2, 0.95, 5.0}, {kInf, 0.96, 3.0}};
    CHECK(choose_bandwidth(t, 0.05) == 0.2);
  }
  SUBCASE("no qualifying factor takes the best coverage") {
    const std::vector<T> t{{0.02, 1.0, kInf}, {0.2, 0.93, 4.0}, {0.5, 0.94, 3.5}, {kInf, 0.94, 3.4}};
    CHECK(choose_bandwidth(t, 0.05) == kInf);
  }
  SUBCASE("all unbounded falls back to every trial") {
    const std::vector<T> t{{0.02, 1.0, kInf}, {0.05, 0.97, kInf}};
    CHECK(choose_bandwidth(t, 0.05) == 0.02);
  }
  CHECK_THROWS_AS(choose_bandwidth({}, 0.05), ConfigError);
}

TEST_CASE("treated training split") {
  datagen::DgpConfig dgp;
  dgp.n_train = 400;
  dgp.n_cal = 10;
  dgp.n_test = 10;
  dgp.seed = 1;
  auto data = datagen::gen_dataset(dgp);
  auto split = split_treated_train(data, 0.15, 5);
  const auto treated = data.rows(datagen::Split::train, 1);
  CHECK(split.fit.size() + split.validation.size() == treated.size());
  CHECK(split.validation.size() == static_cast<std::size_t>(std::llround(0.15 * treated.size())));
  CHECK(std::is_sorted(split.fit.begin(), split.fit.end()));
  for (auto i : split.validation) CHECK(data.t[i] == 1);
  auto again = split_treated_train(data, 0.15, 5);
  CHECK(again.validation == split.validation);
}

TEST_CASE("score source draws do not depend on worker count") {
  const std::size_t n = 200;
  Matrix X(n, 1);
  std::vector<double> y(n);
  Rng rng(2);
  for (std::size_t i = 0; i < n; ++i) {
    X(i, 0) = uniform01(rng);
    y[i] = X(i, 0) + 0.2 * standard_normal(rng);
  }
  diffusion::TrainConfig tc;
  tc.hidden = {8};
  tc.embed_dim = 4;
  tc.epochs = 5;
  ScoreSource src(diffusion::train_denoiser(X, y, tc), 6);
  CHECK(src.draws_per_row() == 6);
  auto a = src.draws(X, 123, 1);
  auto b = src.draws(X, 123, 3);
  CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
}

TEST_CASE("thread pool captures failures per task") {
  std::atomic<int> ran{0};
  auto errors = run_pool(6, 3, [&](std::size_t i) {
    ++ran;
    if (i == 4) throw std::runtime_error("boom");
  });
  CHECK(ran == 6);
  REQUIRE(errors.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) CHECK(static_cast<bool>(errors[i]) == (i == 4));
}

TEST_CASE("external records") {
  const char* path = "external_records_test.csv";
  {
    std::ofstream f(path);
    f << "method,replicate,coverage,median_length\ncqr,0,0.93,4.5\ncausal_forest,0,0.88,3.0\n";
  }
  auto recs = read_external_records(path);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].method == Method::cqr);
  CHECK(recs[1].median_length == 3.0);
  {
    std::ofstream f(path);
    f << "method,replicate,coverage,median_length\ncdm,0,0.93,4.5\n";
  }
  CHECK_THROWS_AS(read_external_records(path), FormatError);
  std::remove(path);
}

TEST_CASE("replicate pipeline") {
  auto cfg = tiny_config();
  cfg.conformal.c_grid = {kInf};
  const std::vector<Method> all{Method::cdm, Method::cdm_nolocal, Method::mlp, Method::naive};
  auto recs = run_replicate(cfg, 0, all);
  REQUIRE(recs.size() == 4);
  const auto& cdm = recs[0];
  const auto& nolocal = recs[1];
  CHECK(cdm.method == Method::cdm);
  CHECK(cdm.coverage == nolocal.coverage);
  CHECK(cdm.median_length == nolocal.median_length);
  CHECK(cdm.infinite_count == nolocal.infinite_count);
  REQUIRE(cdm.c_selected.has_value());
  CHECK(*cdm.c_selected == kInf);
  for (const auto& r : recs) {
    CHECK(r.n_test == 60);
    CHECK((r.coverage >= 0.0 && r.coverage <= 1.0));
  }
  CHECK(recs[3].infinite_count == 0);

  const std::vector<Method> only{Method::naive};
  auto alone = run_replicate(cfg, 0, only);
  CHECK(alone[0].coverage == recs[3].coverage);
  CHECK(alone[0].median_length == recs[3].median_length);
}
