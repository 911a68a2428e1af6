#include <doctest.h>

#include <cmath>
#include <vector>

#include "cdm/datagen.hpp"
#include "cdm/propensity.hpp"

using namespace cdm;
using namespace cdm::propensity;

TEST_CASE("sigmoid and logit") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(logit(0.75) == doctest::Approx(std::log(3.0)));
  CHECK(sigmoid(logit(0.3)) == doctest::Approx(0.3));
  CHECK(sigmoid(-800.0) >= 0.0);
  CHECK(sigmoid(800.0) <= 1.0);
}

TEST_CASE("zero trees predict the treated fraction") {
  Matrix X(40, 1);
  std::vector<int> t(40, 0);
  for (int i = 0; i < 40; ++i) X(i, 0) = i;
  for (int i = 0; i < 12; ++i) t[i * 3] = 1;
  GbmConfig cfg;
  cfg.n_trees = 0;
  auto m = fit_gbm(X, t, cfg);
  for (double x : {-5.0, 3.0, 100.0}) {
    const std::vector<double> row{x};
    CHECK(predict_propensity(m, row) == doctest::Approx(0.3));
  }
}

TEST_CASE("intercept-only model at a balanced fraction") {
  BoostedTreesModel m;
  m.n_features = 1;
  m.init = 0.0;
  const std::vector<double> x{1.0};
  CHECK(predict_propensity(m, x) == 0.5);
}

TEST_CASE("predictions are clipped") {
  BoostedTreesModel m;
  m.n_features = 1;
  m.init = logit(0.999);
  const std::vector<double> x{0.0};
  CHECK(predict_propensity(m, x) == 0.95);
  m.init = logit(0.001);
  CHECK(predict_propensity(m, x) == 0.05);
}

TEST_CASE("separable one-dimensional data") {
  const int n = 400;
  Matrix X(n, 1);
  std::vector<int> t(n);
  Rng rng(1);
  for (int i = 0; i < n; ++i) {
    X(i, 0) = 2 * uniform01(rng) - 1;
    t[i] = X(i, 0) > 0 ? 1 : 0;
  }
  GbmConfig cfg;
  cfg.max_depth = 1;
  cfg.n_trees = 50;
  auto m = fit_gbm(X, t, cfg);
  int correct = 0;
  for (int i = 0; i < n; ++i) correct += (predict_propensity(m, X.row(i)) > 0.5) == (t[i] == 1);
  CHECK(correct == n);
  CHECK(m.train_loss.size() == 51);
  CHECK(m.train_loss.back() < m.train_loss.front());
  for (const auto& tree : m.trees) CHECK(tree.depth() <= 1);
}

TEST_CASE("boosting recovers the generator propensity") {
  datagen::DgpConfig dgp;
  dgp.n_train = 5000;
  dgp.n_cal = 1;
  dgp.n_test = 1;
  dgp.seed = 17;
  auto data = datagen::gen_dataset(dgp);
  const auto train = data.rows(datagen::Split::train);
  std::vector<int> t;
  for (auto i : train) t.push_back(data.t[i]);
  GbmConfig cfg;
  cfg.seed = 4;
  auto m = fit_gbm(data.X.select_rows(train), t, cfg);

  Rng rng(23);
  auto fresh = datagen::gen_covariates(2000, 10, rng);
  double mae = 0.0;
  for (std::size_t i = 0; i < fresh.rows(); ++i)
    mae += std::abs(predict_propensity(m, fresh.row(i)) - datagen::propensity_true(fresh.row(i)));
  mae /= fresh.rows();
  CHECK(mae <= 0.10);
}

TEST_CASE("single class is refused") {
  Matrix X(30, 1);
  std::vector<int> t(30, 1);
  CHECK_THROWS_AS(fit_gbm(X, t, {}), ConfigError);
}

TEST_CASE("squared-loss boosting fits a step") {
  const int n = 200;
  Matrix X(n, 1);
  std::vector<double> y(n);
  for (int i = 0; i < n; ++i) {
    X(i, 0) = i / double(n);
    y[i] = X(i, 0) < 0.5 ? -1.0 : 2.0;
  }
  GbmConfig cfg;
  cfg.n_trees = 100;
  cfg.shrinkage = 0.3;
  auto m = fit_gbm_regression(X, y, cfg);
  const std::vector<double> lo{0.1}, hi{0.9};
  CHECK(predict_value(m, lo) == doctest::Approx(-1.0).epsilon(1e-3));
  CHECK(predict_value(m, hi) == doctest::Approx(2.0).epsilon(1e-3));
  CHECK_THROWS_AS(predict_propensity(m, lo), ConfigError);
}

TEST_CASE("logistic regression") {
  SUBCASE("intercept-only MLE") {
    Matrix X(400, 1, 0.0);
    std::vector<int> t(400, 0);
    for (int i = 0; i < 300; ++i) t[i] = 1;
    auto m = fit_logistic(X, t);
    CHECK(m.intercept == doctest::Approx(std::log(3.0)).epsilon(1e-8));
    REQUIRE(m.dropped_features.size() == 1);
    CHECK(m.coef[0] == 0.0);
  }
  SUBCASE("independent balanced treatment") {
    const int n = 20000;
    Matrix X(n, 2);
    std::vector<int> t(n);
    Rng rng(9);
    for (int i = 0; i < n; ++i) {
      X(i, 0) = standard_normal(rng);
      X(i, 1) = standard_normal(rng);
      t[i] = uniform01(rng) < 0.5;
    }
    auto m = fit_logistic(X, t);
    CHECK(std::abs(m.intercept) < 0.05);
    CHECK(std::abs(m.coef[0]) < 0.05);
    CHECK(std::abs(m.coef[1]) < 0.05);
  }
  SUBCASE("known slope") {
    const int n = 20000;
    Matrix X(n, 1);
    std::vector<int> t(n);
    Rng rng(10);
    for (int i = 0; i < n; ++i) {
      X(i, 0) = standard_normal(rng);
      t[i] = uniform01(rng) < sigmoid(0.5 + 1.5 * X(i, 0));
    }
    auto m = fit_logistic(X, t);
    CHECK(m.intercept == doctest::Approx(0.5).epsilon(0.1));
    CHECK(m.coef[0] == doctest::Approx(1.5).epsilon(0.1));
  }
  SUBCASE("iteration cap surfaces diagnostics") {
    Matrix X(50, 1);
    std::vector<int> t(50);
    for (int i = 0; i < 50; ++i) {
      X(i, 0) = i - 25.0;
      t[i] = i >= 25;
    }
    LogisticConfig cfg;
    cfg.max_iter = 2;
    try {
      fit_logistic(X, t, cfg);
      FAIL("expected non-convergence");
    } catch (const NonConvergenceError& e) {
      CHECK(e.iterations == 2);
      CHECK(e.grad_norm > 0.0);
    }
  }
}

TEST_CASE("variant dispatch") {
  PropensityModel c = ConstantPropensity{0.3};
  const std::vector<double> x{1.0};
  CHECK(predict_propensity(c, x) == 0.3);
}
