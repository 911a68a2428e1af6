#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "cdm/diffusion.hpp"

using namespace cdm;
using namespace cdm::diffusion;

TEST_CASE("linear schedule endpoints") {
  auto s = make_schedule(400, 1e-4, 0.02);
  REQUIRE(s.beta.size() == 400);
  CHECK(s.beta.front() == 1e-4);
  CHECK(s.beta.back() == doctest::Approx(0.02).epsilon(1e-15));
  CHECK(s.alpha_bar.front() == 1.0 - s.beta.front());
  for (std::size_t i = 1; i < s.alpha_bar.size(); ++i) CHECK(s.alpha_bar[i] < s.alpha_bar[i - 1]);
}

TEST_CASE("two-step schedule by hand") {
  auto s = make_schedule(2, 0.5, 0.5);
  CHECK(s.alpha_bar[0] == 0.5);
  CHECK(s.alpha_bar[1] == 0.25);
}

TEST_CASE("schedule rejects bad bounds") {
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.02), ConfigError);
  CHECK_THROWS_AS(make_schedule(10, 0.05, 0.02), ConfigError);
  CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0), ConfigError);
  CHECK_THROWS_AS(make_schedule(1, 1e-4, 0.02), ConfigError);
}

TEST_CASE("forward noising") {
  CHECK(forward_noise_at(3.0, 1.0, 0.0) == 3.0);
  CHECK(forward_noise_at(2.0, 0.25, 1.0) == doctest::Approx(1.0 + std::sqrt(0.75)));
  auto s = make_schedule(2, 0.5, 0.5);
  CHECK(forward_noise(2.0, 2, 1.0, s) == doctest::Approx(1.0 + std::sqrt(0.75)));
  CHECK_THROWS_AS(forward_noise(2.0, 3, 1.0, s), ConfigError);

  auto sched = make_schedule(400, 1e-4, 0.02);
  Rng rng(3);
  const int t = 200;
  double sum = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) sum += forward_noise(1.5, t, standard_normal(rng), sched);
  const double ab = sched.alpha_bar[t - 1];
  const double se = std::sqrt((1 - ab) / n);
  CHECK(std::abs(sum / n - std::sqrt(ab) * 1.5) < 5 * se);
}

TEST_CASE("timestep embedding layout") {
  auto e = timestep_embedding(0, 8);
  REQUIRE(e.size() == 8);
  for (int i = 0; i < 4; ++i) {
    CHECK(e[i] == 0.0);
    CHECK(e[4 + i] == 1.0);
  }
  auto e7 = timestep_embedding(7, 4);
  CHECK(e7[0] == doctest::Approx(std::sin(7.0)));
  CHECK(e7[1] == doctest::Approx(std::sin(7.0 * std::pow(10000.0, -0.5))));
  CHECK(e7[2] == doctest::Approx(std::cos(7.0)));
}

TEST_CASE("default config carries the stated hyperparameters") {
  TrainConfig c;
  CHECK(c.steps == 400);
  CHECK(c.beta_min == 1e-4);
  CHECK(c.beta_max == 0.02);
  CHECK(c.batch_size == 128);
  CHECK(c.optimizer.lr == 1e-2);
  CHECK(c.optimizer.weight_decay == 1e-2);
  CHECK(c.lr_decay == 0.7);
  CHECK(c.lr_decay_every == 500);
  c.validate();
}

namespace {

TrainConfig small_config(std::uint64_t seed) {
  TrainConfig c;
  c.hidden = {32, 32};
  c.embed_dim = 16;
  c.epochs = 150;
  c.eval_every = 25;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("constant outcome trains with forced unit sd and samples near the constant") {
  const std::size_t n = 1000;
  Matrix X(n, 2);
  Rng rng(8);
  for (std::size_t i = 0; i < n; ++i) {
    X(i, 0) = uniform01(rng);
    X(i, 1) = uniform01(rng);
  }
  std::vector<double> y(n, 3.0);
  std::vector<EpochLog> logs;
  auto model = train_denoiser(X, y, small_config(1), [&](const EpochLog& e) { logs.push_back(e); });
  CHECK(model.degenerate_outcome);
  CHECK(model.y_sd == 1.0);
  CHECK(!logs.empty());
  CHECK(std::isfinite(logs.back().train_loss));

  const std::vector<double> x{0.4, 0.6};
  Rng srng(2);
  auto draws = sample(model, x, 200, srng);
  const double mean = std::accumulate(draws.begin(), draws.end(), 0.0) / draws.size();
  CHECK(std::abs(mean - 3.0) <= 0.1);
  for (double v : draws) CHECK(std::abs(v - 3.0) <= 0.5);
}

TEST_CASE("sampling is deterministic and row-independent") {
  const std::size_t n = 300;
  Matrix X(n, 1);
  std::vector<double> y(n);
  Rng rng(4);
  for (std::size_t i = 0; i < n; ++i) {
    X(i, 0) = uniform01(rng);
    y[i] = X(i, 0) + 0.1 * standard_normal(rng);
  }
  auto c = small_config(2);
  c.epochs = 20;
  auto model = train_denoiser(X, y, c);
  model.validate();

  const std::vector<double> x{0.5};
  Rng a(99), b(99);
  auto s1 = sample(model, x, 1, a);
  auto s2 = sample(model, x, 1, b);
  REQUIRE(s1.size() == 1);
  CHECK(s1 == s2);

  Matrix probe(3, 1);
  probe(0, 0) = 0.1;
  probe(1, 0) = 0.5;
  probe(2, 0) = 0.9;
  const std::vector<std::uint64_t> seeds{10, 20, 30};
  auto all = sample_many(model, probe, 5, seeds);
  Matrix middle(1, 1);
  middle(0, 0) = 0.5;
  const std::vector<std::uint64_t> seed_mid{20};
  auto one = sample_many(model, middle, 5, seed_mid);
  for (std::size_t m = 0; m < 5; ++m) CHECK(all(1, m) == one(0, m));

  CHECK_THROWS_AS(sample(model, x, 0, a), ConfigError);
}

TEST_CASE("training is reproducible under a fixed seed") {
  const std::size_t n = 200;
  Matrix X(n, 1);
  std::vector<double> y(n);
  Rng rng(6);
  for (std::size_t i = 0; i < n; ++i) {
    X(i, 0) = uniform01(rng);
    y[i] = 2 * X(i, 0) + 0.5 * standard_normal(rng);
  }
  auto c = small_config(3);
  c.epochs = 10;
  auto a = train_denoiser(X, y, c);
  auto b = train_denoiser(X, y, c);
  CHECK(a.denoiser.layers.back().weight == b.denoiser.layers.back().weight);
  CHECK(a.epochs_trained == b.epochs_trained);
}

TEST_CASE("training rejects mismatched inputs") {
  Matrix X(10, 1);
  std::vector<double> y(9, 0.0);
  CHECK_THROWS_AS(train_denoiser(X, y, small_config(1)), ShapeError);
}
