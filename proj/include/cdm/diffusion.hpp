#pragma once

// Conditional DDPM for a scalar outcome given a covariate vector.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "cdm/matrix.hpp"
#include "cdm/numerics.hpp"
#include "cdm/rng.hpp"

namespace cdm::diffusion {

/// Linear variance schedule. Arrays are indexed by step t - 1 for t = 1..T.
struct Schedule {
  int steps = 0;
  double beta_min = 0.0;
  double beta_max = 0.0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
};

Schedule make_schedule(int steps, double beta_min, double beta_max);

/// sqrt(alpha_bar_t) * y0 + sqrt(1 - alpha_bar_t) * eps for 1 <= t <= T.
double forward_noise(double y0, int t, double eps, const Schedule& schedule);

/// Closed form of forward_noise for a given alpha_bar.
double forward_noise_at(double y0, double alpha_bar, double eps);

/// Sinusoidal embedding [sin(t w_0..w_{h-1}), cos(t w_0..w_{h-1})] with
/// w_i = 10000^(-i/h), h = dim/2.
std::vector<double> timestep_embedding(int t, std::size_t dim);

struct TrainConfig {
  int steps = 400;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  std::vector<std::size_t> hidden{128, 128, 128};
  std::size_t embed_dim = 32;
  int epochs = 1000;
  std::size_t batch_size = 128;
  nn::AdamWConfig optimizer{};
  double lr_decay = 0.7;
  int lr_decay_every = 500;
  /// Held-out share of the rows used for early stopping; 0 disables it.
  double val_fraction = 0.15;
  int eval_every = 50;
  int patience = 5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
};

using EpochCallback = std::function<void(const EpochLog&)>;

struct DiffusionModel {
  Schedule schedule;
  nn::MlpParams denoiser;
  std::size_t covariate_dim = 0;
  std::size_t embed_dim = 0;
  double y_mean = 0.0;
  double y_sd = 1.0;
  /// Set when the training outcomes had zero variance and sd was forced to 1.
  bool degenerate_outcome = false;
  int epochs_trained = 0;

  void validate() const;
};

/// Fits the noise-prediction network on (X, y) rows of one treatment arm.
DiffusionModel train_denoiser(const Matrix& X, std::span<const double> y, const TrainConfig& config,
                              const EpochCallback& on_epoch = {});

/// M independent ancestral-sampling chains at covariate x, de-standardized.
/// Consumes one 64-bit value from `rng` to seed the chains.
std::vector<double> sample(const DiffusionModel& model, std::span<const double> x, std::size_t M, Rng& rng);

/// Row i holds the M draws at X.row(i) driven by Rng(seeds[i]). Rows do not
/// interact: the result for a row does not depend on which other rows share
/// the call.
Matrix sample_many(const DiffusionModel& model, const Matrix& X, std::size_t M,
                   std::span<const std::uint64_t> seeds);

}  // namespace cdm::diffusion
