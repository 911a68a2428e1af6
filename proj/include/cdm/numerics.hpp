#pragma once

// Dense multilayer perceptron, AdamW optimizer and learning-rate schedule.
// Everything is float64.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "cdm/error.hpp"

namespace cdm::nn {

enum class Activation { identity, relu };

struct Layer {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::vector<double> weight;  // out_dim x in_dim, row-major
  std::vector<double> bias;    // out_dim
  Activation activation = Activation::identity;

  double w(std::size_t out, std::size_t in) const { return weight[out * in_dim + in]; }
};

struct MlpParams {
  std::vector<Layer> layers;

  std::size_t in_dim() const { return layers.empty() ? 0 : layers.front().in_dim; }
  std::size_t out_dim() const { return layers.empty() ? 0 : layers.back().out_dim; }
  std::size_t parameter_count() const;

  /// Throws ShapeError if layer dimensions do not chain or buffers are
  /// mis-sized, NumericError on non-finite entries.
  void validate() const;

  /// Same shapes and activations, all entries zero.
  MlpParams zeros_like() const;
};

/// Glorot-uniform weights, zero biases. ReLU on hidden layers, identity on
/// the output layer.
MlpParams init_mlp(std::size_t in_dim, std::span<const std::size_t> hidden, std::size_t out_dim,
                   std::uint64_t seed);

std::vector<double> mlp_forward(const MlpParams& params, std::span<const double> input);

struct MlpGradient {
  MlpParams params;
  std::vector<double> input;
};

/// Reverse-mode gradient of <upstream, mlp_forward(params, input)>.
MlpGradient mlp_backward(const MlpParams& params, std::span<const double> input,
                         std::span<const double> upstream);

/// Feature-major batch: feature k of column b lives at data[k * stride + b].
/// stride is count rounded up to a multiple of kLanes and padding columns
/// are kept at zero, so every column goes through the same arithmetic no
/// matter how many columns the batch holds.
class FeatureBatch {
 public:
  static constexpr std::size_t kLanes = 8;

  FeatureBatch() = default;
  FeatureBatch(std::size_t features, std::size_t count) { resize(features, count); }

  void resize(std::size_t features, std::size_t count);

  std::size_t features() const { return features_; }
  std::size_t count() const { return count_; }
  std::size_t stride() const { return stride_; }

  double* feature(std::size_t k) { return data_.data() + k * stride_; }
  const double* feature(std::size_t k) const { return data_.data() + k * stride_; }
  double& at(std::size_t k, std::size_t b) { return data_[k * stride_ + b]; }
  double at(std::size_t k, std::size_t b) const { return data_[k * stride_ + b]; }

 private:
  std::size_t features_ = 0;
  std::size_t count_ = 0;
  std::size_t stride_ = 0;
  std::vector<double> data_;
};

/// Scratch buffers for batched forward/backward passes. Not thread-safe;
/// use one per thread.
class MlpWorkspace {
 public:
  /// Runs the network on every column of `input` and returns the output
  /// batch (valid until the next call).
  const FeatureBatch& forward(const MlpParams& params, const FeatureBatch& input);

  /// Accumulates d<upstream, output>/d(params) into `grad` for the batch
  /// most recently passed to forward(). Padding columns of `upstream` must
  /// be zero.
  void backward(const MlpParams& params, const FeatureBatch& upstream, MlpParams& grad,
                FeatureBatch* input_grad = nullptr);

 private:
  const FeatureBatch* input_ = nullptr;
  std::vector<FeatureBatch> acts_;
  FeatureBatch delta_, delta_prev_;
};

struct AdamWConfig {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

struct AdamWState {
  std::int64_t step = 0;
  MlpParams first_moment;
  MlpParams second_moment;
  AdamWConfig config;

  static AdamWState init(const MlpParams& params, AdamWConfig config);
};

/// In-place decoupled-weight-decay Adam update with bias-corrected moments.
/// Uses state.config.lr as the step size.
void adamw_step(MlpParams& params, const MlpParams& grads, AdamWState& state);

struct AdamWResult {
  MlpParams params;
  AdamWState state;
};

/// Value-returning form of adamw_step.
AdamWResult adamw_step(const MlpParams& params, const MlpParams& grads, const AdamWState& state);

/// base_lr * decay_factor^floor(epoch / decay_every).
double lr_at_epoch(std::int64_t epoch, double base_lr, double decay_factor, std::int64_t decay_every);

}  // namespace cdm::nn
