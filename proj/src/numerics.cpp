#include "cdm/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "cdm/rng.hpp"

namespace cdm::nn {

namespace {

constexpr std::size_t kRowBlock = 4;
constexpr std::size_t kLanes = FeatureBatch::kLanes;

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

void check_same_shape(const MlpParams& a, const MlpParams& b, const char* what) {
  if (a.layers.size() != b.layers.size()) {
    throw ShapeError(std::string(what) + ": layer count mismatch");
  }
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    if (a.layers[l].in_dim != b.layers[l].in_dim || a.layers[l].out_dim != b.layers[l].out_dim) {
      throw ShapeError(std::string(what) + ": layer " + std::to_string(l) + " shape mismatch");
    }
  }
}

#if defined(__GNUC__) || defined(__clang__)
typedef double lane_vec __attribute__((vector_size(kLanes * sizeof(double))));
#else
struct lane_vec {
  double v[kLanes] = {};
  lane_vec& operator+=(const lane_vec& o) {
    for (std::size_t j = 0; j < kLanes; ++j) v[j] += o.v[j];
    return *this;
  }
  friend lane_vec operator*(double a, const lane_vec& x) {
    lane_vec r;
    for (std::size_t j = 0; j < kLanes; ++j) r.v[j] = a * x.v[j];
    return r;
  }
  friend lane_vec operator*(const lane_vec& a, const lane_vec& b) {
    lane_vec r;
    for (std::size_t j = 0; j < kLanes; ++j) r.v[j] = a.v[j] * b.v[j];
    return r;
  }
  friend lane_vec operator+(const lane_vec& x, double a) {
    lane_vec r;
    for (std::size_t j = 0; j < kLanes; ++j) r.v[j] = x.v[j] + a;
    return r;
  }
};
#endif

inline lane_vec load(const double* p) {
  lane_vec v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

inline void store(double* p, const lane_vec& v) { std::memcpy(p, &v, sizeof(v)); }

inline double hsum(const lane_vec& v) {
  double a[kLanes];
  std::memcpy(a, &v, sizeof(a));
  double s = 0.0;
  for (double x : a) s += x;
  return s;
}

inline lane_vec relu(lane_vec v) {
  double a[kLanes];
  std::memcpy(a, &v, sizeof(a));
  for (double& x : a) x = x > 0.0 ? x : 0.0;
  std::memcpy(&v, a, sizeof(a));
  return v;
}

// out(i, :) = act(bias_i + sum_k W(i, k) * in(k, :)), accumulated in
// ascending k for every column.
template <std::size_t Rows>
void affine_rows(const Layer& layer, std::size_t i0, const FeatureBatch& in, FeatureBatch& out) {
  const std::size_t stride = in.stride();
  const double* w = layer.weight.data();
  for (std::size_t b0 = 0; b0 < stride; b0 += kLanes) {
    lane_vec acc[Rows] = {};
    for (std::size_t k = 0; k < layer.in_dim; ++k) {
      const lane_vec x = load(in.feature(k) + b0);
      for (std::size_t r = 0; r < Rows; ++r) acc[r] += w[(i0 + r) * layer.in_dim + k] * x;
    }
    for (std::size_t r = 0; r < Rows; ++r) {
      lane_vec v = acc[r] + layer.bias[i0 + r];
      if (layer.activation == Activation::relu) v = relu(v);
      store(out.feature(i0 + r) + b0, v);
    }
  }
}

// prev(k, :) = sum_i W(i, k) * delta(i, :).
template <std::size_t Rows>
void transpose_rows(const Layer& layer, std::size_t k0, const FeatureBatch& delta, FeatureBatch& prev) {
  const std::size_t stride = delta.stride();
  const double* w = layer.weight.data();
  for (std::size_t b0 = 0; b0 < stride; b0 += kLanes) {
    lane_vec acc[Rows] = {};
    for (std::size_t i = 0; i < layer.out_dim; ++i) {
      const lane_vec d = load(delta.feature(i) + b0);
      for (std::size_t r = 0; r < Rows; ++r) acc[r] += w[i * layer.in_dim + k0 + r] * d;
    }
    for (std::size_t r = 0; r < Rows; ++r) store(prev.feature(k0 + r) + b0, acc[r]);
  }
}

// grad(i, k) += sum_b delta(i, b) * in(k, b) for a block of Rows x Cols.
template <std::size_t Rows, std::size_t Cols>
void outer_block(std::size_t i0, std::size_t k0, const FeatureBatch& delta, const FeatureBatch& in,
                 Layer& grad) {
  lane_vec acc[Rows][Cols] = {};
  for (std::size_t b0 = 0; b0 < in.stride(); b0 += kLanes) {
    lane_vec x[Cols];
    for (std::size_t c = 0; c < Cols; ++c) x[c] = load(in.feature(k0 + c) + b0);
    for (std::size_t r = 0; r < Rows; ++r) {
      const lane_vec d = load(delta.feature(i0 + r) + b0);
      for (std::size_t c = 0; c < Cols; ++c) acc[r][c] += d * x[c];
    }
  }
  for (std::size_t r = 0; r < Rows; ++r) {
    for (std::size_t c = 0; c < Cols; ++c) grad.weight[(i0 + r) * grad.in_dim + k0 + c] += hsum(acc[r][c]);
  }
}

template <std::size_t Rows>
void outer_rows(std::size_t i0, const FeatureBatch& delta, const FeatureBatch& in, Layer& grad) {
  std::size_t k = 0;
  for (; k + 2 <= grad.in_dim; k += 2) outer_block<Rows, 2>(i0, k, delta, in, grad);
  for (; k < grad.in_dim; ++k) outer_block<Rows, 1>(i0, k, delta, in, grad);
}

void affine(const Layer& layer, const FeatureBatch& in, FeatureBatch& out) {
  out.resize(layer.out_dim, in.count());
  std::size_t i = 0;
  for (; i + kRowBlock <= layer.out_dim; i += kRowBlock) affine_rows<kRowBlock>(layer, i, in, out);
  for (; i < layer.out_dim; ++i) affine_rows<1>(layer, i, in, out);
  // Padding columns must stay zero for the next layer's invariant.
  const std::size_t n = in.count();
  for (std::size_t r = 0; r < layer.out_dim; ++r) {
    double* y = out.feature(r);
    std::fill(y + n, y + out.stride(), 0.0);
  }
}

FeatureBatch single_column(std::span<const double> v) {
  FeatureBatch b(v.size(), 1);
  for (std::size_t k = 0; k < v.size(); ++k) b.at(k, 0) = v[k];
  return b;
}

}  // namespace

std::size_t MlpParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

void MlpParams::validate() const {
  if (layers.empty()) throw ShapeError("mlp has no layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    if (layer.in_dim == 0 || layer.out_dim == 0) throw ShapeError("mlp layer with zero dimension");
    if (layer.weight.size() != layer.in_dim * layer.out_dim || layer.bias.size() != layer.out_dim) {
      throw ShapeError("mlp layer " + std::to_string(l) + " buffer size mismatch");
    }
    if (l + 1 < layers.size() && layer.out_dim != layers[l + 1].in_dim) {
      throw ShapeError("mlp layer " + std::to_string(l) + " output does not chain into next layer");
    }
    if (!all_finite(layer.weight) || !all_finite(layer.bias)) {
      throw NumericError("mlp layer " + std::to_string(l) + " has non-finite parameters");
    }
  }
}

MlpParams MlpParams::zeros_like() const {
  MlpParams z;
  z.layers.reserve(layers.size());
  for (const auto& l : layers) {
    Layer c;
    c.in_dim = l.in_dim;
    c.out_dim = l.out_dim;
    c.activation = l.activation;
    c.weight.assign(l.weight.size(), 0.0);
    c.bias.assign(l.bias.size(), 0.0);
    z.layers.push_back(std::move(c));
  }
  return z;
}

MlpParams init_mlp(std::size_t in_dim, std::span<const std::size_t> hidden, std::size_t out_dim,
                   std::uint64_t seed) {
  if (in_dim == 0 || out_dim == 0) throw ConfigError("mlp dimensions must be positive");
  Rng rng(seed);
  MlpParams p;
  std::size_t prev = in_dim;
  auto add = [&](std::size_t out, Activation act) {
    if (out == 0) throw ConfigError("hidden width must be positive");
    Layer l;
    l.in_dim = prev;
    l.out_dim = out;
    l.activation = act;
    const double limit = std::sqrt(6.0 / static_cast<double>(prev + out));
    std::uniform_real_distribution<double> u(-limit, limit);
    l.weight.resize(prev * out);
    for (auto& w : l.weight) w = u(rng);
    l.bias.assign(out, 0.0);
    p.layers.push_back(std::move(l));
    prev = out;
  };
  for (auto h : hidden) add(h, Activation::relu);
  add(out_dim, Activation::identity);
  return p;
}

void FeatureBatch::resize(std::size_t features, std::size_t count) {
  features_ = features;
  count_ = count;
  stride_ = ((count + kLanes - 1) / kLanes) * kLanes;
  data_.assign(features_ * stride_, 0.0);
}

const FeatureBatch& MlpWorkspace::forward(const MlpParams& params, const FeatureBatch& input) {
  if (params.layers.empty()) throw ShapeError("mlp has no layers");
  if (input.features() != params.in_dim()) {
    throw ShapeError("mlp input has " + std::to_string(input.features()) + " features, expected " +
                     std::to_string(params.in_dim()));
  }
  input_ = &input;
  acts_.resize(params.layers.size());
  const FeatureBatch* cur = &input;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    affine(params.layers[l], *cur, acts_[l]);
    cur = &acts_[l];
  }
  return acts_.back();
}

void MlpWorkspace::backward(const MlpParams& params, const FeatureBatch& upstream, MlpParams& grad,
                            FeatureBatch* input_grad) {
  if (input_ == nullptr || acts_.size() != params.layers.size()) {
    throw Error("MlpWorkspace::backward called without a matching forward pass");
  }
  if (upstream.features() != params.out_dim() || upstream.count() != input_->count()) {
    throw ShapeError("upstream gradient shape does not match mlp output");
  }
  check_same_shape(params, grad, "mlp gradient");
  const std::size_t n = upstream.count();
  delta_ = upstream;
  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const Layer& layer = params.layers[li];
    Layer& g = grad.layers[li];
    const FeatureBatch& out = acts_[li];
    const FeatureBatch& in = li == 0 ? *input_ : acts_[li - 1];
    if (layer.activation == Activation::relu) {
      for (std::size_t i = 0; i < layer.out_dim; ++i) {
        double* d = delta_.feature(i);
        const double* y = out.feature(i);
        for (std::size_t b = 0; b < n; ++b) d[b] = y[b] > 0.0 ? d[b] : 0.0;
      }
    }

    for (std::size_t i = 0; i < layer.out_dim; ++i) {
      const double* d = delta_.feature(i);
      double bsum = 0.0;
      for (std::size_t b = 0; b < n; ++b) bsum += d[b];
      g.bias[i] += bsum;
    }
    {
      std::size_t i = 0;
      for (; i + kRowBlock <= layer.out_dim; i += kRowBlock) outer_rows<kRowBlock>(i, delta_, in, g);
      for (; i < layer.out_dim; ++i) outer_rows<1>(i, delta_, in, g);
    }

    if (li == 0 && input_grad == nullptr) break;
    delta_prev_.resize(layer.in_dim, n);
    {
      std::size_t k = 0;
      for (; k + kRowBlock <= layer.in_dim; k += kRowBlock) transpose_rows<kRowBlock>(layer, k, delta_, delta_prev_);
      for (; k < layer.in_dim; ++k) transpose_rows<1>(layer, k, delta_, delta_prev_);
    }
    std::swap(delta_, delta_prev_);
  }
  if (input_grad != nullptr) *input_grad = delta_;
}

std::vector<double> mlp_forward(const MlpParams& params, std::span<const double> input) {
  params.validate();
  if (input.size() != params.in_dim()) {
    throw ShapeError("mlp_forward: input length " + std::to_string(input.size()) + ", expected " +
                     std::to_string(params.in_dim()));
  }
  MlpWorkspace ws;
  const auto batch = single_column(input);
  const auto& out = ws.forward(params, batch);
  std::vector<double> y(out.features());
  for (std::size_t k = 0; k < y.size(); ++k) y[k] = out.at(k, 0);
  return y;
}

MlpGradient mlp_backward(const MlpParams& params, std::span<const double> input,
                         std::span<const double> upstream) {
  params.validate();
  if (input.size() != params.in_dim()) throw ShapeError("mlp_backward: input length mismatch");
  if (upstream.size() != params.out_dim()) throw ShapeError("mlp_backward: upstream length mismatch");
  MlpWorkspace ws;
  const auto batch = single_column(input);
  ws.forward(params, batch);
  MlpGradient g{params.zeros_like(), {}};
  FeatureBatch in_grad;
  ws.backward(params, single_column(upstream), g.params, &in_grad);
  g.input.resize(input.size());
  for (std::size_t k = 0; k < input.size(); ++k) g.input[k] = in_grad.at(k, 0);
  return g;
}

AdamWState AdamWState::init(const MlpParams& params, AdamWConfig config) {
  if (!(config.lr > 0.0)) throw ConfigError("AdamW learning rate must be positive");
  if (!(config.beta1 >= 0.0 && config.beta1 < 1.0 && config.beta2 >= 0.0 && config.beta2 < 1.0)) {
    throw ConfigError("AdamW betas must lie in [0, 1)");
  }
  if (!(config.eps > 0.0) || config.weight_decay < 0.0) throw ConfigError("invalid AdamW eps/weight_decay");
  return AdamWState{0, params.zeros_like(), params.zeros_like(), config};
}

void adamw_step(MlpParams& params, const MlpParams& grads, AdamWState& state) {
  check_same_shape(params, grads, "adamw gradient");
  check_same_shape(params, state.first_moment, "adamw first moment");
  check_same_shape(params, state.second_moment, "adamw second moment");
  const auto& hp = state.config;
  if (!(hp.lr > 0.0)) throw ConfigError("AdamW learning rate must be positive");
  for (const auto& l : grads.layers) {
    if (!all_finite(l.weight) || !all_finite(l.bias)) throw NumericError("non-finite gradient entry");
  }

  const std::int64_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));
  const double decay = 1.0 - hp.lr * hp.weight_decay;

  auto update = [&](std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m,
                    std::vector<double>& v) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
      v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] *= decay;
      p[i] -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
    }
  };
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& p = params.layers[l];
    const auto& g = grads.layers[l];
    auto& m = state.first_moment.layers[l];
    auto& v = state.second_moment.layers[l];
    update(p.weight, g.weight, m.weight, v.weight);
    update(p.bias, g.bias, m.bias, v.bias);
  }
  state.step = t;
}

AdamWResult adamw_step(const MlpParams& params, const MlpParams& grads, const AdamWState& state) {
  AdamWResult r{params, state};
  adamw_step(r.params, grads, r.state);
  return r;
}

double lr_at_epoch(std::int64_t epoch, double base_lr, double decay_factor, std::int64_t decay_every) {
  if (epoch < 0) throw ConfigError("epoch must be non-negative");
  if (decay_every < 1) throw ConfigError("decay_every must be >= 1");
  return base_lr * std::pow(decay_factor, static_cast<double>(epoch / decay_every));
}

}  // namespace cdm::nn
