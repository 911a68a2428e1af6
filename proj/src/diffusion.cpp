#include "cdm/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace cdm::diffusion {

namespace {

// Columns per forward pass when sampling many points at once.
constexpr std::size_t kSampleColumns = 1024;

struct EmbeddingTable {
  std::size_t dim = 0;
  std::vector<double> values;  // steps x dim

  EmbeddingTable(int steps, std::size_t d) : dim(d), values(static_cast<std::size_t>(steps) * d) {
    for (int t = 1; t <= steps; ++t) {
      auto e = timestep_embedding(t, d);
      std::copy(e.begin(), e.end(), values.begin() + static_cast<std::ptrdiff_t>((t - 1) * d));
    }
  }
  const double* at(int t) const { return values.data() + static_cast<std::size_t>(t - 1) * dim; }
};

// Writes the denoiser input for column b: [x, y_t, embed(t)].
void fill_column(nn::FeatureBatch& batch, std::size_t b, std::span<const double> x, double y_t,
                 const double* embed, std::size_t embed_dim) {
  std::size_t k = 0;
  for (double v : x) batch.at(k++, b) = v;
  batch.at(k++, b) = y_t;
  for (std::size_t e = 0; e < embed_dim; ++e) batch.at(k++, b) = embed[e];
}

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Fixed noising draws for validation rows so successive evaluations are
// comparable.
struct ValidationSet {
  std::vector<std::size_t> rows;
  std::vector<int> t;
  std::vector<double> eps;
};

double evaluate_mse(const DiffusionModel& model, const Matrix& X, std::span<const double> ystd,
                    const ValidationSet& val, const EmbeddingTable& emb, nn::MlpWorkspace& ws) {
  const std::size_t n = val.rows.size();
  const std::size_t in_dim = model.denoiser.in_dim();
  double sse = 0.0;
  for (std::size_t start = 0; start < n; start += kSampleColumns) {
    const std::size_t cnt = std::min(kSampleColumns, n - start);
    nn::FeatureBatch in(in_dim, cnt);
    for (std::size_t b = 0; b < cnt; ++b) {
      const std::size_t i = start + b;
      const std::size_t r = val.rows[i];
      const double yt = forward_noise(ystd[r], val.t[i], val.eps[i], model.schedule);
      fill_column(in, b, X.row(r), yt, emb.at(val.t[i]), emb.dim);
    }
    const auto& out = ws.forward(model.denoiser, in);
    for (std::size_t b = 0; b < cnt; ++b) {
      const double e = out.at(0, b) - val.eps[start + b];
      sse += e * e;
    }
  }
  return sse / static_cast<double>(n);
}

}  // namespace

Schedule make_schedule(int steps, double beta_min, double beta_max) {
  if (steps < 2) throw ConfigError("diffusion schedule needs at least 2 steps");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
    throw ConfigError("diffusion schedule requires 0 < beta_min <= beta_max < 1");
  }
  Schedule s;
  s.steps = steps;
  s.beta_min = beta_min;
  s.beta_max = beta_max;
  s.beta.resize(static_cast<std::size_t>(steps));
  s.alpha.resize(s.beta.size());
  s.alpha_bar.resize(s.beta.size());
  double prod = 1.0;
  for (int t = 1; t <= steps; ++t) {
    const auto i = static_cast<std::size_t>(t - 1);
    s.beta[i] = beta_min + (beta_max - beta_min) * static_cast<double>(t - 1) / static_cast<double>(steps - 1);
    s.alpha[i] = 1.0 - s.beta[i];
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
  }
  return s;
}

double forward_noise_at(double y0, double alpha_bar, double eps) {
  return std::sqrt(alpha_bar) * y0 + std::sqrt(1.0 - alpha_bar) * eps;
}

double forward_noise(double y0, int t, double eps, const Schedule& schedule) {
  if (t < 1 || t > schedule.steps) {
    throw ConfigError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(schedule.steps) + "]");
  }
  return forward_noise_at(y0, schedule.alpha_bar[static_cast<std::size_t>(t - 1)], eps);
}

std::vector<double> timestep_embedding(int t, std::size_t dim) {
  std::vector<double> e(dim, 0.0);
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    e[i] = std::sin(static_cast<double>(t) * freq);
    e[half + i] = std::cos(static_cast<double>(t) * freq);
  }
  return e;
}

void TrainConfig::validate() const {
  make_schedule(steps, beta_min, beta_max);
  if (embed_dim < 2 || embed_dim % 2 != 0) throw ConfigError("embed_dim must be a positive even number");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in [0, 1)");
  if (eval_every < 1 || patience < 1) throw ConfigError("eval_every and patience must be >= 1");
  if (lr_decay_every < 1 || !(lr_decay > 0.0)) throw ConfigError("invalid learning-rate decay");
  for (auto h : hidden) {
    if (h == 0) throw ConfigError("hidden widths must be positive");
  }
}

void DiffusionModel::validate() const {
  denoiser.validate();
  if (denoiser.in_dim() != covariate_dim + 1 + embed_dim) {
    throw ShapeError("denoiser input dimension must equal covariate_dim + 1 + embed_dim");
  }
  if (denoiser.out_dim() != 1) throw ShapeError("denoiser must have a scalar output");
  if (!(y_sd > 0.0)) throw ConfigError("outcome sd must be positive");
  if (schedule.steps < 2 || schedule.alpha_bar.size() != static_cast<std::size_t>(schedule.steps)) {
    throw ConfigError("diffusion schedule is malformed");
  }
}

DiffusionModel train_denoiser(const Matrix& X, std::span<const double> y, const TrainConfig& config,
                              const EpochCallback& on_epoch) {
  config.validate();
  const std::size_t n = X.rows();
  if (y.size() != n) throw ShapeError("train_denoiser: X and y row counts differ");
  if (n < 2) throw ConfigError("train_denoiser needs at least 2 samples");

  DiffusionModel model;
  model.schedule = make_schedule(config.steps, config.beta_min, config.beta_max);
  model.covariate_dim = X.cols();
  model.embed_dim = config.embed_dim;
  model.y_mean = mean_of(y);
  double ss = 0.0;
  for (double v : y) ss += (v - model.y_mean) * (v - model.y_mean);
  model.y_sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (!(model.y_sd > 1e-12 * std::max(1.0, std::abs(model.y_mean)))) {
    model.y_sd = 1.0;
    model.degenerate_outcome = true;
  }
  std::vector<double> ystd(n);
  for (std::size_t i = 0; i < n; ++i) ystd[i] = (y[i] - model.y_mean) / model.y_sd;

  const std::size_t in_dim = model.covariate_dim + 1 + model.embed_dim;
  model.denoiser = nn::init_mlp(in_dim, config.hidden, 1, derive_seed(config.seed, "init"));

  // Early-stopping split.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_seed(config.seed, "split"));
  std::shuffle(order.begin(), order.end(), split_rng);
  auto n_val = static_cast<std::size_t>(std::llround(config.val_fraction * static_cast<double>(n)));
  if (n_val >= n) n_val = n - 1;
  ValidationSet val;
  val.rows.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> fit_rows(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(fit_rows.begin(), fit_rows.end());
  {
    Rng val_rng(derive_seed(config.seed, "validation-noise"));
    std::uniform_int_distribution<int> step(1, config.steps);
    for (std::size_t i = 0; i < val.rows.size(); ++i) {
      val.t.push_back(step(val_rng));
      val.eps.push_back(standard_normal(val_rng));
    }
  }

  const EmbeddingTable emb(config.steps, config.embed_dim);
  Rng rng(derive_seed(config.seed, "train"));
  std::uniform_int_distribution<int> step(1, config.steps);
  nn::AdamWConfig opt = config.optimizer;
  auto state = nn::AdamWState::init(model.denoiser, opt);
  nn::MlpWorkspace ws;
  nn::MlpParams grad = model.denoiser.zeros_like();
  nn::FeatureBatch in, upstream;
  std::vector<double> eps(config.batch_size);

  nn::MlpParams best = model.denoiser;
  double best_val = std::numeric_limits<double>::infinity();
  int bad_evals = 0;
  int best_epoch = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    state.config.lr = nn::lr_at_epoch(epoch, opt.lr, config.lr_decay, config.lr_decay_every);
    std::shuffle(fit_rows.begin(), fit_rows.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < fit_rows.size(); start += config.batch_size) {
      const std::size_t cnt = std::min(config.batch_size, fit_rows.size() - start);
      in.resize(in_dim, cnt);
      for (std::size_t b = 0; b < cnt; ++b) {
        const std::size_t r = fit_rows[start + b];
        const int t = step(rng);
        eps[b] = standard_normal(rng);
        fill_column(in, b, X.row(r), forward_noise(ystd[r], t, eps[b], model.schedule), emb.at(t), emb.dim);
      }
      const auto& out = ws.forward(model.denoiser, in);
      upstream.resize(1, cnt);
      double batch_loss = 0.0;
      for (std::size_t b = 0; b < cnt; ++b) {
        const double e = out.at(0, b) - eps[b];
        batch_loss += e * e;
        upstream.at(0, b) = 2.0 * e / static_cast<double>(cnt);
      }
      loss_sum += batch_loss;
      for (auto& l : grad.layers) {
        std::fill(l.weight.begin(), l.weight.end(), 0.0);
        std::fill(l.bias.begin(), l.bias.end(), 0.0);
      }
      ws.backward(model.denoiser, upstream, grad);
      nn::adamw_step(model.denoiser, grad, state);
    }
    model.epochs_trained = epoch + 1;

    EpochLog log{epoch, state.config.lr, loss_sum / static_cast<double>(fit_rows.size()), std::nullopt};
    bool stop = false;
    if (!val.rows.empty() && (epoch + 1) % config.eval_every == 0) {
      const double v = evaluate_mse(model, X, ystd, val, emb, ws);
      log.val_loss = v;
      if (v < best_val) {
        best_val = v;
        best = model.denoiser;
        best_epoch = epoch + 1;
        bad_evals = 0;
      } else if (++bad_evals >= config.patience) {
        stop = true;
      }
    }
    if (on_epoch) on_epoch(log);
    if (stop) break;
  }

  if (!val.rows.empty()) {
    // Compare the final weights against the best checkpoint as well.
    const double v = evaluate_mse(model, X, ystd, val, emb, ws);
    if (v < best_val || best_epoch == 0) {
      best = model.denoiser;
    }
    model.denoiser = std::move(best);
  }
  model.validate();
  return model;
}

Matrix sample_many(const DiffusionModel& model, const Matrix& X, std::size_t M,
                   std::span<const std::uint64_t> seeds) {
  if (M < 1) throw ConfigError("sample count M must be >= 1");
  if (X.rows() != seeds.size()) throw ShapeError("sample_many: one seed per row required");
  if (X.rows() > 0 && X.cols() != model.covariate_dim) {
    throw ShapeError("sample: covariate dimension " + std::to_string(X.cols()) + ", model expects " +
                     std::to_string(model.covariate_dim));
  }
  const auto& sch = model.schedule;
  const EmbeddingTable emb(sch.steps, model.embed_dim);
  const std::size_t in_dim = model.denoiser.in_dim();
  const std::size_t points_per_chunk = std::max<std::size_t>(1, kSampleColumns / M);

  Matrix result(X.rows(), M);
  nn::MlpWorkspace ws;
  nn::FeatureBatch in;
  std::vector<Rng> rngs;
  std::vector<double> y;

  for (std::size_t p0 = 0; p0 < X.rows(); p0 += points_per_chunk) {
    const std::size_t np = std::min(points_per_chunk, X.rows() - p0);
    const std::size_t cols = np * M;
    rngs.clear();
    for (std::size_t p = 0; p < np; ++p) rngs.emplace_back(seeds[p0 + p]);
    y.assign(cols, 0.0);
    for (std::size_t p = 0; p < np; ++p) {
      for (std::size_t m = 0; m < M; ++m) y[p * M + m] = standard_normal(rngs[p]);
    }
    in.resize(in_dim, cols);
    for (int t = sch.steps; t >= 1; --t) {
      const auto ti = static_cast<std::size_t>(t - 1);
      for (std::size_t p = 0; p < np; ++p) {
        for (std::size_t m = 0; m < M; ++m) fill_column(in, p * M + m, X.row(p0 + p), y[p * M + m], emb.at(t), emb.dim);
      }
      const auto& eps_hat = ws.forward(model.denoiser, in);
      const double coef = sch.beta[ti] / std::sqrt(1.0 - sch.alpha_bar[ti]);
      const double inv_sqrt_alpha = 1.0 / std::sqrt(sch.alpha[ti]);
      const double sigma = std::sqrt(sch.beta[ti]);
      for (std::size_t p = 0; p < np; ++p) {
        for (std::size_t m = 0; m < M; ++m) {
          const std::size_t c = p * M + m;
          double next = inv_sqrt_alpha * (y[c] - coef * eps_hat.at(0, c));
          if (t > 1) next += sigma * standard_normal(rngs[p]);
          y[c] = next;
        }
      }
    }
    for (std::size_t p = 0; p < np; ++p) {
      for (std::size_t m = 0; m < M; ++m) result(p0 + p, m) = model.y_mean + model.y_sd * y[p * M + m];
    }
  }
  return result;
}

std::vector<double> sample(const DiffusionModel& model, std::span<const double> x, std::size_t M, Rng& rng) {
  if (x.size() != model.covariate_dim) {
    throw ShapeError("sample: covariate dimension " + std::to_string(x.size()) + ", model expects " +
                     std::to_string(model.covariate_dim));
  }
  Matrix X(1, x.size(), std::vector<double>(x.begin(), x.end()));
  const std::uint64_t seed = rng();
  const std::uint64_t seeds[1] = {seed};
  auto out = sample_many(model, X, M, seeds);
  return {out.row(0).begin(), out.row(0).end()};
}

}  // namespace cdm::diffusion
