#include "cdm/propensity.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <type_traits>

#include "cdm/rng.hpp"

namespace cdm::propensity {

namespace {

constexpr double kMinHessian = 1e-12;

struct SplitCandidate {
  int feature = -1;
  double threshold = 0.0;
  double gain = 0.0;
};

class TreeBuilder {
 public:
  TreeBuilder(const Matrix& X, std::span<const double> residual, std::span<const double> hessian,
              const GbmConfig& config)
      : X_(X), r_(residual), h_(hessian), config_(config) {}

  /// `presorted[f]` lists all rows ordered by feature f; rows with
  /// include[i] == 0 are skipped.
  RegressionTree build(const std::vector<std::vector<std::size_t>>& presorted, const std::vector<char>& include) {
    std::vector<std::vector<std::size_t>> sorted(presorted.size());
    for (std::size_t f = 0; f < presorted.size(); ++f) {
      for (auto i : presorted[f]) {
        if (include[i]) sorted[f].push_back(i);
      }
    }
    in_left_.assign(X_.rows(), 0);
    RegressionTree tree;
    grow(tree, std::move(sorted), 0);
    return tree;
  }

 private:
  double leaf_value(const std::vector<std::size_t>& rows) const {
    double num = 0.0, den = 0.0;
    for (auto i : rows) {
      num += r_[i];
      den += h_.empty() ? 1.0 : h_[i];
    }
    return num / std::max(den, kMinHessian);
  }

  SplitCandidate best_split(const std::vector<std::vector<std::size_t>>& sorted) const {
    SplitCandidate best;
    const auto& any = sorted.front();
    const std::size_t n = any.size();
    double total = 0.0;
    for (auto i : any) total += r_[i];
    const double parent = total * total / static_cast<double>(n);
    for (std::size_t f = 0; f < sorted.size(); ++f) {
      const auto& order = sorted[f];
      double left = 0.0;
      for (std::size_t pos = 0; pos + 1 < n; ++pos) {
        left += r_[order[pos]];
        const std::size_t nl = pos + 1;
        const std::size_t nr = n - nl;
        if (nl < config_.min_leaf) continue;
        if (nr < config_.min_leaf) break;
        const double a = X_(order[pos], f);
        const double b = X_(order[pos + 1], f);
        if (!(a < b)) continue;
        const double right = total - left;
        const double gain = left * left / static_cast<double>(nl) + right * right / static_cast<double>(nr) - parent;
        if (gain > best.gain) {
          double thr = a + 0.5 * (b - a);
          if (!(thr < b)) thr = a;
          best = {static_cast<int>(f), thr, gain};
        }
      }
    }
    return best;
  }

  int grow(RegressionTree& tree, std::vector<std::vector<std::size_t>> sorted, int depth) {
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    const std::size_t n = sorted.front().size();
    SplitCandidate split;
    if (depth < config_.max_depth && n >= 2 * config_.min_leaf) split = best_split(sorted);
    if (split.feature < 0) {
      tree.nodes[id].value = leaf_value(sorted.front());
      return id;
    }
    const auto f = static_cast<std::size_t>(split.feature);
    for (auto i : sorted.front()) in_left_[i] = X_(i, f) <= split.threshold ? 1 : 0;
    std::vector<std::vector<std::size_t>> left(sorted.size()), right(sorted.size());
    for (std::size_t g = 0; g < sorted.size(); ++g) {
      for (auto i : sorted[g]) (in_left_[i] ? left[g] : right[g]).push_back(i);
    }
    sorted.clear();
    sorted.shrink_to_fit();
    tree.nodes[id].feature = split.feature;
    tree.nodes[id].threshold = split.threshold;
    const int l = grow(tree, std::move(left), depth + 1);
    tree.nodes[id].left = l;
    const int r = grow(tree, std::move(right), depth + 1);
    tree.nodes[id].right = r;
    return id;
  }

  const Matrix& X_;
  std::span<const double> r_;
  std::span<const double> h_;
  const GbmConfig& config_;
  std::vector<char> in_left_;
};

double mean_deviance(std::span<const int> t, std::span<const double> score) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    // log(1 + exp(-z)) for t=1, log(1 + exp(z)) for t=0, computed stably.
    const double z = t[i] == 1 ? score[i] : -score[i];
    s += z > 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
  }
  return 2.0 * s / static_cast<double>(t.size());
}

double mse(std::span<const double> y, std::span<const double> score) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - score[i]) * (y[i] - score[i]);
  return s / static_cast<double>(y.size());
}

template <typename Response>
BoostedTreesModel boost(const Matrix& X, std::span<const Response> y, Loss loss, const GbmConfig& config) {
  config.validate();
  const std::size_t n = X.rows();
  if (y.size() != n) throw ShapeError("gbm: X and response row counts differ");
  if (n < 2 * config.min_leaf || n < 2) throw ConfigError("gbm: need at least 2 * min_leaf rows");

  BoostedTreesModel model;
  model.loss = loss;
  model.shrinkage = config.shrinkage;
  model.clip_lo = config.clip_lo;
  model.clip_hi = config.clip_hi;
  model.n_features = X.cols();
  model.max_depth = config.max_depth;

  const double ybar = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  model.init = loss == Loss::logistic ? logit(ybar) : ybar;

  std::vector<double> score(n, model.init), residual(n), hessian;
  if (loss == Loss::logistic) hessian.resize(n);
  auto current_loss = [&]() {
    if constexpr (std::is_same_v<Response, int>) {
      return mean_deviance(y, score);
    } else {
      return mse(y, score);
    }
  };
  model.train_loss.push_back(current_loss());

  Rng rng(config.seed);
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  // Row orders per feature, ties by row index.
  std::vector<std::vector<std::size_t>> presorted(X.cols(), all);
  for (std::size_t f = 0; f < X.cols(); ++f) {
    std::stable_sort(presorted[f].begin(), presorted[f].end(),
                     [&](std::size_t a, std::size_t b) { return X(a, f) < X(b, f); });
  }
  std::vector<char> include(n, 1);
  const auto n_sub = std::max<std::size_t>(
      2 * config.min_leaf, static_cast<std::size_t>(std::llround(config.subsample * static_cast<double>(n))));

  for (int round = 0; round < config.n_trees; ++round) {
    for (std::size_t i = 0; i < n; ++i) {
      if (loss == Loss::logistic) {
        const double p = sigmoid(score[i]);
        residual[i] = static_cast<double>(y[i]) - p;
        hessian[i] = p * (1.0 - p);
      } else {
        residual[i] = static_cast<double>(y[i]) - score[i];
      }
    }
    if (n_sub < n) {
      std::vector<std::size_t> rows = all;
      std::shuffle(rows.begin(), rows.end(), rng);
      std::fill(include.begin(), include.end(), 0);
      for (std::size_t k = 0; k < n_sub; ++k) include[rows[k]] = 1;
    }
    TreeBuilder builder(X, residual, hessian, config);
    model.trees.push_back(builder.build(presorted, include));
    const auto& tree = model.trees.back();
    for (std::size_t i = 0; i < n; ++i) score[i] += config.shrinkage * tree.predict(X.row(i));
    model.train_loss.push_back(current_loss());
  }
  model.validate();
  return model;
}

}  // namespace

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double logit(double p) { return std::log(p / (1.0 - p)); }

double RegressionTree::predict(std::span<const double> x) const {
  int id = 0;
  while (!nodes[static_cast<std::size_t>(id)].is_leaf()) {
    const auto& node = nodes[static_cast<std::size_t>(id)];
    id = x[static_cast<std::size_t>(node.feature)] <= node.threshold ? node.left : node.right;
  }
  return nodes[static_cast<std::size_t>(id)].value;
}

int RegressionTree::depth() const {
  std::function<int(int)> rec = [&](int id) -> int {
    const auto& node = nodes[static_cast<std::size_t>(id)];
    if (node.is_leaf()) return 0;
    return 1 + std::max(rec(node.left), rec(node.right));
  };
  return nodes.empty() ? 0 : rec(0);
}

void GbmConfig::validate() const {
  if (n_trees < 0) throw ConfigError("gbm: n_trees must be >= 0");
  if (max_depth < 1) throw ConfigError("gbm: max_depth must be >= 1");
  if (!(shrinkage > 0.0)) throw ConfigError("gbm: shrinkage must be positive");
  if (min_leaf < 1) throw ConfigError("gbm: min_leaf must be >= 1");
  if (!(subsample > 0.0 && subsample <= 1.0)) throw ConfigError("gbm: subsample must lie in (0, 1]");
  if (!(clip_lo > 0.0 && clip_lo < clip_hi && clip_hi < 1.0)) {
    throw ConfigError("gbm: clip bounds must satisfy 0 < lo < hi < 1");
  }
}

void BoostedTreesModel::validate() const {
  if (!(clip_lo > 0.0 && clip_lo < clip_hi && clip_hi < 1.0)) {
    throw ConfigError("gbm: clip bounds must satisfy 0 < lo < hi < 1");
  }
  if (!std::isfinite(init)) throw NumericError("gbm: non-finite initial score");
  for (const auto& tree : trees) {
    if (tree.nodes.empty()) throw FormatError("gbm: empty tree");
    if (tree.depth() > max_depth) throw FormatError("gbm: tree deeper than max_depth");
    for (const auto& node : tree.nodes) {
      if (node.is_leaf()) {
        if (!std::isfinite(node.value)) throw NumericError("gbm: non-finite leaf value");
      } else {
        const auto nn = static_cast<int>(tree.nodes.size());
        if (node.feature >= static_cast<int>(n_features) || node.left <= 0 || node.right <= 0 ||
            node.left >= nn || node.right >= nn) {
          throw FormatError("gbm: malformed tree node");
        }
      }
    }
  }
}

double BoostedTreesModel::raw_score(std::span<const double> x) const {
  if (x.size() != n_features) {
    throw ShapeError("gbm: input has " + std::to_string(x.size()) + " features, model expects " +
                     std::to_string(n_features));
  }
  double s = 0.0;
  for (const auto& tree : trees) s += tree.predict(x);
  return init + shrinkage * s;
}

BoostedTreesModel fit_gbm(const Matrix& X, std::span<const int> t, const GbmConfig& config) {
  std::size_t treated = 0;
  for (int v : t) {
    if (v != 0 && v != 1) throw ConfigError("gbm: treatment must be binary");
    treated += static_cast<std::size_t>(v);
  }
  if (treated == 0 || treated == t.size()) {
    throw ConfigError("gbm: only one treatment class present; use a constant propensity model");
  }
  return boost<int>(X, t, Loss::logistic, config);
}

BoostedTreesModel fit_gbm_regression(const Matrix& X, std::span<const double> y, const GbmConfig& config) {
  return boost<double>(X, y, Loss::squared, config);
}

double predict_propensity(const BoostedTreesModel& model, std::span<const double> x) {
  if (model.loss != Loss::logistic) throw ConfigError("gbm: model was not fitted on logistic loss");
  return std::clamp(sigmoid(model.raw_score(x)), model.clip_lo, model.clip_hi);
}

double predict_value(const BoostedTreesModel& model, std::span<const double> x) {
  if (model.loss != Loss::squared) throw ConfigError("gbm: model was not fitted on squared loss");
  return model.raw_score(x);
}

NonConvergenceError::NonConvergenceError(int iters, double norm)
    : NumericError("logistic regression did not converge after " + std::to_string(iters) +
                   " iterations (gradient norm " + std::to_string(norm) + ")"),
      iterations(iters),
      grad_norm(norm) {}

LogisticModel fit_logistic(const Matrix& X, std::span<const int> t, const LogisticConfig& config) {
  const std::size_t n = X.rows();
  const std::size_t d = X.cols();
  if (t.size() != n) throw ShapeError("logistic: X and t row counts differ");
  if (n < 2) throw ConfigError("logistic: need at least 2 rows");
  if (config.max_iter < 1 || !(config.tol > 0.0)) throw ConfigError("logistic: invalid max_iter/tol");
  for (int v : t) {
    if (v != 0 && v != 1) throw ConfigError("logistic: treatment must be binary");
  }

  LogisticModel model;
  model.clip_lo = config.clip_lo;
  model.clip_hi = config.clip_hi;
  model.coef.assign(d, 0.0);

  std::vector<std::size_t> active;
  for (std::size_t j = 0; j < d; ++j) {
    const double first = X(0, j);
    bool constant = true;
    for (std::size_t i = 1; i < n && constant; ++i) constant = X(i, j) == first;
    if (constant) {
      model.dropped_features.push_back(j);
    } else {
      active.push_back(j);
    }
  }

  const auto p = static_cast<Eigen::Index>(active.size() + 1);
  Eigen::MatrixXd A(static_cast<Eigen::Index>(n), p);
  Eigen::VectorXd y(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    A(ii, 0) = 1.0;
    for (std::size_t c = 0; c < active.size(); ++c) A(ii, static_cast<Eigen::Index>(c + 1)) = X(i, active[c]);
    y(ii) = t[i];
  }

  auto nll = [&](const Eigen::VectorXd& beta) {
    const Eigen::VectorXd z = A * beta;
    double s = 0.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      const double zi = y(i) > 0.5 ? z(i) : -z(i);
      s += zi > 0 ? std::log1p(std::exp(-zi)) : -zi + std::log1p(std::exp(zi));
    }
    return s / static_cast<double>(n);
  };

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  double f = nll(beta);
  double gnorm = 0.0;
  for (int iter = 1; iter <= config.max_iter; ++iter) {
    const Eigen::VectorXd z = A * beta;
    Eigen::VectorXd mu(z.size()), w(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      mu(i) = sigmoid(z(i));
      w(i) = std::max(mu(i) * (1.0 - mu(i)), kMinHessian);
    }
    const Eigen::VectorXd grad = A.transpose() * (mu - y) / static_cast<double>(n);
    gnorm = grad.norm();
    if (gnorm < config.tol) {
      model.iterations = iter - 1;
      model.intercept = beta(0);
      for (std::size_t c = 0; c < active.size(); ++c) model.coef[active[c]] = beta(static_cast<Eigen::Index>(c + 1));
      return model;
    }
    const Eigen::MatrixXd H = A.transpose() * w.asDiagonal() * A / static_cast<double>(n);
    const Eigen::VectorXd step = H.ldlt().solve(grad);
    double scale = 1.0;
    Eigen::VectorXd next = beta - step;
    double fn = nll(next);
    while (!(fn <= f) && scale > 1e-10) {
      scale *= 0.5;
      next = beta - scale * step;
      fn = nll(next);
    }
    if (!(fn <= f)) break;
    beta = next;
    f = fn;
  }
  throw NonConvergenceError(config.max_iter, gnorm);
}

double predict_propensity(const LogisticModel& model, std::span<const double> x) {
  if (x.size() != model.coef.size()) throw ShapeError("logistic: input dimension mismatch");
  double z = model.intercept;
  for (std::size_t j = 0; j < x.size(); ++j) z += model.coef[j] * x[j];
  return std::clamp(sigmoid(z), model.clip_lo, model.clip_hi);
}

double predict_propensity(const PropensityModel& model, std::span<const double> x) {
  return std::visit(
      [&](const auto& m) -> double {
        if constexpr (std::is_same_v<std::decay_t<decltype(m)>, ConstantPropensity>) {
          return m.value;
        } else {
          return predict_propensity(m, x);
        }
      },
      model);
}

}  // namespace cdm::propensity
