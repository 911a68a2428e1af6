#pragma once

// Propensity estimation: gradient-boosted regression trees on logistic loss,
// a Newton-fitted logistic regression fallback, and a constant model. The
// boosted trees also run in squared-loss mode as a plain regressor.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "cdm/error.hpp"
#include "cdm/matrix.hpp"

namespace cdm::propensity {

/// A node of an axis-aligned regression tree. Internal nodes send
/// x[feature] <= threshold to `left`.
struct TreeNode {
  int feature = -1;
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;

  bool is_leaf() const { return feature < 0; }
};

/// Nodes in pre-order; nodes[0] is the root.
struct RegressionTree {
  std::vector<TreeNode> nodes;

  double predict(std::span<const double> x) const;
  int depth() const;
};

enum class Loss { logistic, squared };

struct GbmConfig {
  int n_trees = 100;
  int max_depth = 3;
  double shrinkage = 0.1;
  std::size_t min_leaf = 10;
  /// Row fraction drawn without replacement for each tree.
  double subsample = 1.0;
  std::uint64_t seed = 0;
  double clip_lo = 0.05;
  double clip_hi = 0.95;

  void validate() const;
};

struct BoostedTreesModel {
  Loss loss = Loss::logistic;
  std::vector<RegressionTree> trees;
  double shrinkage = 0.1;
  /// Initial log-odds (logistic) or mean (squared).
  double init = 0.0;
  double clip_lo = 0.05;
  double clip_hi = 0.95;
  std::size_t n_features = 0;
  int max_depth = 3;
  /// Training loss after 0, 1, ..., n_trees rounds (mean deviance or MSE).
  std::vector<double> train_loss;

  double raw_score(std::span<const double> x) const;
  void validate() const;
};

/// Stagewise logistic boosting for binary t. Throws ConfigError when only one
/// class is present (use ConstantPropensity instead).
BoostedTreesModel fit_gbm(const Matrix& X, std::span<const int> t, const GbmConfig& config);

/// Squared-loss boosting for a real response.
BoostedTreesModel fit_gbm_regression(const Matrix& X, std::span<const double> y, const GbmConfig& config);

/// sigmoid(raw score) clipped to [clip_lo, clip_hi].
double predict_propensity(const BoostedTreesModel& model, std::span<const double> x);

/// Raw score of a squared-loss model.
double predict_value(const BoostedTreesModel& model, std::span<const double> x);

struct LogisticConfig {
  int max_iter = 100;
  double tol = 1e-8;
  double clip_lo = 0.05;
  double clip_hi = 0.95;
};

struct LogisticModel {
  std::vector<double> coef;
  double intercept = 0.0;
  /// Zero-variance columns whose coefficient was fixed at zero.
  std::vector<std::size_t> dropped_features;
  int iterations = 0;
  double clip_lo = 0.05;
  double clip_hi = 0.95;
};

class NonConvergenceError : public NumericError {
 public:
  NonConvergenceError(int iterations, double grad_norm);
  int iterations;
  double grad_norm;
};

LogisticModel fit_logistic(const Matrix& X, std::span<const int> t, const LogisticConfig& config = {});

double predict_propensity(const LogisticModel& model, std::span<const double> x);

struct ConstantPropensity {
  double value = 0.5;
};

using PropensityModel = std::variant<BoostedTreesModel, LogisticModel, ConstantPropensity>;

double predict_propensity(const PropensityModel& model, std::span<const double> x);

double sigmoid(double z);
double logit(double p);

}  // namespace cdm::propensity
