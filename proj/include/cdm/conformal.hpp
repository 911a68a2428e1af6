#pragma once

// Weighted split-conformal calibration with kernel localization and
// inverse-propensity balancing, and union-of-intervals prediction sets.

#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "cdm/error.hpp"
#include "cdm/matrix.hpp"
#include "cdm/rng.hpp"

namespace cdm::conformal {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Cumulative masses are compared against `level - kLevelTolerance`, so
/// rounding in normalized weights cannot push an exact tie (for instance
/// k/(n+1) == 1 - alpha under uniform weights) below the level.
inline constexpr double kLevelTolerance = 1e-12;

/// min_m |y - samples[m]|.
double nonconformity_score(double y, std::span<const double> samples);

/// Gaussian kernel bandwidth, or the no-localization sentinel.
class Bandwidth {
 public:
  static Bandwidth none() { return Bandwidth(kInf); }
  static Bandwidth fixed(double h);
  /// h = c * sqrt(d); c = +inf selects no localization.
  static Bandwidth from_factor(double c, std::size_t d);

  bool localized() const { return h_ < kInf; }
  double h() const { return h_; }

 private:
  explicit Bandwidth(double h) : h_(h) {}
  double h_;
};

/// Kernel values H(X_j, x_tilde) for every calibration row followed by the
/// test point, where x_tilde = x_test + h * noise. Values are scaled so the
/// largest is 1; the scale cancels on normalization. With no localization
/// every value is 1.
std::vector<double> local_weights_from_noise(const Matrix& cal_X, std::span<const double> x_test,
                                             std::span<const double> noise, Bandwidth h);

/// Draws the surrogate point from N(x_test, h^2 I) with `rng` (one standard
/// normal per coordinate) and returns local_weights_from_noise. Draws nothing
/// when h is the no-localization sentinel.
std::vector<double> local_weights(const Matrix& cal_X, std::span<const double> x_test, Bandwidth h, Rng& rng);

/// t / pi_hat + (1 - t) / (1 - pi_hat).
double balance_weight(int t, double pi_hat);

/// raw / sum(raw).
std::vector<double> normalize_weights(std::span<const double> raw);

/// inf{v : sum_{V_j <= v} masses_j >= level} over the finite scores, or +inf
/// when the finite mass never reaches the level (the remainder sits on the
/// test point's atom at +inf).
double weighted_quantile(std::span<const double> scores, std::span<const double> masses, double test_mass,
                         double level);

/// Quantile(beta; sum_i masses_i delta_{values_i}) with the same convention;
/// values may contain +inf. beta <= 0 gives -inf.
double discrete_quantile(std::span<const double> values, std::span<const double> masses, double beta);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool operator==(const Interval&) const = default;
};

/// Sorted, pairwise disjoint closed intervals, or the whole real line.
class PredictionSet {
 public:
  PredictionSet() = default;
  static PredictionSet entire_line();
  /// Sorts and merges overlapping or touching intervals.
  static PredictionSet from_intervals(std::vector<Interval> intervals);

  bool is_entire_line() const { return entire_line_; }
  const std::vector<Interval>& intervals() const { return intervals_; }

  bool contains(double value) const;
  /// Sum of interval lengths; +inf for the entire line.
  double total_length() const;

  bool operator==(const PredictionSet&) const = default;

 private:
  std::vector<Interval> intervals_;
  bool entire_line_ = false;
};

/// Union over samples of [s - q, s + q]; q = +inf gives the entire line.
PredictionSet build_prediction_set(std::span<const double> samples, double q);

inline bool contains(const PredictionSet& set, double value) { return set.contains(value); }
inline double total_length(const PredictionSet& set) { return set.total_length(); }

/// Evaluates both sides of  y in C(samples, q)  <=>  score(y, samples) <= q
/// and returns the shared truth value. Throws Error if they disagree.
bool membership_equivalence_check(double y, std::span<const double> samples, double q);

/// Checks  v_{n+1} <= Q(beta; sum p_i delta_{v_i})  <=>
///         v_{n+1} <= Q(beta; sum_{i<=n} p_i delta_{v_i} + p_{n+1} delta_inf).
/// Returns true when both sides agree.
bool lemma1_check(std::span<const double> values, std::span<const double> masses, double beta);

/// Calibration units of one arm: covariates, non-conformity scores and
/// balancing weights. Immutable once built.
class CalibrationSet {
 public:
  CalibrationSet(Matrix X, std::vector<double> scores, std::vector<double> balance);

  std::size_t size() const { return scores_.size(); }
  const Matrix& covariates() const { return X_; }
  const std::vector<double>& scores() const { return scores_; }
  const std::vector<double>& balance() const { return balance_; }

 private:
  Matrix X_;
  std::vector<double> scores_;
  std::vector<double> balance_;
};

/// Normalized masses over the calibration units and the test point.
struct WeightedScoreSet {
  std::vector<double> masses;
  double test_mass = 0.0;
};

WeightedScoreSet weighted_scores(const CalibrationSet& cal, std::span<const double> x_test, double test_balance,
                                 Bandwidth h, std::span<const double> noise);

struct PointPrediction {
  PredictionSet set;
  double quantile = 0.0;
  double test_mass = 0.0;
};

/// Weighted quantile at level 1 - alpha for one test point and the union set
/// around its generated samples.
PointPrediction predict_point(const CalibrationSet& cal, std::span<const double> x_test, double test_balance,
                              Bandwidth h, std::span<const double> noise, std::span<const double> samples,
                              double alpha);

}  // namespace cdm::conformal
