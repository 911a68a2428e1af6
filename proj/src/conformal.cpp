#include "cdm/conformal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace cdm::conformal {

namespace {

// First position in `order` where the running mass reaches level, or npos.
std::size_t first_reaching(std::span<const std::size_t> order, std::span<const double> masses, double level) {
  const double target = level - kLevelTolerance;
  double cum = 0.0;
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    cum += masses[order[pos]];
    if (cum >= target) return pos;
  }
  return order.size();
}

std::vector<std::size_t> order_by_value(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  return order;
}

void check_masses(std::span<const double> masses) {
  for (double m : masses) {
    if (!(m >= 0.0) || !std::isfinite(m)) throw ConfigError("masses must be finite and non-negative");
  }
}

}  // namespace

double nonconformity_score(double y, std::span<const double> samples) {
  if (samples.empty()) throw ConfigError("nonconformity_score: empty sample list");
  double best = kInf;
  for (double s : samples) best = std::min(best, std::abs(y - s));
  return best;
}

Bandwidth Bandwidth::fixed(double h) {
  if (!(h > 0.0)) throw ConfigError("bandwidth must be positive");
  return Bandwidth(h);
}

Bandwidth Bandwidth::from_factor(double c, std::size_t d) {
  if (std::isinf(c) && c > 0) return none();
  if (!(c > 0.0)) throw ConfigError("bandwidth factor c must be positive or +inf");
  return fixed(c * std::sqrt(static_cast<double>(d)));
}

std::vector<double> local_weights_from_noise(const Matrix& cal_X, std::span<const double> x_test,
                                             std::span<const double> noise, Bandwidth h) {
  const std::size_t n = cal_X.rows();
  if (!h.localized()) return std::vector<double>(n + 1, 1.0);
  const std::size_t d = x_test.size();
  if ((n > 0 && cal_X.cols() != d) || noise.size() != d) {
    throw ShapeError("local_weights: covariate dimensions differ");
  }
  std::vector<double> tilde(d);
  for (std::size_t k = 0; k < d; ++k) tilde[k] = x_test[k] + h.h() * noise[k];

  const double scale = 1.0 / (2.0 * h.h() * h.h());
  auto log_kernel = [&](std::span<const double> x) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = x[k] - tilde[k];
      s += diff * diff;
    }
    return -s * scale;
  };
  std::vector<double> w(n + 1);
  for (std::size_t j = 0; j < n; ++j) w[j] = log_kernel(cal_X.row(j));
  w[n] = log_kernel(x_test);
  const double top = *std::max_element(w.begin(), w.end());
  for (auto& v : w) v = std::exp(v - top);
  return w;
}

std::vector<double> local_weights(const Matrix& cal_X, std::span<const double> x_test, Bandwidth h, Rng& rng) {
  if (!h.localized()) return std::vector<double>(cal_X.rows() + 1, 1.0);
  std::vector<double> noise(x_test.size());
  for (auto& z : noise) z = standard_normal(rng);
  return local_weights_from_noise(cal_X, x_test, noise, h);
}

double balance_weight(int t, double pi_hat) {
  if (t != 0 && t != 1) throw ConfigError("balance_weight: treatment must be 0 or 1");
  if (!(pi_hat > 0.0 && pi_hat < 1.0)) throw ConfigError("balance_weight: propensity must lie strictly in (0, 1)");
  return t == 1 ? 1.0 / pi_hat : 1.0 / (1.0 - pi_hat);
}

std::vector<double> normalize_weights(std::span<const double> raw) {
  check_masses(raw);
  const double total = std::accumulate(raw.begin(), raw.end(), 0.0);
  if (!(total > 0.0)) throw ConfigError("normalize_weights: all weights are zero");
  std::vector<double> p(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) p[i] = raw[i] / total;
  return p;
}

double discrete_quantile(std::span<const double> values, std::span<const double> masses, double beta) {
  if (values.size() != masses.size()) throw ShapeError("discrete_quantile: values and masses differ in length");
  check_masses(masses);
  if (beta <= 0.0) return -kInf;
  const auto order = order_by_value(values);
  const std::size_t pos = first_reaching(order, masses, beta);
  return pos < order.size() ? values[order[pos]] : kInf;
}

double weighted_quantile(std::span<const double> scores, std::span<const double> masses, double test_mass,
                         double level) {
  if (scores.size() != masses.size()) throw ShapeError("weighted_quantile: scores and masses differ in length");
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("weighted_quantile: level must lie in (0, 1)");
  if (!(test_mass >= 0.0)) throw ConfigError("weighted_quantile: test mass must be non-negative");
  return discrete_quantile(scores, masses, level);
}

PredictionSet PredictionSet::entire_line() {
  PredictionSet s;
  s.entire_line_ = true;
  return s;
}

PredictionSet PredictionSet::from_intervals(std::vector<Interval> intervals) {
  for (const auto& iv : intervals) {
    if (!(iv.lo <= iv.hi)) throw ConfigError("interval with lo > hi or NaN endpoint");
  }
  std::sort(intervals.begin(), intervals.end(),
            [](const Interval& a, const Interval& b) { return a.lo < b.lo || (a.lo == b.lo && a.hi < b.hi); });
  PredictionSet s;
  for (const auto& iv : intervals) {
    if (!s.intervals_.empty() && iv.lo <= s.intervals_.back().hi) {
      s.intervals_.back().hi = std::max(s.intervals_.back().hi, iv.hi);
    } else {
      s.intervals_.push_back(iv);
    }
  }
  return s;
}

bool PredictionSet::contains(double value) const {
  if (entire_line_) return true;
  auto it = std::upper_bound(intervals_.begin(), intervals_.end(), value,
                             [](double v, const Interval& iv) { return v < iv.lo; });
  if (it == intervals_.begin()) return false;
  --it;
  return value <= it->hi;
}

double PredictionSet::total_length() const {
  if (entire_line_) return kInf;
  double s = 0.0;
  for (const auto& iv : intervals_) s += iv.hi - iv.lo;
  return s;
}

PredictionSet build_prediction_set(std::span<const double> samples, double q) {
  if (samples.empty()) throw ConfigError("build_prediction_set: empty sample list");
  if (std::isnan(q) || q < 0.0) throw ConfigError("build_prediction_set: quantile must be >= 0");
  if (std::isinf(q)) return PredictionSet::entire_line();
  std::vector<Interval> iv;
  iv.reserve(samples.size());
  for (double s : samples) iv.push_back({s - q, s + q});
  return PredictionSet::from_intervals(std::move(iv));
}

bool membership_equivalence_check(double y, std::span<const double> samples, double q) {
  const bool in_set = build_prediction_set(samples, q).contains(y);
  const bool by_score = nonconformity_score(y, samples) <= q;
  if (in_set != by_score) {
    throw Error("membership equivalence violated at y=" + std::to_string(y) + " q=" + std::to_string(q));
  }
  return in_set;
}

bool lemma1_check(std::span<const double> values, std::span<const double> masses, double beta) {
  if (values.empty() || values.size() != masses.size()) {
    throw ShapeError("lemma1_check: need matching non-empty values and masses");
  }
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("lemma1_check: beta must lie in [0, 1]");
  const double last = values.back();
  const bool lhs = last <= discrete_quantile(values, masses, beta);
  std::vector<double> moved(values.begin(), values.end());
  moved.back() = kInf;
  const bool rhs = last <= discrete_quantile(moved, masses, beta);
  return lhs == rhs;
}

CalibrationSet::CalibrationSet(Matrix X, std::vector<double> scores, std::vector<double> balance)
    : X_(std::move(X)), scores_(std::move(scores)), balance_(std::move(balance)) {
  if (X_.rows() != scores_.size() || balance_.size() != scores_.size()) {
    throw ShapeError("calibration set: covariates, scores and weights differ in length");
  }
  for (std::size_t j = 0; j < scores_.size(); ++j) {
    if (!(scores_[j] >= 0.0)) throw ConfigError("calibration score must be >= 0");
    if (!(balance_[j] >= 0.0) || !std::isfinite(balance_[j])) {
      throw ConfigError("calibration weight must be finite and >= 0");
    }
  }
}

WeightedScoreSet weighted_scores(const CalibrationSet& cal, std::span<const double> x_test, double test_balance,
                                 Bandwidth h, std::span<const double> noise) {
  auto raw = local_weights_from_noise(cal.covariates(), x_test, noise, h);
  const std::size_t n = cal.size();
  for (std::size_t j = 0; j < n; ++j) raw[j] *= cal.balance()[j];
  raw[n] *= test_balance;
  auto p = normalize_weights(raw);
  WeightedScoreSet out;
  out.test_mass = p[n];
  p.pop_back();
  out.masses = std::move(p);
  return out;
}

PointPrediction predict_point(const CalibrationSet& cal, std::span<const double> x_test, double test_balance,
                              Bandwidth h, std::span<const double> noise, std::span<const double> samples,
                              double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  const auto w = weighted_scores(cal, x_test, test_balance, h, noise);
  PointPrediction out;
  out.test_mass = w.test_mass;
  out.quantile = weighted_quantile(cal.scores(), w.masses, w.test_mass, 1.0 - alpha);
  out.set = build_prediction_set(samples, out.quantile);
  return out;
}

}  // namespace cdm::conformal
