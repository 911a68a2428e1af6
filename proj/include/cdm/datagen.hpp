#pragma once

// Synthetic potential-outcome generators, the semi-synthetic protocol over a
// user table, and the dataset CSV format.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cdm/matrix.hpp"
#include "cdm/propensity.hpp"
#include "cdm/rng.hpp"

namespace cdm::datagen {

enum class Scenario { lowdim, highdim };
enum class Noise { gaussian, gamma, nlm };
enum class Variance { homo, hetero };
enum class Split { train, cal, test };

std::string_view to_string(Scenario s);
std::string_view to_string(Noise n);
std::string_view to_string(Variance v);
std::string_view to_string(Split s);
Scenario parse_scenario(std::string_view s);
Noise parse_noise(std::string_view s);
Variance parse_variance(std::string_view s);
Split parse_split(std::string_view s);

struct DgpConfig {
  Scenario scenario = Scenario::lowdim;
  Noise noise = Noise::gaussian;
  Variance variance = Variance::homo;
  std::size_t d = 10;
  std::size_t n_train = 7500;
  std::size_t n_cal = 2500;
  std::size_t n_test = 1000;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Dataset {
  Matrix X;
  std::vector<int> t;
  std::vector<double> y;
  /// Oracle columns; empty for ingested data without them.
  std::vector<double> y1_true;
  std::vector<double> y0_true;
  std::vector<double> pi_true;
  /// Empty when the source carries no split column.
  std::vector<Split> split;

  std::size_t size() const { return y.size(); }
  std::size_t dim() const { return X.cols(); }
  bool has_oracles() const { return !y1_true.empty(); }
  bool has_split() const { return !split.empty(); }

  /// Row indices with the given split tag, optionally restricted to an arm.
  std::vector<std::size_t> rows(Split s, std::optional<int> arm = std::nullopt) const;

  /// Checks lengths, binary t, oracle ranges and the consistency identity.
  void validate() const;
};

double normal_cdf(double z);

/// n x d matrix with entries Phi(Z), Z iid standard normal, row by row.
Matrix gen_covariates(std::size_t n, std::size_t d, Rng& rng);

/// f(x1) f(x2), f(x) = 2 / (1 + exp(-12 (x - 0.5))).
double mean_lowdim(std::span<const double> x);

/// f1(Z1) f2(Z2) - f3(Z3) over ramp-weighted block averages; d % 4 == 0.
double mean_highdim(std::span<const double> x);

double conditional_mean(Scenario s, std::span<const double> x);

/// Zero-mean, unit-variance draw from the family.
double sample_noise(Noise family, Rng& rng);

/// Unstandardized nlm draw (density proportional to x^10 phi(x)).
double sample_nlm_raw(Rng& rng);

/// 1 (homo), or 0.5 / 5 sqrt(d/10) |cos(pi mu)| with mu the coordinate mean.
double sigma_fn(std::span<const double> x, Variance mode, std::size_t d);

/// CDF of Beta(2, 4): 10u^2 - 20u^3 + 15u^4 - 4u^5 on [0, 1].
double beta24_cdf(double u);

/// 0.25 (1 + beta24_cdf(x1)).
double propensity_true(std::span<const double> x);

/// Rows are ordered train, cal, test. Under heteroscedastic noise the test
/// rows are restricted to ||X||_2 >= the 0.9 quantile of an independent
/// reference draw of n_train + n_cal rows.
Dataset gen_dataset(const DgpConfig& config);

/// The shift threshold gen_dataset used for `config` (hetero only).
double shift_threshold(const DgpConfig& config);

/// Conjunctive row filter on raw table columns, e.g. {"age", "<", 62}.
struct ColumnFilter {
  std::string column;
  std::string op;
  double value = 0.0;

  bool accepts(double v) const;
};

struct SemiSyntheticConfig {
  std::string treatment_column = "t";
  std::string outcome_column = "y";
  /// Empty selects every other numeric column except oracle and split
  /// columns.
  std::vector<std::string> covariate_columns;
  /// Share of source rows used to fit the outcome and propensity models.
  double fit_fraction = 0.5;
  std::size_t n_train = 7500;
  std::size_t n_cal = 2500;
  /// Candidate test rows generated before the filter is applied.
  std::size_t n_test_candidates = 1000;
  std::vector<ColumnFilter> test_filter;
  double iqr_factor = 0.74;
  double pi_lo = 0.1;
  double pi_hi = 0.9;
  propensity::GbmConfig outcome_model{};
  propensity::GbmConfig propensity_model{};
  std::uint64_t seed = 0;

  void validate() const;
};

/// Fitted pieces of the semi-synthetic generator, returned for inspection.
struct SemiSyntheticFit {
  propensity::BoostedTreesModel mean_model;
  propensity::BoostedTreesModel propensity_model;
  double residual_iqr = 0.0;
  std::vector<std::string> covariate_columns;
};

/// Simple named-column numeric table; non-numeric cells are kept as text.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> cells;

  std::size_t column(std::string_view name) const;
  bool has_column(std::string_view name) const;
  double number(std::size_t row, std::size_t col) const;
};

Table read_table(const std::string& path);
Table parse_table(std::string_view text);

Dataset semi_synthetic(const Table& source, const SemiSyntheticConfig& config, SemiSyntheticFit* fit = nullptr);
Dataset semi_synthetic_from_csv(const std::string& path, const SemiSyntheticConfig& config,
                                SemiSyntheticFit* fit = nullptr);

/// Header x1..xd,t,y[,y1_true,y0_true,pi_true][,split]; %.17g numbers.
std::string format_dataset_csv(const Dataset& data);
void write_dataset_csv(const Dataset& data, const std::string& path);

/// Accepts the minimal x*,t,y schema; oracle and split columns are optional.
Dataset parse_dataset_csv(std::string_view text);
Dataset read_dataset_csv(const std::string& path);

}  // namespace cdm::datagen
