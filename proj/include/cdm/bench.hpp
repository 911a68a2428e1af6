#pragma once

// Experiment orchestration: the end-to-end interval pipeline, the
// comparison methods, bandwidth selection, metrics and aggregation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "cdm/conformal.hpp"
#include "cdm/datagen.hpp"
#include "cdm/diffusion.hpp"
#include "cdm/numerics.hpp"
#include "cdm/propensity.hpp"

namespace cdm::bench {

/// cqr and causal_forest are reserved for externally produced records.
enum class Method { cdm, cdm_nolocal, mlp, naive, cqr, causal_forest };

std::string_view to_string(Method m);
Method parse_method(std::string_view s);
bool is_external(Method m);

struct ConformalConfig {
  double alpha = 0.05;
  std::size_t M = 40;
  /// Bandwidth factors; +inf selects no localization.
  std::vector<double> c_grid{0.02, 0.05, 0.1, 0.2, 0.5, 1.0, conformal::kInf};
  /// Treated training rows held out to choose c.
  double val_fraction = 0.15;

  void validate() const;
};

/// Point regressor for the MLP method. Same optimizer stack as the
/// denoiser.
struct MlpTrainConfig {
  std::vector<std::size_t> hidden{128, 128, 128};
  int epochs = 1000;
  std::size_t batch_size = 128;
  nn::AdamWConfig optimizer{};
  double lr_decay = 0.7;
  int lr_decay_every = 500;
  double val_fraction = 0.15;
  int eval_every = 50;
  int patience = 5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct MlpRegressor {
  nn::MlpParams net;
  double y_mean = 0.0;
  double y_sd = 1.0;
  int epochs_trained = 0;

  double predict(std::span<const double> x) const;
};

MlpRegressor train_mlp_regressor(const Matrix& X, std::span<const double> y, const MlpTrainConfig& config,
                                 const diffusion::EpochCallback& on_epoch = {});

struct SemiSyntheticSource {
  std::string path;
  datagen::SemiSyntheticConfig config;
};

struct ExperimentConfig {
  std::string experiment_id = "experiment";
  std::variant<datagen::DgpConfig, SemiSyntheticSource> data = datagen::DgpConfig{};
  std::vector<Method> methods{Method::cdm, Method::cdm_nolocal, Method::mlp, Method::naive};
  diffusion::TrainConfig diffusion{};
  MlpTrainConfig mlp{};
  propensity::GbmConfig propensity{};
  ConformalConfig conformal{};
  std::uint64_t seed = 0;
  int replicates = 50;
  /// Externally produced per-replicate CSVs (method,replicate,coverage,
  /// median_length[,infinite_count]) merged into summaries.
  std::vector<std::string> external_results;

  // Runtime settings; excluded from the canonical hash.
  std::string output = "results.jsonl";
  int workers = 0;
  bool verbose = false;
  /// Write wallclock into the results document instead of the sidecar.
  bool inline_timing = false;

  void validate() const;
};

/// Seed of replicate r under the root seed.
std::uint64_t replicate_seed(std::uint64_t root, int replicate);

/// Data of replicate r: the synthetic design or the semi-synthetic generator
/// with its seed replaced by a replicate-derived one.
datagen::Dataset replicate_dataset(const ExperimentConfig& config, int replicate);

/// Treated training rows split into the score-model fitting part and the
/// held-out bandwidth-validation part. Both lists index `data` and are
/// sorted.
struct TrainSplit {
  std::vector<std::size_t> fit;
  std::vector<std::size_t> validation;
};

TrainSplit split_treated_train(const datagen::Dataset& data, double val_fraction, std::uint64_t seed);

/// GBM on all training rows; a constant model when one class is missing.
propensity::PropensityModel fit_propensity(const datagen::Dataset& data, const propensity::GbmConfig& config);

/// Generated outcomes: M draws per row from a diffusion model, or the single
/// point prediction of an MLP regressor.
class ScoreSource {
 public:
  explicit ScoreSource(diffusion::DiffusionModel model, std::size_t M);
  explicit ScoreSource(MlpRegressor model);

  std::string_view tag() const;
  std::size_t draws_per_row() const;
  std::size_t covariate_dim() const;

  /// Row i holds the draws at X.row(i) under seed derive_seed(stream, {i}).
  /// Rows are independent, so `workers` threads only change speed.
  Matrix draws(const Matrix& X, std::uint64_t stream, int workers = 1) const;

  const diffusion::DiffusionModel* diffusion() const { return std::get_if<diffusion::DiffusionModel>(&model_); }
  const MlpRegressor* mlp() const { return std::get_if<MlpRegressor>(&model_); }

 private:
  std::variant<diffusion::DiffusionModel, MlpRegressor> model_;
  std::size_t M_ = 1;
};

/// Standard normal matrix (one row per point) for the kernel surrogate
/// draws.
Matrix kernel_noise(std::size_t rows, std::size_t d, std::uint64_t stream);

/// Treated calibration rows scored against their draws, with balancing
/// weights 1 / pi_hat.
conformal::CalibrationSet calibrate(const Matrix& X, std::span<const double> y, const Matrix& draws,
                                    const propensity::PropensityModel& pi);

/// Conformal sets for every row of X_test; `noise` rows pair with X_test
/// rows and are ignored without localization.
std::vector<conformal::PointPrediction> predict_sets(const conformal::CalibrationSet& cal, const Matrix& X_test,
                                                     const Matrix& draws, const Matrix& noise,
                                                     const propensity::PropensityModel& pi, conformal::Bandwidth h,
                                                     double alpha);

/// Single interval between the alpha/2 and 1-alpha/2 linear-interpolation
/// quantiles of the draws.
conformal::PredictionSet naive_interval(std::span<const double> draws, double alpha);

struct SetMetrics {
  double coverage = 0.0;
  /// Median of set lengths with +inf sorted last; +inf once the middle
  /// order statistic is infinite.
  double median_length = 0.0;
  std::size_t infinite_count = 0;
  std::size_t n = 0;
};

SetMetrics evaluate_sets(std::span<const conformal::PredictionSet> sets, std::span<const double> truth);

struct BandwidthTrial {
  double c = 0.0;
  double coverage = 0.0;
  double median_length = 0.0;
};

struct BandwidthChoice {
  double c = conformal::kInf;
  std::vector<BandwidthTrial> trials;
};

/// Among trials with a finite median length (all trials if none), the
/// smallest c with coverage >= 1 - alpha; with none qualifying, the highest
/// coverage, then the shorter length, then the smaller c.
double choose_bandwidth(std::span<const BandwidthTrial> trials, double alpha);

/// Evaluates each c on the validation points and applies choose_bandwidth.
BandwidthChoice select_bandwidth(const conformal::CalibrationSet& cal, const Matrix& X_val,
                                 std::span<const double> y_val, const Matrix& val_draws, const Matrix& val_noise,
                                 const propensity::PropensityModel& pi, std::span<const double> grid, double alpha);

struct Record {
  std::string experiment_id;
  Method method = Method::cdm;
  int replicate = 0;
  std::uint64_t seed = 0;
  double coverage = 0.0;
  double median_length = 0.0;
  std::size_t infinite_count = 0;
  std::size_t n_test = 0;
  double alpha = 0.05;
  /// Chosen bandwidth factor for cdm; empty otherwise.
  std::optional<double> c_selected;
  double wallclock_seconds = 0.0;
  std::string config_hash;
  std::string code_version;
};

struct ReplicateLog {
  std::function<void(std::string_view)> info;
  diffusion::EpochCallback on_epoch;
};

/// Runs the requested internal methods on replicate r. Methods sharing a
/// score source share its trained model, draws and calibration, so a method's
/// record does not depend on which other methods run alongside it.
std::vector<Record> run_replicate(const ExperimentConfig& config, int replicate, std::span<const Method> methods,
                                  const ReplicateLog& log = {});

struct MethodSummary {
  Method method = Method::cdm;
  std::size_t replicates = 0;
  double coverage_mean = 0.0;
  double coverage_sd = 0.0;
  double coverage_lo = 0.0;
  double coverage_hi = 0.0;
  /// Aggregates over replicates with a finite median length.
  std::size_t finite_length_replicates = 0;
  double length_mean = conformal::kInf;
  double length_sd = 0.0;
  double length_lo = conformal::kInf;
  double length_hi = conformal::kInf;
  std::size_t infinite_sets = 0;
  /// Set when fewer than two replicates make the sd undefined.
  bool degenerate_interval = false;
};

/// Per-method mean and mean +/- 1.96 sd / sqrt(R), in method order.
std::vector<MethodSummary> aggregate(std::span<const Record> records);

/// Records from an external CSV (method,replicate,coverage,median_length
/// [,infinite_count]).
std::vector<Record> read_external_records(const std::string& path);

/// Runs `tasks` on up to `workers` threads (0 = hardware concurrency).
/// Exceptions are captured per task.
std::vector<std::exception_ptr> run_pool(std::size_t tasks, int workers, const std::function<void(std::size_t)>& fn);

int resolve_workers(int workers);

}  // namespace cdm::bench
