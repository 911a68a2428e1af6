#pragma once

// Command implementations behind the cdm tool. Each returns a process exit
// code; errors that make a command impossible are thrown.

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/logger.h>

#include "cdm/bench.hpp"

namespace cdm::cli {

struct GlobalOptions {
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> workers;
  bool verbose = false;
  /// "key.path=value" config overrides, applied in order.
  std::vector<std::string> overrides;
};

struct Context {
  bench::ExperimentConfig config;
  std::string config_hash;
  std::shared_ptr<spdlog::logger> log;
};

/// Structured "timestamp level message" lines on stderr; debug lines only
/// when verbose.
std::shared_ptr<spdlog::logger> make_logger(bool verbose);

/// Loads the config file (or defaults), applies overrides, then the global
/// flags.
Context make_context(const GlobalOptions& options, std::shared_ptr<spdlog::logger> log = nullptr);

/// Writes the dataset CSV for the configured source under the root seed and
/// a "<out>.meta.json" sidecar with the config hash and code version.
int cmd_gen_data(const Context& ctx, const std::string& out_path);

/// Trains the score source ("diffusion" or "mlp") on the fitting part of the
/// treated training rows and writes a checkpoint.
int cmd_train(const Context& ctx, const std::string& data_path, const std::string& out_model,
              const std::string& kind = "diffusion");

struct PredictOptions {
  /// cdm, cdm_nolocal or naive for diffusion checkpoints; mlp otherwise.
  std::optional<std::string> method;
  bool force = false;
};

/// One JSON line per test row with the set, quantile and test mass, after a
/// header line carrying hashes and settings.
int cmd_predict(const Context& ctx, const std::string& model_path, const std::string& data_path,
                const std::string& out_path, const PredictOptions& options = {});

/// Runs every missing (replicate, method) cell, rewrites the results
/// document after each replicate and prints the summary table to `summary`.
int cmd_experiment(const Context& ctx, std::ostream& summary);

struct InspectOptions {
  bool force = false;
  /// Hash the records must carry, e.g. from --config.
  std::optional<std::string> expected_hash;
  std::vector<std::string> external_results;
};

int cmd_inspect(const std::string& results_path, const InspectOptions& options, std::ostream& out);

/// Sorted by (replicate, method).
std::vector<bench::Record> read_results(const std::string& path);
std::string format_results(std::vector<bench::Record> records, bool with_wallclock);

/// Table with mean and 95% interval of coverage and median length per
/// method; methods below 1 - alpha are flagged.
std::string format_summary(const std::vector<bench::MethodSummary>& rows, double alpha);

}  // namespace cdm::cli
