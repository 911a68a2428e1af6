#pragma once

// Versioned JSON documents for checkpoints, prediction sets and result
// records. Doubles are written in shortest round-trip form, so a save/load
// cycle reproduces every parameter bit for bit.

#include <string>
#include <string_view>

#include <json.hpp>

#include "cdm/bench.hpp"
#include "cdm/conformal.hpp"
#include "cdm/diffusion.hpp"
#include "cdm/numerics.hpp"
#include "cdm/propensity.hpp"

namespace cdm::serialize {

using json = nlohmann::json;

inline constexpr std::string_view kMlpSchema = "cdmite.mlp/1";
inline constexpr std::string_view kDiffusionSchema = "cdmite.diffusion/1";
inline constexpr std::string_view kRegressorSchema = "cdmite.regressor/1";
inline constexpr std::string_view kGbmSchema = "cdmite.gbm/1";
inline constexpr std::string_view kCheckpointSchema = "cdmite.checkpoint/1";

std::string_view code_version();

/// Reals that may be infinite: numbers when finite, "inf" / "-inf" otherwise.
json real_to_json(double v);
double real_from_json(const json& j);

json to_json(const nn::MlpParams& p);
nn::MlpParams mlp_from_json(const json& j);

json to_json(const diffusion::DiffusionModel& m);
diffusion::DiffusionModel diffusion_from_json(const json& j);

json to_json(const bench::MlpRegressor& m);
bench::MlpRegressor regressor_from_json(const json& j);

json to_json(const propensity::BoostedTreesModel& m);
propensity::BoostedTreesModel gbm_from_json(const json& j);

/// {"entire_line": bool, "intervals": [[lo, hi], ...]}.
json to_json(const conformal::PredictionSet& s);
conformal::PredictionSet prediction_set_from_json(const json& j);

/// One results-document line. Wallclock is included only when asked.
json to_json(const bench::Record& r, bool with_wallclock);
bench::Record record_from_json(const json& j);

/// Score-source checkpoint: a diffusion model or an MLP regressor with the
/// hash of the config that trained it.
struct Checkpoint {
  std::string kind;  // "diffusion" or "mlp"
  std::string config_hash;
  std::string code_version;
  json model;
};

json to_json(const Checkpoint& c);
Checkpoint checkpoint_from_json(const json& j);
void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Throws FormatError unless j["schema"] == schema.
void expect_schema(const json& j, std::string_view schema);

}  // namespace cdm::serialize
