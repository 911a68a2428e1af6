#pragma once

// JSON experiment configuration: parsing with defaults, canonical form and
// the stable config hash.

#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cdm/bench.hpp"

namespace cdm::config {

using json = nlohmann::json;

/// Parses a config document. Missing keys take their defaults, unknown keys
/// are rejected. Relative paths are resolved against `base_dir`, and every
/// referenced file must exist.
bench::ExperimentConfig from_json(const json& j, const std::string& base_dir = "");

bench::ExperimentConfig load(const std::string& path);

/// Every field, defaults included.
json to_json(const bench::ExperimentConfig& c);

/// to_json without the runtime settings (output, workers, verbose,
/// inline_timing).
json canonical(const bench::ExperimentConfig& c);

/// 16 hex digits of FNV-1a over canonical(c).dump(); independent of key
/// order and whitespace in the source file.
std::string config_hash(const bench::ExperimentConfig& c);

/// Applies "a.b.c=value" overrides to a config document. The value is
/// parsed as JSON when possible and kept as a string otherwise.
void apply_override(json& doc, std::string_view assignment);

}  // namespace cdm::config
