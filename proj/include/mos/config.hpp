#pragma once

// JSON configuration files. Unknown keys and ill-typed values raise
// ConfigError with the dotted field path.

#include "mos/trainer.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>

namespace mos {

using Json = nlohmann::ordered_json;

/// Overlays the fields present in `j` onto `config`. A "variant" key is
/// applied first so the remaining keys of the same object override it.
void apply_json(TrainConfig& config, const Json& j);
void apply_json(SyntheticConfig& config, const Json& j, const std::string& path = "synthetic");

Json to_json(const TrainConfig& config);
Json to_json(const SyntheticConfig& config);

TrainConfig train_config_from_file(const std::filesystem::path& path);
SyntheticConfig synthetic_config_from_file(const std::filesystem::path& path);
Json read_json_file(const std::filesystem::path& path);

/// Effective configuration as canonical JSON text; byte-stable.
std::string config_echo(const TrainConfig& config);
TrainConfig config_from_echo(const std::string& echo);

/// 16 hex digits of the 64-bit FNV-1a hash of `text`.
std::string run_id(const std::string& text);

}  // namespace mos
