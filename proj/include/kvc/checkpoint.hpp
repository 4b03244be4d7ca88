#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "kvc/model.hpp"

namespace kvc {

inline constexpr char kCheckpointMagic[8] = {'K', 'V', 'C', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Group a parameter belongs to, from its name.
ParamGroup group_for_name(std::string_view name);

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
// Throws SchemaError on bad magic/version, unknown or missing tensors and
// shape mismatches against the stored config. Parameters load with Adapt scope.
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace kvc
