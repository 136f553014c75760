#pragma once

#include <string>

#include <json.hpp>

#include "ctnet/data.hpp"
#include "ctnet/model.hpp"
#include "ctnet/train.hpp"

namespace ctnet {

// Merged run configuration for the CLI: model architecture, training recipe
// and noise spec, loaded from a JSON file with {"model": {...}, "train":
// {...}, "noise": {...}}. Missing keys take defaults; unknown keys are
// rejected.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

RunConfig load_run_config(const std::string& path);
RunConfig parse_run_config(const nlohmann::json& j);

// Desk-scale preset: width 8, window 4, heads 2, 16x16 patches.
RunConfig tiny_run_config(int image_channels = 1);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json noise_spec_to_json(const NoiseSpec& spec);
NoiseSpec noise_spec_from_json(const nlohmann::json& j);

}  // namespace ctnet
