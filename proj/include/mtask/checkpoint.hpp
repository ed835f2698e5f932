#pragma once

#include <string>

#include "mtask/multitask.hpp"

namespace mtask {

// Model config <-> JSON (the structured-text architecture spec stored inside
// checkpoints and experiment configs).
std::string model_config_to_json(const TwinModelConfig& cfg);
TwinModelConfig model_config_from_json(const std::string& text);

// Binary checkpoint: magic, version, config JSON, then every learnable
// parameter and BN running-stat tensor as (name, shape, little-endian f64).
// Round-trips are bitwise exact.
void save_checkpoint(const TwinModel& model, const std::string& path);
TwinModel load_checkpoint(const std::string& path);

}  // namespace mtask
