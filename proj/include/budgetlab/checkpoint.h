// SPDX-License-Identifier: Apache-2.0
//
// On-disk checkpoints: a JSON manifest plus one little-endian binary payload.
//
//   <dir>/manifest.json   config, policy, tensor table, optimizer step, metadata
//   <dir>/tensors.bin     concatenated tensors
//
// A tensor is written as f32 when every value survives the round trip
// through float (always the case for bf16/fp32 state), otherwise as f64.

#pragma once

#include <optional>
#include <string>

#include <json.hpp>

#include "budgetlab/model.h"
#include "budgetlab/optimizer.h"

namespace budgetlab {

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Formats are stored by tag ("bf16", "fp32", "wide", "e5m10b15", ...).
nlohmann::json to_json(const PrecisionPolicy& policy);
PrecisionPolicy precision_policy_from_json(const nlohmann::json& j);

struct Checkpoint {
    ParameterSet params;
    PrecisionPolicy policy;
    std::optional<OptimizerState> optimizer;
    nlohmann::json metadata = nlohmann::json::object();
};

/// Writes (or overwrites) the checkpoint in `dir`, creating it if needed.
/// Init snapshots are saved when present.
void save_checkpoint(const std::string& dir, const ParameterSet& params, const PrecisionPolicy& policy,
                     const OptimizerState* optimizer = nullptr,
                     const nlohmann::json& metadata = nlohmann::json::object());

/// Loads and revalidates: shapes against the config, and every weight
/// representable in the policy's weight format. Throws std::runtime_error
/// for I/O or format problems.
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace budgetlab
