// SPDX-License-Identifier: Apache-2.0
//
// Analytic per-device memory and relative step-time model over the
// (micro-batch, activation checkpointing, sharding, gradient sync, paged
// optimizer) search space, with a dominance-pruned exhaustive search.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace budgetlab {

enum class Precision { Pure, Mixed };
/// NotApplicable is used on a single device.
enum class Sharding { NotApplicable, Full, GradOp };
enum class AccumSync { NotApplicable, Sync, NoSync };

std::string to_string(Precision p);
std::string to_string(Sharding s);
std::string to_string(AccumSync s);
Precision precision_from_string(const std::string& s);

struct HardwareSpec {
    std::size_t gpu_count = 1;
    double per_gpu_memory = 80e9;  // bytes
    /// Relative slowdown of full sharding across devices.
    double interconnect_penalty = 0.0;

    void validate() const;
};

struct ModelShape {
    double param_count = 7e9;
    std::size_t n_layers = 32;
    std::size_t d_model = 4096;
    std::size_t context_length = 4096;

    friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

struct RunConfigPoint {
    Precision precision = Precision::Pure;
    std::size_t micro_batch = 1;
    bool act_ckpt = false;
    Sharding sharding = Sharding::NotApplicable;
    AccumSync accum_sync = AccumSync::NotApplicable;
    bool paged_optimizer = false;
    ModelShape model;

    /// "(1, no, grad_op, no_sync, no_paged)"
    std::string tuple() const;
    friend bool operator==(const RunConfigPoint&, const RunConfigPoint&) = default;
};

/// Bytes per parameter and calibration knobs.
struct PlannerCoefficients {
    double pure_weights = 2, pure_grads = 2, pure_optimizer = 4;
    double mixed_weights = 2, mixed_master = 4, mixed_optimizer = 8, mixed_grads = 4;
    /// Activation bytes per (token, d_model, layer) unit, in forward-format elements.
    double c_act = 16, c_ckpt = 3;
    double forward_bytes = 2;
    double r_ckpt = 0.35, r_sync = 0.05, r_paged = 0.05, r_master = 0.10;
};

struct MemoryBreakdown {
    double weights = 0, master = 0, optimizer_states = 0, gradients = 0, activations = 0, transient_peak = 0;
    double total = 0;
    bool feasible = true;

    nlohmann::json to_json() const;
};

MemoryBreakdown memory_estimate(const RunConfigPoint& cfg, const HardwareSpec& hw,
                                const PlannerCoefficients& c = {});

/// Relative step time; throws std::invalid_argument for an infeasible point.
double time_estimate(const RunConfigPoint& cfg, const HardwareSpec& hw, const PlannerCoefficients& c = {});

/// The full search space in enumeration order: micro-batch ascending, and
/// within it the memory-frugal option of each flag first. On one device the
/// sharding and sync axes collapse to NotApplicable.
std::vector<RunConfigPoint> enumerate_space(Precision precision, const ModelShape& model, std::size_t gpu_count);

/// q needs no more memory than p on every axis (same precision).
bool more_frugal_or_equal(const RunConfigPoint& q, const RunConfigPoint& p);

enum class PlanStatus { Feasible, OutOfMemory, Pruned };
std::string to_string(PlanStatus s);

struct PlanEntry {
    RunConfigPoint point;
    PlanStatus status = PlanStatus::Feasible;
    MemoryBreakdown memory;  // empty for pruned points
    double time = 0.0;       // feasible points only
};

struct PlanResult {
    /// Every point in enumeration order.
    std::vector<PlanEntry> all;
    /// Feasible points, fastest first. Ties prefer the later point in
    /// enumeration order (larger micro-batch, fewer memory savers).
    std::vector<PlanEntry> ranked;

    bool empty() const { return ranked.empty(); }
    const PlanEntry& best() const;
    nlohmann::json to_json() const;
    std::string ranking_csv() const;
};

/// With `prune`, points that need at least as much memory as an already
/// out-of-memory point are skipped without evaluation.
PlanResult best_config(Precision precision, const ModelShape& model, const HardwareSpec& hw,
                       const PlannerCoefficients& c = {}, bool prune = true);

}  // namespace budgetlab
