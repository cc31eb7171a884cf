// SPDX-License-Identifier: Apache-2.0
//
// Training loop over packed blocks: deterministic batch selection, gradient
// accumulation across the blocks of one step, and one AdamW update.

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "budgetlab/model.h"
#include "budgetlab/optimizer.h"
#include "budgetlab/schedule.h"

namespace budgetlab {

struct StepStats {
    std::uint64_t step = 0;
    double lr = 0.0;
    /// Mean next-token loss over the batch.
    double loss = 0.0;
    std::size_t tokens = 0;
    /// Norm of the averaged gradient as fed to the optimizer.
    double grad_norm = 0.0;
};

/// Indices of the blocks used at `step` (1-based): consecutive slices of a
/// per-epoch permutation derived from (seed, epoch). A pure function of its
/// arguments, so resumed runs replay the same batches.
std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t step, std::size_t n_blocks,
                                       std::size_t batch_size);

/// Forward/backward over every block, averages gradients over target
/// tokens (rounded to grads_fmt), then one AdamW step.
/// Throws NumericalError if the loss or a gradient is not finite.
StepStats train_step(ParameterSet& params, OptimizerState& state, const std::vector<const PackedBlock*>& batch,
                     const PrecisionPolicy& policy, const AdamWConfig& adamw, double lr,
                     const std::vector<char>& trainable = {});

struct LoopConfig {
    ScheduleSpec schedule;
    AdamWConfig adamw;
    PrecisionPolicy policy = PrecisionPolicy::pure_bf16();
    std::size_t batch_size = 8;
    std::uint64_t data_seed = 0;
    /// When set, every step uses this learning rate instead of the schedule.
    double constant_lr = -1.0;
    std::vector<char> trainable;
};

/// Runs steps first_step..last_step inclusive (1-based) and calls on_step
/// after each one.
void run_training(ParameterSet& params, OptimizerState& state, const std::vector<PackedBlock>& blocks,
                  const LoopConfig& cfg, std::uint64_t first_step, std::uint64_t last_step,
                  const std::function<void(const StepStats&)>& on_step = {});

/// One flag per parameter: true for Embedding and Unembedding only.
std::vector<char> embeddings_only_mask(const ParameterSet& params);

}  // namespace budgetlab
