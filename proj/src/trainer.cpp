// SPDX-License-Identifier: Apache-2.0

#include "budgetlab/trainer.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "budgetlab/rng.h"

namespace budgetlab {

std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t step, std::size_t n_blocks,
                                       std::size_t batch_size) {
    if (n_blocks == 0) throw std::invalid_argument("batch_indices: no blocks");
    if (step == 0) throw std::invalid_argument("batch_indices: steps are 1-based");
    std::vector<std::size_t> out;
    out.reserve(batch_size);
    std::uint64_t cached_epoch = ~std::uint64_t{0};
    std::vector<std::size_t> perm(n_blocks);
    for (std::size_t k = 0; k < batch_size; ++k) {
        const std::uint64_t pos = (step - 1) * batch_size + k;
        const std::uint64_t epoch = pos / n_blocks;
        if (epoch != cached_epoch) {
            std::iota(perm.begin(), perm.end(), 0);
            Rng rng(mix_seed(seed, epoch));
            std::shuffle(perm.begin(), perm.end(), rng);
            cached_epoch = epoch;
        }
        out.push_back(perm[pos % n_blocks]);
    }
    return out;
}

StepStats train_step(ParameterSet& params, OptimizerState& state, const std::vector<const PackedBlock*>& batch,
                     const PrecisionPolicy& policy, const AdamWConfig& adamw, double lr,
                     const std::vector<char>& trainable) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    GradientSet total = GradientSet::zeros_like(params);
    double nll = 0.0;
    std::size_t tokens = 0;
    for (const PackedBlock* block : batch) {
        ForwardResult r = forward_loss(params, *block, policy);
        if (!std::isfinite(r.nll_sum)) throw NumericalError("train_step: non-finite loss");
        nll += r.nll_sum;
        tokens += r.token_count;
        if (r.token_count == 0) continue;
        total.add(backward(r.tape, policy));
    }
    StepStats stats;
    stats.lr = lr;
    stats.tokens = tokens;
    stats.loss = tokens ? nll / static_cast<double>(tokens) : 0.0;
    if (tokens > 0) total.scale(1.0 / static_cast<double>(tokens));
    for (auto& g : total.grads) {
        for (double& x : g) x = quantize(x, policy.grads_fmt);
    }
    if (!total.all_finite()) throw NumericalError("train_step: non-finite gradient");
    stats.grad_norm = total.global_norm();
    adamw_step(params, total, state, adamw, policy, lr, trainable);
    stats.step = state.step;
    return stats;
}

void run_training(ParameterSet& params, OptimizerState& state, const std::vector<PackedBlock>& blocks,
                  const LoopConfig& cfg, std::uint64_t first_step, std::uint64_t last_step,
                  const std::function<void(const StepStats&)>& on_step) {
    if (blocks.empty()) throw std::invalid_argument("run_training: no training blocks");
    std::vector<const PackedBlock*> batch;
    for (std::uint64_t step = first_step; step <= last_step; ++step) {
        batch.clear();
        for (std::size_t i : batch_indices(cfg.data_seed, step, blocks.size(), cfg.batch_size)) {
            batch.push_back(&blocks[i]);
        }
        const double lr = cfg.constant_lr >= 0.0 ? cfg.constant_lr : lr_at(cfg.schedule, step);
        StepStats s = train_step(params, state, batch, cfg.policy, cfg.adamw, lr, cfg.trainable);
        s.step = step;
        if (on_step) on_step(s);
    }
}

std::vector<char> embeddings_only_mask(const ParameterSet& params) {
    std::vector<char> mask(params.size(), 0);
    for (std::size_t i = 0; i < params.size(); ++i) {
        mask[i] = params[i].kind == LayerKind::Embedding || params[i].kind == LayerKind::Unembedding;
    }
    return mask;
}

}  // namespace budgetlab
