// SPDX-License-Identifier: Apache-2.0
//
// AdamW with emulated state precision.

#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "budgetlab/model.h"
#include "budgetlab/numerics.h"

namespace budgetlab {

struct AdamWConfig {
    double lr_peak = 4e-5;
    std::pair<double, double> betas{0.9, 0.95};
    double weight_decay = 0.05;
    double eps = 1e-8;
    /// Rounding of the stored weights when there is no master copy.
    RoundingMode rounding = NearestEven{};

    void validate() const;
};

struct OptimizerState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    /// Present iff the policy keeps a master copy; stored in
    /// optimizer_state_fmt (float32 for the mixed preset).
    std::optional<std::vector<std::vector<double>>> master;
    std::uint64_t step = 0;
};

OptimizerState init_optimizer_state(const ParameterSet& params, const PrecisionPolicy& policy);

/// One AdamW step with bias correction and decoupled weight decay:
///   w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)
/// m and v are rounded to optimizer_state_fmt and the rounded values drive
/// the update. With a master copy the update lands there and the stored
/// weights are re-rounded from it; otherwise it is rounded straight into the
/// stored weights using cfg.rounding.
///
/// `trainable`, when non-empty, selects which parameters move (one flag per
/// parameter); frozen parameters keep their weights and moments.
///
/// Throws NumericalError on a non-finite gradient before touching anything.
void adamw_step(ParameterSet& params, const GradientSet& grads, OptimizerState& state, const AdamWConfig& cfg,
                const PrecisionPolicy& policy, double lr, const std::vector<char>& trainable = {});

/// Weights the model actually holds: the master copy when there is one,
/// otherwise the stored values.
std::vector<std::vector<double>> effective_weights(const ParameterSet& params, const OptimizerState& state);

}  // namespace budgetlab
