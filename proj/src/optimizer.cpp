// SPDX-License-Identifier: Apache-2.0

#include "budgetlab/optimizer.h"

#include <cmath>
#include <stdexcept>
#include <string>

#include "budgetlab/rng.h"

namespace budgetlab {

void AdamWConfig::validate() const {
    if (!(betas.first >= 0.0 && betas.first < 1.0 && betas.second >= 0.0 && betas.second < 1.0)) {
        throw std::invalid_argument("AdamWConfig: betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw std::invalid_argument("AdamWConfig: eps must be > 0");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("AdamWConfig: weight_decay must be >= 0");
    if (!(lr_peak >= 0.0)) throw std::invalid_argument("AdamWConfig: lr_peak must be >= 0");
}

OptimizerState init_optimizer_state(const ParameterSet& params, const PrecisionPolicy& policy) {
    policy.validate();
    OptimizerState s;
    for (const auto& p : params.params()) {
        s.m.emplace_back(p.size(), 0.0);
        s.v.emplace_back(p.size(), 0.0);
    }
    if (policy.master_weights) {
        s.master.emplace();
        for (const auto& p : params.params()) {
            std::vector<double> copy = p.values;
            for (double& x : copy) x = quantize(x, policy.optimizer_state_fmt);
            s.master->push_back(std::move(copy));
        }
    }
    return s;
}

void adamw_step(ParameterSet& params, const GradientSet& grads, OptimizerState& state, const AdamWConfig& cfg,
                const PrecisionPolicy& policy, double lr, const std::vector<char>& trainable) {
    cfg.validate();
    if (grads.grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
        throw std::invalid_argument("adamw_step: parameter/gradient/state count mismatch");
    }
    if (!trainable.empty() && trainable.size() != params.size()) {
        throw std::invalid_argument("adamw_step: trainable mask has the wrong length");
    }
    if (policy.master_weights != state.master.has_value()) {
        throw std::invalid_argument("adamw_step: master copy presence does not match the policy");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads.grads[i].size() != params[i].size()) {
            throw std::invalid_argument("adamw_step: gradient shape mismatch for " + params[i].name);
        }
        for (double g : grads.grads[i]) {
            if (!std::isfinite(g)) throw NumericalError("adamw_step: non-finite gradient in " + params[i].name);
        }
    }

    const std::uint64_t t = ++state.step;
    const auto [b1, b2] = cfg.betas;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
    const FloatFormat& sf = policy.optimizer_state_fmt;
    const Stochastic* stochastic = std::get_if<Stochastic>(&cfg.rounding);

    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!trainable.empty() && !trainable[i]) continue;
        auto& w = params[i].values;
        auto& m = state.m[i];
        auto& v = state.v[i];
        const auto& g = grads.grads[i];
        std::vector<double>* master = state.master ? &(*state.master)[i] : nullptr;
        for (std::size_t k = 0; k < w.size(); ++k) {
            m[k] = quantize(b1 * m[k] + (1.0 - b1) * g[k], sf);
            v[k] = quantize(b2 * v[k] + (1.0 - b2) * g[k] * g[k], sf);
            const double m_hat = m[k] / bc1;
            const double v_hat = v[k] / bc2;
            const double base = master ? (*master)[k] : w[k];
            const double updated = base - lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * base);
            if (master) {
                (*master)[k] = quantize(updated, sf);
                w[k] = quantize((*master)[k], policy.weights_fmt);
            } else if (stochastic) {
                const std::uint64_t s = mix_seed(mix_seed(stochastic->seed, t), mix_seed(i, k));
                w[k] = quantize(updated, policy.weights_fmt, Stochastic{s});
            } else {
                w[k] = quantize(updated, policy.weights_fmt);
            }
        }
    }
    params.bump_generation();
}

std::vector<std::vector<double>> effective_weights(const ParameterSet& params, const OptimizerState& state) {
    if (state.master) return *state.master;
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (const auto& p : params.params()) out.push_back(p.values);
    return out;
}

}  // namespace budgetlab
