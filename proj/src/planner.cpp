// SPDX-License-Identifier: Apache-2.0

#include "budgetlab/planner.h"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace budgetlab {

std::string to_string(Precision p) { return p == Precision::Pure ? "pure" : "mixed"; }

std::string to_string(Sharding s) {
    switch (s) {
        case Sharding::NotApplicable: return "N/A";
        case Sharding::Full: return "full";
        case Sharding::GradOp: return "grad_op";
    }
    return "?";
}

std::string to_string(AccumSync s) {
    switch (s) {
        case AccumSync::NotApplicable: return "N/A";
        case AccumSync::Sync: return "sync";
        case AccumSync::NoSync: return "no_sync";
    }
    return "?";
}

Precision precision_from_string(const std::string& s) {
    if (s == "pure") return Precision::Pure;
    if (s == "mixed") return Precision::Mixed;
    throw std::invalid_argument("unknown precision '" + s + "' (expected pure or mixed)");
}

std::string to_string(PlanStatus s) {
    switch (s) {
        case PlanStatus::Feasible: return "feasible";
        case PlanStatus::OutOfMemory: return "oom";
        case PlanStatus::Pruned: return "pruned";
    }
    return "?";
}

void HardwareSpec::validate() const {
    if (gpu_count < 1) throw std::invalid_argument("HardwareSpec: gpu_count must be >= 1");
    if (!(per_gpu_memory > 0)) throw std::invalid_argument("HardwareSpec: per_gpu_memory must be > 0");
    if (!(interconnect_penalty >= 0)) throw std::invalid_argument("HardwareSpec: interconnect_penalty must be >= 0");
}

std::string RunConfigPoint::tuple() const {
    std::ostringstream os;
    os << '(' << micro_batch << ", " << (act_ckpt ? "yes" : "no") << ", " << to_string(sharding) << ", "
       << to_string(accum_sync) << ", " << (paged_optimizer ? "paged" : "no_paged") << ')';
    return os.str();
}

nlohmann::json MemoryBreakdown::to_json() const {
    return {{"weights", weights},       {"master", master},
            {"optimizer_states", optimizer_states}, {"gradients", gradients},
            {"activations", activations}, {"transient_peak", transient_peak},
            {"total", total},           {"feasible", feasible}};
}

MemoryBreakdown memory_estimate(const RunConfigPoint& cfg, const HardwareSpec& hw, const PlannerCoefficients& c) {
    hw.validate();
    const double P = cfg.model.param_count;
    const bool multi = hw.gpu_count > 1;
    const double G = static_cast<double>(hw.gpu_count);
    const bool mixed = cfg.precision == Precision::Mixed;

    MemoryBreakdown m;
    m.weights = P * (mixed ? c.mixed_weights : c.pure_weights);
    m.master = mixed ? P * c.mixed_master : 0.0;
    m.optimizer_states = P * (mixed ? c.mixed_optimizer : c.pure_optimizer);
    const double grad_bytes = mixed ? c.mixed_grads : c.pure_grads;
    m.gradients = P * grad_bytes;
    // One optimizer-state-format parameter buffer during the update.
    m.transient_peak = P * (mixed ? c.mixed_optimizer : c.pure_optimizer) / 2.0;

    if (multi) {
        m.gradients /= G;
        m.optimizer_states /= G;
        m.master /= G;
        m.transient_peak /= G;
        if (cfg.sharding == Sharding::Full) m.weights /= G;
        // Accumulating without syncing keeps a full unsharded gradient.
        if (cfg.accum_sync == AccumSync::NoSync) m.gradients += P * grad_bytes;
    }
    if (cfg.paged_optimizer) m.transient_peak = 0.0;

    const double coeff = cfg.act_ckpt ? c.c_ckpt : c.c_act;
    m.activations = static_cast<double>(cfg.micro_batch) * static_cast<double>(cfg.model.context_length) *
                    static_cast<double>(cfg.model.d_model) * static_cast<double>(cfg.model.n_layers) * coeff *
                    c.forward_bytes;
    if (P == 0.0) m.activations = 0.0;

    m.total = m.weights + m.master + m.optimizer_states + m.gradients + m.activations + m.transient_peak;
    m.feasible = m.total <= hw.per_gpu_memory;
    return m;
}

double time_estimate(const RunConfigPoint& cfg, const HardwareSpec& hw, const PlannerCoefficients& c) {
    if (!memory_estimate(cfg, hw, c).feasible) {
        throw std::invalid_argument("time_estimate: configuration " + cfg.tuple() + " does not fit in memory");
    }
    double t = 1.0;
    if (cfg.act_ckpt) t *= 1.0 + c.r_ckpt;
    if (cfg.accum_sync == AccumSync::Sync) t *= 1.0 + c.r_sync;
    if (cfg.paged_optimizer) t *= 1.0 + c.r_paged;
    if (cfg.precision == Precision::Mixed) t *= 1.0 + c.r_master;
    if (hw.gpu_count > 1 && cfg.sharding == Sharding::Full) t *= 1.0 + hw.interconnect_penalty;
    return t;
}

std::vector<RunConfigPoint> enumerate_space(Precision precision, const ModelShape& model, std::size_t gpu_count) {
    const bool multi = gpu_count > 1;
    const std::vector<Sharding> shardings =
        multi ? std::vector<Sharding>{Sharding::Full, Sharding::GradOp} : std::vector<Sharding>{Sharding::NotApplicable};
    const std::vector<AccumSync> syncs = multi ? std::vector<AccumSync>{AccumSync::Sync, AccumSync::NoSync}
                                               : std::vector<AccumSync>{AccumSync::NotApplicable};
    std::vector<RunConfigPoint> out;
    for (std::size_t mb : {1, 2, 4, 8}) {
        for (bool ckpt : {true, false}) {
            for (Sharding sh : shardings) {
                for (AccumSync sy : syncs) {
                    for (bool paged : {true, false}) {
                        out.push_back({precision, mb, ckpt, sh, sy, paged, model});
                    }
                }
            }
        }
    }
    return out;
}

bool more_frugal_or_equal(const RunConfigPoint& q, const RunConfigPoint& p) {
    if (q.precision != p.precision || !(q.model == p.model)) return false;
    if (q.micro_batch > p.micro_batch) return false;
    if (!q.act_ckpt && p.act_ckpt) return false;
    if (q.sharding != p.sharding && !(q.sharding == Sharding::Full && p.sharding == Sharding::GradOp)) return false;
    if (q.accum_sync != p.accum_sync && !(q.accum_sync == AccumSync::Sync && p.accum_sync == AccumSync::NoSync)) {
        return false;
    }
    if (!q.paged_optimizer && p.paged_optimizer) return false;
    return true;
}

const PlanEntry& PlanResult::best() const {
    if (ranked.empty()) throw std::logic_error("PlanResult::best: no feasible configuration");
    return ranked.front();
}

PlanResult best_config(Precision precision, const ModelShape& model, const HardwareSpec& hw,
                       const PlannerCoefficients& c, bool prune) {
    hw.validate();
    PlanResult res;
    std::vector<RunConfigPoint> oom;
    std::vector<std::size_t> order;
    for (const RunConfigPoint& p : enumerate_space(precision, model, hw.gpu_count)) {
        PlanEntry e;
        e.point = p;
        const bool dominated =
            prune && std::any_of(oom.begin(), oom.end(), [&](const RunConfigPoint& q) { return more_frugal_or_equal(q, p); });
        if (dominated) {
            e.status = PlanStatus::Pruned;
        } else {
            e.memory = memory_estimate(p, hw, c);
            if (e.memory.feasible) {
                e.time = time_estimate(p, hw, c);
            } else {
                e.status = PlanStatus::OutOfMemory;
                oom.push_back(p);
            }
        }
        if (e.status == PlanStatus::Feasible) order.push_back(res.all.size());
        res.all.push_back(e);
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (res.all[a].time != res.all[b].time) return res.all[a].time < res.all[b].time;
        return a > b;
    });
    for (std::size_t i : order) res.ranked.push_back(res.all[i]);
    return res;
}

nlohmann::json PlanResult::to_json() const {
    auto entry_json = [](const PlanEntry& e) {
        nlohmann::json j{{"precision", to_string(e.point.precision)},
                         {"micro_batch", e.point.micro_batch},
                         {"act_ckpt", e.point.act_ckpt},
                         {"sharding", to_string(e.point.sharding)},
                         {"accum_sync", to_string(e.point.accum_sync)},
                         {"paged_optimizer", e.point.paged_optimizer},
                         {"tuple", e.point.tuple()},
                         {"status", to_string(e.status)}};
        if (e.status != PlanStatus::Pruned) j["memory"] = e.memory.to_json();
        if (e.status == PlanStatus::Feasible) j["relative_time"] = e.time;
        return j;
    };
    nlohmann::json j;
    j["ranked"] = nlohmann::json::array();
    for (const auto& e : ranked) j["ranked"].push_back(entry_json(e));
    j["all"] = nlohmann::json::array();
    for (const auto& e : all) j["all"].push_back(entry_json(e));
    j["best"] = ranked.empty() ? nlohmann::json("OOM") : nlohmann::json(ranked.front().point.tuple());
    return j;
}

std::string PlanResult::ranking_csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "rank,precision,micro_batch,act_ckpt,sharding,accum_sync,paged_optimizer,relative_time,total_bytes\n";
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        const auto& e = ranked[i];
        os << i + 1 << ',' << to_string(e.point.precision) << ',' << e.point.micro_batch << ','
           << (e.point.act_ckpt ? "yes" : "no") << ',' << to_string(e.point.sharding) << ','
           << to_string(e.point.accum_sync) << ',' << (e.point.paged_optimizer ? "paged" : "no_paged") << ','
           << e.time << ',' << e.memory.total << '\n';
    }
    return os.str();
}

}  // namespace budgetlab
