// SPDX-License-Identifier: Apache-2.0

#include "budgetlab/schedule.h"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace budgetlab {

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::CosineFloor ? "cosine_floor" : "infinite"; }

ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "cosine_floor" || s == "cosine") return ScheduleKind::CosineFloor;
    if (s == "infinite") return ScheduleKind::Infinite;
    throw std::invalid_argument("unknown schedule kind '" + s + "' (expected cosine_floor or infinite)");
}

ScheduleSpec ScheduleSpec::cosine_floor(std::uint64_t total_steps, double lr_peak, double end_lr, double warmup_frac) {
    ScheduleSpec s;
    s.kind = ScheduleKind::CosineFloor;
    s.total_steps = total_steps;
    s.lr_peak = lr_peak;
    s.cosine_end_lr = end_lr;
    s.warmup_frac = warmup_frac;
    return s;
}

ScheduleSpec ScheduleSpec::infinite(std::uint64_t total_steps, double lr_peak, double plateau_lr, double final_lr) {
    ScheduleSpec s;
    s.kind = ScheduleKind::Infinite;
    s.total_steps = total_steps;
    s.lr_peak = lr_peak;
    s.cosine_end_lr = plateau_lr;
    s.final_lr = final_lr;
    return s;
}

void ScheduleSpec::validate() const {
    if (total_steps < 1) throw std::invalid_argument("ScheduleSpec: total_steps must be >= 1");
    auto frac_ok = [](double f) { return f >= 0.0 && f <= 1.0; };
    if (!frac_ok(warmup_frac)) throw std::invalid_argument("ScheduleSpec: warmup_frac must lie in [0, 1]");
    if (!(lr_peak >= 0.0 && cosine_end_lr >= 0.0 && final_lr >= 0.0)) {
        throw std::invalid_argument("ScheduleSpec: learning rates must be >= 0");
    }
    if (kind == ScheduleKind::Infinite) {
        if (!frac_ok(cosine_frac) || !frac_ok(constant_frac) || !frac_ok(anneal_frac)) {
            throw std::invalid_argument("ScheduleSpec: phase fractions must lie in [0, 1]");
        }
        const double sum = warmup_frac + cosine_frac + constant_frac + anneal_frac;
        if (std::abs(sum - 1.0) > 1.0 / static_cast<double>(total_steps) + 1e-12) {
            throw std::invalid_argument("ScheduleSpec: phase fractions must sum to 1 (got " + std::to_string(sum) + ")");
        }
    }
}

namespace {

std::uint64_t boundary(double frac, std::uint64_t total) {
    // The small slack keeps products such as 0.61 * 1000 from flooring to 609.
    const double b = std::floor(frac * static_cast<double>(total) + 1e-9);
    return std::min<std::uint64_t>(static_cast<std::uint64_t>(b), total);
}

double cosine(double from, double to, double start, double end, double step) {
    if (end <= start) return to;
    const double p = (step - start) / (end - start);
    const double c = 0.5 * (1.0 + std::cos(std::numbers::pi * p));
    return from * c + to * (1.0 - c);
}

}  // namespace

std::vector<std::uint64_t> phase_boundaries(const ScheduleSpec& spec) {
    const std::uint64_t total = spec.total_steps;
    const std::uint64_t w = boundary(spec.warmup_frac, total);
    if (spec.kind == ScheduleKind::CosineFloor) return {w, total};
    const std::uint64_t c = std::max(w, boundary(spec.warmup_frac + spec.cosine_frac, total));
    const std::uint64_t k = std::max(c, boundary(spec.warmup_frac + spec.cosine_frac + spec.constant_frac, total));
    return {w, c, k, total};
}

double phase_lr(const ScheduleSpec& spec, std::size_t phase, double step) {
    const auto b = phase_boundaries(spec);
    if (phase >= b.size()) throw std::out_of_range("phase_lr: no such phase");
    const double w = static_cast<double>(b[0]);
    if (phase == 0) return w == 0.0 ? spec.lr_peak : spec.lr_peak * (step / w);
    if (phase == 1) return cosine(spec.lr_peak, spec.cosine_end_lr, w, static_cast<double>(b[1]), step);
    if (phase == 2) return spec.cosine_end_lr;
    const double k = static_cast<double>(b[2]);
    const double t = static_cast<double>(b[3]);
    if (t <= k) return spec.final_lr;
    const double p = (step - k) / (t - k);
    return spec.cosine_end_lr * (1.0 - p) + spec.final_lr * p;
}

double lr_at(const ScheduleSpec& spec, std::uint64_t step) {
    spec.validate();
    if (step > spec.total_steps) {
        throw std::out_of_range("lr_at: step " + std::to_string(step) + " beyond total_steps " +
                                std::to_string(spec.total_steps));
    }
    const auto b = phase_boundaries(spec);
    std::size_t phase = 0;
    while (phase + 1 < b.size() && step > b[phase]) ++phase;
    return phase_lr(spec, phase, static_cast<double>(step));
}

}  // namespace budgetlab
