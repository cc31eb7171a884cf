// SPDX-License-Identifier: Apache-2.0
//
// Learning-rate schedules: warmup + cosine to a floor, and the four-phase
// "infinite" schedule (warmup, cosine, constant, linear anneal).

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace budgetlab {

enum class ScheduleKind { CosineFloor, Infinite };

std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& s);

struct ScheduleSpec {
    ScheduleKind kind = ScheduleKind::CosineFloor;
    std::uint64_t total_steps = 1000;
    double warmup_frac = 0.01;
    double lr_peak = 4e-5;
    /// Floor of the cosine phase.
    double cosine_end_lr = 2e-6;
    // Infinite only.
    double cosine_frac = 0.60;
    double constant_frac = 0.25;
    double anneal_frac = 0.14;
    double final_lr = 2e-6;

    static ScheduleSpec cosine_floor(std::uint64_t total_steps, double lr_peak = 4e-5, double end_lr = 2e-6,
                                     double warmup_frac = 0.01);
    static ScheduleSpec infinite(std::uint64_t total_steps, double lr_peak = 3e-5, double plateau_lr = 1.65e-5,
                                 double final_lr = 2e-6);

    void validate() const;
};

/// Step index at which each phase ends. CosineFloor: {warmup, total};
/// Infinite: {warmup, cosine, constant, total}. Boundaries are the floors
/// of the cumulative fractions times total_steps.
std::vector<std::uint64_t> phase_boundaries(const ScheduleSpec& spec);

/// The formula of one phase evaluated at any step (used for continuity
/// checks at the boundaries).
double phase_lr(const ScheduleSpec& spec, std::size_t phase, double step);

/// Learning rate for 1-based step; step 0 is the state before training.
/// Throws when step > total_steps.
double lr_at(const ScheduleSpec& spec, std::uint64_t step);

}  // namespace budgetlab
