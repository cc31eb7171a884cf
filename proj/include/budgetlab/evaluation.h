// SPDX-License-Identifier: Apache-2.0
//
// Tokenizer-independent loss metrics and weight-magnitude reports.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "budgetlab/model.h"
#include "budgetlab/tokenizer.h"

namespace budgetlab {

struct EvalChunk {
    std::string id;
    std::string text;
};

struct EvalReport {
    double nll_sum = 0.0;
    std::size_t token_count = 0;
    std::size_t word_count = 0;
    double nll_per_token = 0.0;
    double nll_per_word = 0.0;
    std::vector<std::string> chunk_ids;

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
    /// Header plus one data row.
    std::string to_csv() const;
};

/// Scores a chunk given its token ids. Every id is predicted once: the
/// sequence is prefixed with BOS and cut into windows of at most
/// context_length tokens that overlap by one position.
double chunk_nll(const ParameterSet& model, const std::vector<std::int32_t>& ids, const PrecisionPolicy& policy,
                 std::int32_t bos_id = SpecialIds{}.bos);

/// Encodes each chunk with `tok`, sums the next-token NLL and normalizes by
/// tokens and by whitespace-split words of the raw text.
/// Throws std::invalid_argument for an empty chunk list, a chunk without
/// words or tokens, or a vocabulary-size mismatch.
EvalReport word_normalized_nll(const ParameterSet& model, const Tokenizer& tok, const std::vector<EvalChunk>& chunks,
                               const PrecisionPolicy& policy);

/// Same reduction over pre-tokenized chunks (ids[i] belongs to chunks[i]).
EvalReport word_normalized_nll(const ParameterSet& model, const std::vector<std::vector<std::int32_t>>& ids,
                               const std::vector<EvalChunk>& chunks, const PrecisionPolicy& policy);

struct HistogramSpec {
    std::size_t bins = 64;
    double lo = 1e-6;
    double hi = 10.0;

    void validate() const;
    /// bins + 1 log-spaced edges from lo to hi.
    std::vector<double> edges() const;
    /// -1 for underflow (|w| < lo, zeros included), bins for overflow.
    long bin_of(double abs_w) const;
};

struct WeightGroupStats {
    std::size_t count = 0;
    double mean_abs = 0.0;
    std::size_t underflow = 0;
    std::vector<std::size_t> histogram;
    std::size_t overflow = 0;
    /// Present after param_change.
    bool has_change = false;
    double mean_abs_change = 0.0;
};

/// Index 0 is the RMSNorm group, index 1 everything else.
struct WeightReport {
    static constexpr std::array<const char*, 2> kGroupNames{"rmsnorm", "other"};

    HistogramSpec spec;
    std::array<WeightGroupStats, 2> groups;

    const WeightGroupStats& rmsnorm() const { return groups[0]; }
    const WeightGroupStats& other() const { return groups[1]; }

    nlohmann::json to_json() const;
    /// One row per (group, bin) including underflow/overflow.
    std::string histogram_csv() const;
    /// One row per group.
    std::string summary_csv() const;
};

std::size_t weight_group(LayerKind kind);

/// `values` overrides the stored parameter values (e.g. master weights);
/// it must match the parameter shapes when non-empty.
WeightReport weight_histogram(const ParameterSet& params, const HistogramSpec& spec = {},
                              const std::vector<std::vector<double>>& values = {});

/// Histogram plus mean |w - w_init| per group, against each parameter's
/// init_snapshot. Throws std::invalid_argument if a snapshot is missing.
WeightReport param_change(const ParameterSet& params, const std::vector<std::vector<double>>& values = {},
                          const HistogramSpec& spec = {});

}  // namespace budgetlab
