// SPDX-License-Identifier: Apache-2.0
//
// A tiny decoder-only language model with hand-written reverse-mode
// gradients, executed under an emulated precision policy.
//
// Architecture (single head, no positional encoding):
//   embed -> n_layers x [RMSNorm -> causal attention -> residual
//                        -> RMSNorm -> SiLU MLP -> residual]
//         -> RMSNorm -> untied unembedding -> softmax
//
// Every primitive op (matmul, add, activation) rounds its output to the
// policy's forward format; dot-product accumulation stays in double.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "budgetlab/numerics.h"

namespace budgetlab {

enum class LayerKind { RMSNorm, Embedding, Linear, Unembedding };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& s);

/// Storage format of every piece of training state.
struct PrecisionPolicy {
    FloatFormat weights_fmt = kBF16;
    FloatFormat grads_fmt = kBF16;
    FloatFormat optimizer_state_fmt = kBF16;
    bool master_weights = false;
    FloatFormat forward_fmt = kBF16;
    /// RMSNorm mean/rsqrt and the output softmax run unrounded.
    bool high_precision_islands = true;

    /// Everything in bfloat16, no master copy.
    static PrecisionPolicy pure_bf16();
    /// bfloat16 compute with float32 optimizer state and master weights.
    static PrecisionPolicy mixed_bf16();
    /// No rounding anywhere. With master_weights set, the "mixed" variant.
    static PrecisionPolicy wide(bool master_weights = false);
    /// "pure", "mixed" or "wide".
    static PrecisionPolicy from_name(const std::string& name);

    void validate() const;

    friend bool operator==(const PrecisionPolicy&, const PrecisionPolicy&) = default;
};

struct ModelConfig {
    std::size_t vocab_size = 512;
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t d_ff = 256;
    std::size_t n_heads = 1;
    std::size_t context_length = 64;
    double rmsnorm_eps = 1e-5;

    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct Parameter {
    std::string name;
    LayerKind kind = LayerKind::Linear;
    std::size_t rows = 0;
    std::size_t cols = 1;
    std::vector<double> values;
    std::optional<std::vector<double>> init_snapshot;

    std::size_t size() const { return values.size(); }
};

/// The model's parameters in a fixed order, plus a generation counter that
/// every mutation bumps so stale forward tapes can be detected.
class ParameterSet {
public:
    ParameterSet() = default;
    explicit ParameterSet(ModelConfig config);

    const ModelConfig& config() const { return config_; }
    std::vector<Parameter>& params() { return params_; }
    const std::vector<Parameter>& params() const { return params_; }

    Parameter& operator[](std::size_t i) { return params_[i]; }
    const Parameter& operator[](std::size_t i) const { return params_[i]; }
    std::size_t size() const { return params_.size(); }

    std::size_t index_of(const std::string& name) const;
    Parameter& at(const std::string& name) { return params_[index_of(name)]; }
    const Parameter& at(const std::string& name) const { return params_[index_of(name)]; }

    // Fixed slot layout.
    static std::size_t embed_slot() { return 0; }
    static std::size_t layer_slot(std::size_t layer, std::size_t offset) { return 1 + layer * 8 + offset; }
    std::size_t final_norm_slot() const { return 1 + config_.n_layers * 8; }
    std::size_t unembed_slot() const { return 2 + config_.n_layers * 8; }

    std::uint64_t generation() const { return generation_; }
    void bump_generation() { ++generation_; }

    /// Records the current values as the change-report baseline.
    void snapshot_init();

    std::size_t parameter_count() const;

private:
    ModelConfig config_;
    std::vector<Parameter> params_;
    std::uint64_t generation_ = 0;
};

// Offsets inside one transformer layer.
enum LayerOffset : std::size_t {
    kAttnNorm = 0, kWq = 1, kWk = 2, kWv = 3, kWo = 4, kMlpNorm = 5, kWUp = 6, kWDown = 7
};

/// Linear/Embedding/Unembedding ~ Normal(0, 0.02) rounded to weights_fmt,
/// RMSNorm gains exactly 1. Each tensor draws from its own sub-stream of seed.
ParameterSet init_model(const ModelConfig& cfg, std::uint64_t seed, const FloatFormat& weights_fmt = kBF16);

/// Rounds every stored parameter to fmt (used when a policy changes).
void quantize_parameters(ParameterSet& params, const FloatFormat& fmt);

/// y_i = gain_i * x_i / sqrt(mean(x^2) + eps), rounded to forward_fmt.
std::vector<double> rmsnorm(std::span<const double> x, std::span<const double> gain, double eps,
                            const PrecisionPolicy& policy);

struct RmsNormGrad {
    std::vector<double> dx;
    std::vector<double> dgain;
};

/// Unrounded reverse pass of rmsnorm for upstream gradient dy.
RmsNormGrad rmsnorm_backward(std::span<const double> x, std::span<const double> gain, double eps,
                             std::span<const double> dy);

/// Numerically stable softmax in double.
std::vector<double> softmax(std::span<const double> logits);

// ---------------------------------------------------------------------------
// Packing

enum class PackingMode { EosConcat, BosMasked };

std::string to_string(PackingMode mode);
PackingMode packing_mode_from_string(const std::string& s);

struct SpecialIds {
    std::int32_t bos = 1;
    std::int32_t eos = 2;
    std::int32_t pad = 3;
};

struct PackedBlock {
    std::vector<std::int32_t> token_ids;
    /// Half-open [start, end) spans, ordered, disjoint and covering the
    /// block. The trailing padding (if any) is a span of its own.
    std::vector<std::pair<std::size_t, std::size_t>> document_spans;
    PackingMode packing_mode = PackingMode::EosConcat;
    /// Positions at or beyond this index are padding.
    std::size_t valid_length = 0;

    std::size_t size() const { return token_ids.size(); }
    /// Span index of each position.
    std::vector<std::size_t> span_index() const;
};

/// Greedy stream packing into blocks of context_length tokens.
///
/// EosConcat joins documents with an EOS between neighbours; BosMasked
/// prepends a BOS to each document. Documents longer than the remaining room
/// spill into the next block, and the final partial block is padded.
std::vector<PackedBlock> pack_documents(const std::vector<std::vector<std::int32_t>>& docs, PackingMode mode,
                                        std::size_t context_length, const SpecialIds& ids = {});

/// Row-major T x T matrix; entry (i, j) is true when query i may attend to
/// key j: causal, and within one document span in BosMasked mode.
struct AttentionMask {
    std::size_t n = 0;
    std::vector<char> allowed;

    bool operator()(std::size_t i, std::size_t j) const { return allowed[i * n + j] != 0; }
};

AttentionMask build_attention_mask(const PackedBlock& block);

/// Positions t whose next token t+1 is a training target.
std::vector<char> target_positions(const PackedBlock& block);

// ---------------------------------------------------------------------------
// Forward / backward

struct LayerCache {
    std::vector<double> h_in;       // T x D
    std::vector<double> inv_rms1;   // T
    std::vector<double> n1;         // T x D
    std::vector<double> q, k, v;    // T x D
    std::vector<double> probs;      // T x T
    std::vector<double> ctx;        // T x D
    std::vector<double> h_mid;      // T x D
    std::vector<double> inv_rms2;   // T
    std::vector<double> n2;         // T x D
    std::vector<double> up;         // T x F
    std::vector<double> act;        // T x F
};

struct ForwardTape {
    const ParameterSet* params = nullptr;
    std::uint64_t generation = 0;
    PrecisionPolicy policy;
    std::vector<std::int32_t> tokens;
    AttentionMask mask;
    std::vector<LayerCache> layers;
    std::vector<double> h_final;    // T x D
    std::vector<double> inv_rms_f;  // T
    std::vector<double> nf;         // T x D
    /// Positions with a target, and their output distributions (V each).
    std::vector<std::size_t> target_pos;
    std::vector<std::int32_t> target_ids;
    std::vector<double> out_probs;
};

struct ForwardResult {
    double nll_sum = 0.0;
    std::size_t token_count = 0;
    /// Per-position loss (0 where there is no target).
    std::vector<double> position_nll;
    ForwardTape tape;
};

ForwardResult forward_loss(const ParameterSet& params, const PackedBlock& block, const PrecisionPolicy& policy);

/// One gradient buffer per parameter, same order as the ParameterSet.
struct GradientSet {
    std::vector<std::vector<double>> grads;

    static GradientSet zeros_like(const ParameterSet& params);
    void add(const GradientSet& other);
    void scale(double factor);
    double global_norm() const;
    bool all_finite() const;
};

/// Gradients of nll_sum with respect to every parameter, rounded to the
/// policy's gradient format. Throws if the parameters changed since the
/// forward pass.
GradientSet backward(const ForwardTape& tape, const PrecisionPolicy& policy);

}  // namespace budgetlab
