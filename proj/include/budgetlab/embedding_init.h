// SPDX-License-Identifier: Apache-2.0
//
// Re-initialization of the embedding and unembedding matrices after a
// tokenizer swap, plus the auxiliary co-occurrence space used by the
// neighbour-weighted method.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "budgetlab/model.h"
#include "budgetlab/tokenizer.h"
#include "budgetlab/trainer.h"

namespace budgetlab {

enum class InitMethodKind { NormalFixed, FittedNormal, RandomAssign, OverlapHeuristic, FocusLike };

std::string to_string(InitMethodKind kind);
InitMethodKind init_method_from_string(const std::string& s);

struct InitMethod {
    InitMethodKind kind = InitMethodKind::FocusLike;
    double normal_std = 0.02;
    // Neighbour-weighted method knobs.
    std::size_t top_k = 10;
    double temperature = 0.1;
};

/// Dense, length-normalized PPMI vectors for the new vocabulary.
struct AuxEmbeddings {
    std::size_t window = 0;
    /// 0 means full PPMI rows (one column per vocabulary entry).
    std::size_t dim = 0;
    /// Indexed by token id; empty for tokens absent from the corpus.
    std::vector<std::vector<double>> vectors;

    bool has(std::int32_t id) const;
    /// Cosine similarity of two present tokens (vectors are unit length).
    double cosine(std::int32_t a, std::int32_t b) const;
};

/// PPMI over symmetric windows of +-window tokens. With dim > 0 rows are
/// projected by a seeded Gaussian matrix before normalization.
AuxEmbeddings train_aux_embeddings(const std::vector<std::vector<std::int32_t>>& corpus, std::size_t vocab_size,
                                   std::size_t window, std::size_t dim, std::uint64_t seed);

struct InitResult {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;  // rows x cols
    /// True when the neighbour method found no overlap and used the heuristic.
    bool fell_back = false;
    std::size_t overlap_count = 0;
    /// Non-overlap rows the neighbour method filled from the heuristic
    /// because they had no auxiliary vector.
    std::size_t aux_missing = 0;
};

/// new_vocab[i] is the string of new token i; old rows are matched by exact
/// string equality. Throws for FocusLike without aux.
InitResult init_embeddings(const InitMethod& method, const std::vector<std::string>& old_vocab,
                           const std::vector<double>& old_E, std::size_t dim,
                           const std::vector<std::string>& new_vocab, std::uint64_t seed,
                           const AuxEmbeddings* aux = nullptr);

std::vector<std::string> vocabulary_strings(const Tokenizer& tok);

struct SwapReport {
    InitResult input;
    InitResult output;
};

/// Returns a copy of `model` sized for `new_tok`: every non-embedding
/// parameter is carried over unchanged, and the input and output matrices
/// are initialized independently with `method`, rounded to weights_fmt.
ParameterSet swap_vocabulary(const ParameterSet& model, const Tokenizer& old_tok, const Tokenizer& new_tok,
                             const InitMethod& method, std::uint64_t seed, const AuxEmbeddings* aux,
                             const FloatFormat& weights_fmt, SwapReport* report = nullptr);

struct WarmupConfig {
    std::size_t steps = 100;
    std::size_t batch_size = 8;
    double lr = 4e-5;
    AdamWConfig adamw;
    /// With bf16-only state, lr-sized steps on 0.02-scale rows mostly vanish.
    PrecisionPolicy policy = PrecisionPolicy::mixed_bf16();
    std::uint64_t seed = 0;
};

/// Trains only the Embedding and Unembedding parameters for cfg.steps steps
/// with a fresh optimizer state; every other parameter stays bit-identical.
void embedding_warmup(ParameterSet& model, const std::vector<PackedBlock>& blocks, const WarmupConfig& cfg);

}  // namespace budgetlab
