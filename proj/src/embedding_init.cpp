// SPDX-License-Identifier: Apache-2.0

#include "budgetlab/embedding_init.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <unordered_map>

#include "budgetlab/rng.h"

namespace budgetlab {

std::string to_string(InitMethodKind kind) {
    switch (kind) {
        case InitMethodKind::NormalFixed: return "normal_fixed";
        case InitMethodKind::FittedNormal: return "fitted_normal";
        case InitMethodKind::RandomAssign: return "random_assign";
        case InitMethodKind::OverlapHeuristic: return "overlap_heuristic";
        case InitMethodKind::FocusLike: return "focus_like";
    }
    return "unknown";
}

InitMethodKind init_method_from_string(const std::string& s) {
    for (auto k : {InitMethodKind::NormalFixed, InitMethodKind::FittedNormal, InitMethodKind::RandomAssign,
                   InitMethodKind::OverlapHeuristic, InitMethodKind::FocusLike}) {
        if (to_string(k) == s) return k;
    }
    throw std::invalid_argument("unknown init method '" + s +
                                "' (expected normal_fixed, fitted_normal, random_assign, overlap_heuristic "
                                "or focus_like)");
}

bool AuxEmbeddings::has(std::int32_t id) const {
    return id >= 0 && static_cast<std::size_t>(id) < vectors.size() && !vectors[static_cast<std::size_t>(id)].empty();
}

double AuxEmbeddings::cosine(std::int32_t a, std::int32_t b) const {
    if (!has(a) || !has(b)) throw std::out_of_range("AuxEmbeddings::cosine: token without a vector");
    const auto& x = vectors[static_cast<std::size_t>(a)];
    const auto& y = vectors[static_cast<std::size_t>(b)];
    return std::inner_product(x.begin(), x.end(), y.begin(), 0.0);
}

AuxEmbeddings train_aux_embeddings(const std::vector<std::vector<std::int32_t>>& corpus, std::size_t vocab_size,
                                   std::size_t window, std::size_t dim, std::uint64_t seed) {
    if (window < 1) throw std::invalid_argument("train_aux_embeddings: window must be >= 1");
    const std::size_t V = vocab_size;
    std::vector<std::unordered_map<std::int32_t, double>> counts(V);
    for (const auto& doc : corpus) {
        for (std::size_t i = 0; i < doc.size(); ++i) {
            const auto a = doc[i];
            if (a < 0 || static_cast<std::size_t>(a) >= V) {
                throw std::invalid_argument("train_aux_embeddings: token id outside vocabulary");
            }
            const std::size_t lo = i >= window ? i - window : 0;
            const std::size_t hi = std::min(doc.size(), i + window + 1);
            for (std::size_t j = lo; j < hi; ++j) {
                if (j != i) counts[static_cast<std::size_t>(a)][doc[j]] += 1.0;
            }
        }
    }
    std::vector<double> row_sum(V, 0.0);
    double total = 0.0;
    for (std::size_t a = 0; a < V; ++a) {
        for (const auto& [c, n] : counts[a]) row_sum[a] += n;
        total += row_sum[a];
    }

    AuxEmbeddings aux;
    aux.window = window;
    aux.dim = dim;
    aux.vectors.resize(V);
    std::vector<double> projection;
    if (dim > 0) {
        Rng rng(derive_seed(seed, "aux-projection"));
        std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
        projection.resize(V * dim);
        for (double& x : projection) x = n(rng);
    }
    for (std::size_t a = 0; a < V; ++a) {
        if (row_sum[a] == 0.0) continue;
        std::vector<double> vec(dim > 0 ? dim : V, 0.0);
        for (const auto& [c, n] : counts[a]) {
            // row_sum doubles as the context marginal: the window is symmetric.
            const double pmi = std::log(n * total / (row_sum[a] * row_sum[static_cast<std::size_t>(c)]));
            if (pmi <= 0.0) continue;
            if (dim == 0) {
                vec[static_cast<std::size_t>(c)] = pmi;
            } else {
                const double* p = &projection[static_cast<std::size_t>(c) * dim];
                for (std::size_t k = 0; k < dim; ++k) vec[k] += pmi * p[k];
            }
        }
        const double norm = std::sqrt(std::inner_product(vec.begin(), vec.end(), vec.begin(), 0.0));
        if (norm == 0.0) continue;
        for (double& x : vec) x /= norm;
        aux.vectors[a] = std::move(vec);
    }
    return aux;
}

namespace {

struct Moments {
    double mean = 0.0;
    double std = 0.0;
};

Moments pooled_moments(const std::vector<double>& v) {
    Moments m;
    if (v.empty()) return m;
    for (double x : v) m.mean += x;
    m.mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(v.size()));
    return m;
}

}  // namespace

InitResult init_embeddings(const InitMethod& method, const std::vector<std::string>& old_vocab,
                           const std::vector<double>& old_E, std::size_t dim,
                           const std::vector<std::string>& new_vocab, std::uint64_t seed, const AuxEmbeddings* aux) {
    if (dim == 0) throw std::invalid_argument("init_embeddings: dim must be >= 1");
    if (old_E.size() != old_vocab.size() * dim) {
        throw std::invalid_argument("init_embeddings: old matrix has " + std::to_string(old_E.size()) +
                                    " values, expected " + std::to_string(old_vocab.size()) + " x " +
                                    std::to_string(dim));
    }
    if (method.kind == InitMethodKind::FocusLike && aux == nullptr) {
        throw std::invalid_argument("init_embeddings: the focus_like method needs auxiliary embeddings");
    }
    const std::size_t n_new = new_vocab.size();
    InitResult res;
    res.rows = n_new;
    res.cols = dim;
    res.values.assign(n_new * dim, 0.0);
    Rng rng(derive_seed(seed, "init-method"));

    const Moments fitted = pooled_moments(old_E);
    auto fill_normal = [&](std::size_t row, double mean, double sd) {
        std::normal_distribution<double> n(mean, sd);
        for (std::size_t d = 0; d < dim; ++d) res.values[row * dim + d] = n(rng);
    };
    auto copy_row = [&](std::size_t row, std::size_t old_row) {
        std::copy_n(old_E.begin() + static_cast<std::ptrdiff_t>(old_row * dim), dim,
                    res.values.begin() + static_cast<std::ptrdiff_t>(row * dim));
    };

    std::unordered_map<std::string, std::size_t> old_index;
    for (std::size_t i = 0; i < old_vocab.size(); ++i) old_index.emplace(old_vocab[i], i);
    std::vector<std::ptrdiff_t> match(n_new, -1);
    for (std::size_t i = 0; i < n_new; ++i) {
        auto it = old_index.find(new_vocab[i]);
        if (it != old_index.end()) {
            match[i] = static_cast<std::ptrdiff_t>(it->second);
            ++res.overlap_count;
        }
    }

    InitMethodKind kind = method.kind;
    if (kind == InitMethodKind::FocusLike && res.overlap_count == 0) {
        kind = InitMethodKind::OverlapHeuristic;
        res.fell_back = true;
    }

    switch (kind) {
        case InitMethodKind::NormalFixed:
            for (std::size_t i = 0; i < n_new; ++i) fill_normal(i, 0.0, method.normal_std);
            break;
        case InitMethodKind::FittedNormal:
            for (std::size_t i = 0; i < n_new; ++i) fill_normal(i, fitted.mean, fitted.std);
            break;
        case InitMethodKind::RandomAssign: {
            std::vector<std::size_t> new_order(n_new), old_order(old_vocab.size());
            std::iota(new_order.begin(), new_order.end(), 0);
            std::iota(old_order.begin(), old_order.end(), 0);
            std::shuffle(new_order.begin(), new_order.end(), rng);
            std::shuffle(old_order.begin(), old_order.end(), rng);
            for (std::size_t k = 0; k < n_new; ++k) {
                if (k < old_order.size()) {
                    copy_row(new_order[k], old_order[k]);
                } else {
                    fill_normal(new_order[k], 0.0, method.normal_std);
                }
            }
            break;
        }
        case InitMethodKind::OverlapHeuristic:
            for (std::size_t i = 0; i < n_new; ++i) {
                if (match[i] >= 0) {
                    copy_row(i, static_cast<std::size_t>(match[i]));
                } else {
                    fill_normal(i, fitted.mean, fitted.std);
                }
            }
            break;
        case InitMethodKind::FocusLike: {
            if (method.top_k < 1 || !(method.temperature > 0.0)) {
                throw std::invalid_argument("init_embeddings: top_k must be >= 1 and temperature > 0");
            }
            std::vector<std::size_t> anchors;
            for (std::size_t i = 0; i < n_new; ++i) {
                if (match[i] >= 0 && aux->has(static_cast<std::int32_t>(i))) anchors.push_back(i);
            }
            std::vector<std::pair<double, std::size_t>> sims;
            for (std::size_t i = 0; i < n_new; ++i) {
                if (match[i] >= 0) {
                    copy_row(i, static_cast<std::size_t>(match[i]));
                    continue;
                }
                if (!aux->has(static_cast<std::int32_t>(i)) || anchors.empty()) {
                    fill_normal(i, fitted.mean, fitted.std);
                    ++res.aux_missing;
                    continue;
                }
                sims.clear();
                for (std::size_t a : anchors) {
                    sims.emplace_back(aux->cosine(static_cast<std::int32_t>(i), static_cast<std::int32_t>(a)), a);
                }
                const std::size_t k = std::min(method.top_k, sims.size());
                std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(k), sims.end(),
                                  [](const auto& x, const auto& y) {
                                      return x.first != y.first ? x.first > y.first : x.second < y.second;
                                  });
                const double top = sims[0].first;
                double z = 0.0;
                std::vector<double> w(k);
                for (std::size_t j = 0; j < k; ++j) {
                    w[j] = std::exp((sims[j].first - top) / method.temperature);
                    z += w[j];
                }
                double* row = &res.values[i * dim];
                for (std::size_t j = 0; j < k; ++j) {
                    const double* src = &old_E[static_cast<std::size_t>(match[sims[j].second]) * dim];
                    for (std::size_t d = 0; d < dim; ++d) row[d] += (w[j] / z) * src[d];
                }
            }
            break;
        }
    }
    return res;
}

std::vector<std::string> vocabulary_strings(const Tokenizer& tok) {
    std::vector<std::string> out;
    out.reserve(tok.size());
    for (std::size_t i = 0; i < tok.size(); ++i) out.push_back(tok.token_string(static_cast<std::int32_t>(i)));
    return out;
}

ParameterSet swap_vocabulary(const ParameterSet& model, const Tokenizer& old_tok, const Tokenizer& new_tok,
                             const InitMethod& method, std::uint64_t seed, const AuxEmbeddings* aux,
                             const FloatFormat& weights_fmt, SwapReport* report) {
    if (model.config().vocab_size != old_tok.size()) {
        throw std::invalid_argument("swap_vocabulary: model vocabulary (" + std::to_string(model.config().vocab_size) +
                                    ") does not match the old tokenizer (" + std::to_string(old_tok.size()) + ")");
    }
    ModelConfig cfg = model.config();
    cfg.vocab_size = new_tok.size();
    ParameterSet out(cfg);
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (out[i].kind == LayerKind::Embedding || out[i].kind == LayerKind::Unembedding) continue;
        out[i].values = model[i].values;
    }
    const auto old_vocab = vocabulary_strings(old_tok);
    const auto new_vocab = vocabulary_strings(new_tok);
    const std::size_t D = cfg.d_model;
    SwapReport local;
    local.input = init_embeddings(method, old_vocab, model[ParameterSet::embed_slot()].values, D, new_vocab,
                                  mix_seed(seed, 1), aux);
    local.output = init_embeddings(method, old_vocab, model[model.unembed_slot()].values, D, new_vocab,
                                   mix_seed(seed, 2), aux);
    out[ParameterSet::embed_slot()].values = local.input.values;
    out[out.unembed_slot()].values = local.output.values;
    for (std::size_t slot : {ParameterSet::embed_slot(), out.unembed_slot()}) {
        for (double& v : out[slot].values) v = quantize(v, weights_fmt);
    }
    if (report) *report = std::move(local);
    return out;
}

void embedding_warmup(ParameterSet& model, const std::vector<PackedBlock>& blocks, const WarmupConfig& cfg) {
    if (cfg.steps == 0) return;
    LoopConfig loop;
    loop.adamw = cfg.adamw;
    loop.policy = cfg.policy;
    loop.batch_size = cfg.batch_size;
    loop.data_seed = derive_seed(cfg.seed, "embedding-warmup");
    loop.constant_lr = cfg.lr;
    loop.trainable = embeddings_only_mask(model);
    OptimizerState state = init_optimizer_state(model, cfg.policy);
    run_training(model, state, blocks, loop, 1, cfg.steps);
}

}  // namespace budgetlab
