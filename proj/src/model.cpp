// SPDX-License-Identifier: Apache-2.0

#include "budgetlab/model.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "budgetlab/rng.h"

namespace budgetlab {

std::string to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::RMSNorm: return "rmsnorm";
        case LayerKind::Embedding: return "embedding";
        case LayerKind::Linear: return "linear";
        case LayerKind::Unembedding: return "unembedding";
    }
    return "unknown";
}

LayerKind layer_kind_from_string(const std::string& s) {
    if (s == "rmsnorm") return LayerKind::RMSNorm;
    if (s == "embedding") return LayerKind::Embedding;
    if (s == "linear") return LayerKind::Linear;
    if (s == "unembedding") return LayerKind::Unembedding;
    throw std::invalid_argument("unknown layer kind '" + s + "'");
}

PrecisionPolicy PrecisionPolicy::pure_bf16() {
    return PrecisionPolicy{kBF16, kBF16, kBF16, false, kBF16, true};
}

PrecisionPolicy PrecisionPolicy::mixed_bf16() {
    return PrecisionPolicy{kBF16, kBF16, kFP32, true, kBF16, true};
}

PrecisionPolicy PrecisionPolicy::wide(bool master_weights) {
    return PrecisionPolicy{kWide, kWide, kWide, master_weights, kWide, true};
}

PrecisionPolicy PrecisionPolicy::from_name(const std::string& name) {
    if (name == "pure" || name == "pure_bf16") return pure_bf16();
    if (name == "mixed" || name == "mixed_bf16") return mixed_bf16();
    if (name == "wide") return wide();
    throw std::invalid_argument("unknown precision policy '" + name + "' (expected pure, mixed or wide)");
}

void PrecisionPolicy::validate() const {
    weights_fmt.validate();
    grads_fmt.validate();
    optimizer_state_fmt.validate();
    forward_fmt.validate();
    if (master_weights && optimizer_state_fmt.mantissa_bits < kFP32.mantissa_bits) {
        throw std::invalid_argument("PrecisionPolicy: a master copy needs float32 (or wider) optimizer state");
    }
}

void ModelConfig::validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || d_ff < 1 || context_length < 1) {
        throw std::invalid_argument("ModelConfig: all sizes must be >= 1");
    }
    if (n_heads != 1) throw std::invalid_argument("ModelConfig: only single-head attention is supported");
    if (d_ff < d_model) throw std::invalid_argument("ModelConfig: d_ff must be >= d_model");
    if (!(rmsnorm_eps >= 0.0)) throw std::invalid_argument("ModelConfig: rmsnorm_eps must be >= 0");
}

ParameterSet::ParameterSet(ModelConfig config) : config_(config) {
    config_.validate();
    const std::size_t V = config_.vocab_size;
    const std::size_t D = config_.d_model;
    const std::size_t F = config_.d_ff;
    auto add = [&](std::string name, LayerKind kind, std::size_t rows, std::size_t cols) {
        Parameter p;
        p.name = std::move(name);
        p.kind = kind;
        p.rows = rows;
        p.cols = cols;
        p.values.assign(rows * cols, 0.0);
        params_.push_back(std::move(p));
    };
    add("embed", LayerKind::Embedding, V, D);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        const std::string prefix = "layers." + std::to_string(l) + ".";
        add(prefix + "attn_norm", LayerKind::RMSNorm, D, 1);
        add(prefix + "wq", LayerKind::Linear, D, D);
        add(prefix + "wk", LayerKind::Linear, D, D);
        add(prefix + "wv", LayerKind::Linear, D, D);
        add(prefix + "wo", LayerKind::Linear, D, D);
        add(prefix + "mlp_norm", LayerKind::RMSNorm, D, 1);
        add(prefix + "w_up", LayerKind::Linear, D, F);
        add(prefix + "w_down", LayerKind::Linear, F, D);
    }
    add("final_norm", LayerKind::RMSNorm, D, 1);
    add("unembed", LayerKind::Unembedding, V, D);
}

std::size_t ParameterSet::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (params_[i].name == name) return i;
    }
    throw std::out_of_range("no parameter named '" + name + "'");
}

void ParameterSet::snapshot_init() {
    for (auto& p : params_) p.init_snapshot = p.values;
}

std::size_t ParameterSet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
}

ParameterSet init_model(const ModelConfig& cfg, std::uint64_t seed, const FloatFormat& weights_fmt) {
    ParameterSet ps(cfg);
    for (auto& p : ps.params()) {
        if (p.kind == LayerKind::RMSNorm) {
            std::fill(p.values.begin(), p.values.end(), 1.0);
            continue;
        }
        Rng rng(derive_seed(seed, p.name));
        std::normal_distribution<double> normal(0.0, 0.02);
        for (double& v : p.values) v = quantize(normal(rng), weights_fmt);
    }
    return ps;
}

void quantize_parameters(ParameterSet& params, const FloatFormat& fmt) {
    for (auto& p : params.params()) {
        for (double& v : p.values) v = quantize(v, fmt);
    }
    params.bump_generation();
}

namespace {

struct Rounder {
    FloatFormat fmt;
    bool identity;

    explicit Rounder(const FloatFormat& f) : fmt(f), identity(f.is_carrier()) {}
    double operator()(double x) const { return identity ? x : quantize(x, fmt); }
    void apply(std::vector<double>& v) const {
        if (identity) return;
        for (double& x : v) x = quantize(x, fmt);
    }
};

// Y (T x out) = round(X (T x in) * W (in x out))
void matmul(const std::vector<double>& X, std::size_t T, std::size_t in, const std::vector<double>& W,
            std::size_t out, std::vector<double>& Y, const Rounder& r) {
    Y.assign(T * out, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        double* y = &Y[t * out];
        const double* x = &X[t * in];
        for (std::size_t i = 0; i < in; ++i) {
            const double xi = x[i];
            if (xi == 0.0) continue;
            const double* w = &W[i * out];
            for (std::size_t j = 0; j < out; ++j) y[j] += xi * w[j];
        }
    }
    r.apply(Y);
}

// dX (T x in) += dY (T x out) * W^T, unrounded
void matmul_grad_input(const std::vector<double>& dY, std::size_t T, std::size_t out, const std::vector<double>& W,
                       std::size_t in, std::vector<double>& dX) {
    for (std::size_t t = 0; t < T; ++t) {
        const double* dy = &dY[t * out];
        double* dx = &dX[t * in];
        for (std::size_t i = 0; i < in; ++i) {
            const double* w = &W[i * out];
            double acc = 0.0;
            for (std::size_t j = 0; j < out; ++j) acc += dy[j] * w[j];
            dx[i] += acc;
        }
    }
}

// dW (in x out) += X^T (T x in) * dY (T x out)
void matmul_grad_weight(const std::vector<double>& X, std::size_t T, std::size_t in, const std::vector<double>& dY,
                        std::size_t out, std::vector<double>& dW) {
    for (std::size_t t = 0; t < T; ++t) {
        const double* x = &X[t * in];
        const double* dy = &dY[t * out];
        for (std::size_t i = 0; i < in; ++i) {
            const double xi = x[i];
            if (xi == 0.0) continue;
            double* dw = &dW[i * out];
            for (std::size_t j = 0; j < out; ++j) dw[j] += xi * dy[j];
        }
    }
}

// Row-wise RMSNorm; inv receives the reciprocal RMS actually applied.
void rmsnorm_rows(const std::vector<double>& X, std::size_t T, std::size_t D, const std::vector<double>& gain,
                  double eps, const PrecisionPolicy& policy, std::vector<double>& Y, std::vector<double>& inv) {
    const Rounder r(policy.forward_fmt);
    Y.assign(T * D, 0.0);
    inv.assign(T, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        const double* x = &X[t * D];
        double* y = &Y[t * D];
        double sum_sq = 0.0;
        for (std::size_t i = 0; i < D; ++i) sum_sq += x[i] * x[i];
        if (policy.high_precision_islands) {
            const double inv_rms = 1.0 / std::sqrt(sum_sq / static_cast<double>(D) + eps);
            inv[t] = inv_rms;
            for (std::size_t i = 0; i < D; ++i) y[i] = r(gain[i] * (x[i] * inv_rms));
        } else {
            const double mean_sq = r(sum_sq / static_cast<double>(D));
            const double denom = r(std::sqrt(r(mean_sq + eps)));
            inv[t] = 1.0 / denom;
            for (std::size_t i = 0; i < D; ++i) y[i] = r(gain[i] * r(x[i] / denom));
        }
    }
}

// Accumulates dgain and writes dX (unrounded) for a row-wise RMSNorm.
void rmsnorm_rows_backward(const std::vector<double>& dY, const std::vector<double>& X, const std::vector<double>& inv,
                           std::size_t T, std::size_t D, const std::vector<double>& gain, std::vector<double>& dgain,
                           std::vector<double>& dX) {
    dX.assign(T * D, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        const double* dy = &dY[t * D];
        const double* x = &X[t * D];
        double* dx = &dX[t * D];
        const double s = inv[t];
        double dot = 0.0;
        for (std::size_t i = 0; i < D; ++i) {
            dgain[i] += dy[i] * x[i] * s;
            dot += dy[i] * gain[i] * x[i];
        }
        const double coeff = s * s * s * dot / static_cast<double>(D);
        for (std::size_t i = 0; i < D; ++i) dx[i] = s * dy[i] * gain[i] - coeff * x[i];
    }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::vector<double> rmsnorm(std::span<const double> x, std::span<const double> gain, double eps,
                            const PrecisionPolicy& policy) {
    if (x.empty()) throw std::invalid_argument("rmsnorm: empty input");
    if (gain.size() != x.size()) throw std::invalid_argument("rmsnorm: gain and input sizes differ");
    std::vector<double> X(x.begin(), x.end());
    std::vector<double> G(gain.begin(), gain.end());
    std::vector<double> Y;
    std::vector<double> inv;
    rmsnorm_rows(X, 1, X.size(), G, eps, policy, Y, inv);
    return Y;
}

RmsNormGrad rmsnorm_backward(std::span<const double> x, std::span<const double> gain, double eps,
                             std::span<const double> dy) {
    if (x.empty()) throw std::invalid_argument("rmsnorm_backward: empty input");
    if (gain.size() != x.size() || dy.size() != x.size()) {
        throw std::invalid_argument("rmsnorm_backward: size mismatch");
    }
    const std::vector<double> X(x.begin(), x.end());
    const std::vector<double> G(gain.begin(), gain.end());
    const std::vector<double> dY(dy.begin(), dy.end());
    double sum_sq = 0.0;
    for (double v : X) sum_sq += v * v;
    const std::vector<double> inv{1.0 / std::sqrt(sum_sq / static_cast<double>(X.size()) + eps)};
    RmsNormGrad out;
    out.dgain.assign(X.size(), 0.0);
    rmsnorm_rows_backward(dY, X, inv, 1, X.size(), G, out.dgain, out.dx);
    return out;
}

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> p(logits.begin(), logits.end());
    if (p.empty()) return p;
    const double m = *std::max_element(p.begin(), p.end());
    double sum = 0.0;
    for (double& v : p) {
        v = std::exp(v - m);
        sum += v;
    }
    for (double& v : p) v /= sum;
    return p;
}

ForwardResult forward_loss(const ParameterSet& params, const PackedBlock& block, const PrecisionPolicy& policy) {
    const ModelConfig& cfg = params.config();
    const std::size_t T = block.size();
    const std::size_t D = cfg.d_model;
    const std::size_t F = cfg.d_ff;
    const std::size_t V = cfg.vocab_size;
    if (T == 0) throw std::invalid_argument("forward_loss: empty block");
    for (std::int32_t id : block.token_ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= V) {
            throw std::invalid_argument("forward_loss: token id " + std::to_string(id) +
                                        " outside the model vocabulary of " + std::to_string(V));
        }
    }
    const Rounder r(policy.forward_fmt);

    ForwardResult result;
    ForwardTape& tape = result.tape;
    tape.params = &params;
    tape.generation = params.generation();
    tape.policy = policy;
    tape.tokens = block.token_ids;
    tape.mask = build_attention_mask(block);
    const AttentionMask& mask = tape.mask;

    std::vector<double> h(T * D);
    const auto& E = params[ParameterSet::embed_slot()].values;
    for (std::size_t t = 0; t < T; ++t) {
        const std::size_t id = static_cast<std::size_t>(block.token_ids[t]);
        for (std::size_t i = 0; i < D; ++i) h[t * D + i] = r(E[id * D + i]);
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(D));
    tape.layers.resize(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        LayerCache& c = tape.layers[l];
        auto W = [&](LayerOffset off) -> const std::vector<double>& {
            return params[ParameterSet::layer_slot(l, off)].values;
        };
        c.h_in = h;
        rmsnorm_rows(c.h_in, T, D, W(kAttnNorm), cfg.rmsnorm_eps, policy, c.n1, c.inv_rms1);
        matmul(c.n1, T, D, W(kWq), D, c.q, r);
        matmul(c.n1, T, D, W(kWk), D, c.k, r);
        matmul(c.n1, T, D, W(kWv), D, c.v, r);

        c.probs.assign(T * T, 0.0);
        c.ctx.assign(T * D, 0.0);
        std::vector<double> scores(T);
        for (std::size_t i = 0; i < T; ++i) {
            double m = -std::numeric_limits<double>::infinity();
            bool any = false;
            for (std::size_t j = 0; j <= i; ++j) {
                if (!mask(i, j)) continue;
                double dot = 0.0;
                for (std::size_t d = 0; d < D; ++d) dot += c.q[i * D + d] * c.k[j * D + d];
                scores[j] = r(dot * scale);
                m = std::max(m, scores[j]);
                any = true;
            }
            if (!any) continue;
            double sum = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                if (!mask(i, j)) continue;
                scores[j] = std::exp(scores[j] - m);
                sum += scores[j];
            }
            double* ctx = &c.ctx[i * D];
            for (std::size_t j = 0; j <= i; ++j) {
                if (!mask(i, j)) continue;
                const double p = r(scores[j] / sum);
                c.probs[i * T + j] = p;
                if (p == 0.0) continue;
                for (std::size_t d = 0; d < D; ++d) ctx[d] += p * c.v[j * D + d];
            }
            for (std::size_t d = 0; d < D; ++d) ctx[d] = r(ctx[d]);
        }

        std::vector<double> o;
        matmul(c.ctx, T, D, W(kWo), D, o, r);
        c.h_mid.resize(T * D);
        for (std::size_t i = 0; i < T * D; ++i) c.h_mid[i] = r(c.h_in[i] + o[i]);

        rmsnorm_rows(c.h_mid, T, D, W(kMlpNorm), cfg.rmsnorm_eps, policy, c.n2, c.inv_rms2);
        matmul(c.n2, T, D, W(kWUp), F, c.up, r);
        c.act.resize(T * F);
        for (std::size_t i = 0; i < T * F; ++i) c.act[i] = r(c.up[i] * sigmoid(c.up[i]));
        std::vector<double> down;
        matmul(c.act, T, F, W(kWDown), D, down, r);
        for (std::size_t i = 0; i < T * D; ++i) h[i] = r(c.h_mid[i] + down[i]);
    }

    tape.h_final = h;
    rmsnorm_rows(tape.h_final, T, D, params[params.final_norm_slot()].values, cfg.rmsnorm_eps, policy, tape.nf,
                 tape.inv_rms_f);

    const auto& U = params[params.unembed_slot()].values;
    const std::vector<char> targets = target_positions(block);
    result.position_nll.assign(T, 0.0);
    std::vector<double> logits(V);
    for (std::size_t t = 0; t < T; ++t) {
        if (!targets[t]) continue;
        const double* nf = &tape.nf[t * D];
        for (std::size_t v = 0; v < V; ++v) {
            const double* u = &U[v * D];
            double acc = 0.0;
            for (std::size_t d = 0; d < D; ++d) acc += nf[d] * u[d];
            logits[v] = r(acc);
        }
        const auto y = static_cast<std::size_t>(block.token_ids[t + 1]);
        const double m = *std::max_element(logits.begin(), logits.end());
        std::vector<double> p(V);
        double nll = 0.0;
        if (policy.high_precision_islands) {
            double sum = 0.0;
            for (std::size_t v = 0; v < V; ++v) {
                p[v] = std::exp(logits[v] - m);
                sum += p[v];
            }
            for (std::size_t v = 0; v < V; ++v) p[v] /= sum;
            nll = std::log(sum) - (logits[y] - m);
        } else {
            double sum = 0.0;
            for (std::size_t v = 0; v < V; ++v) {
                p[v] = r(std::exp(r(logits[v] - m)));
                sum += p[v];
            }
            sum = r(sum);
            for (std::size_t v = 0; v < V; ++v) p[v] = r(p[v] / sum);
            nll = r(r(std::log(sum)) - r(logits[y] - m));
        }
        result.position_nll[t] = nll;
        result.nll_sum += nll;
        ++result.token_count;
        tape.target_pos.push_back(t);
        tape.target_ids.push_back(static_cast<std::int32_t>(y));
        tape.out_probs.insert(tape.out_probs.end(), p.begin(), p.end());
    }
    return result;
}

GradientSet GradientSet::zeros_like(const ParameterSet& params) {
    GradientSet g;
    g.grads.reserve(params.size());
    for (const auto& p : params.params()) g.grads.emplace_back(p.size(), 0.0);
    return g;
}

void GradientSet::add(const GradientSet& other) {
    if (other.grads.size() != grads.size()) throw std::invalid_argument("GradientSet::add: shape mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (other.grads[i].size() != grads[i].size()) throw std::invalid_argument("GradientSet::add: shape mismatch");
        for (std::size_t k = 0; k < grads[i].size(); ++k) grads[i][k] += other.grads[i][k];
    }
}

void GradientSet::scale(double factor) {
    for (auto& g : grads) {
        for (double& v : g) v *= factor;
    }
}

double GradientSet::global_norm() const {
    double s = 0.0;
    for (const auto& g : grads) {
        for (double v : g) s += v * v;
    }
    return std::sqrt(s);
}

bool GradientSet::all_finite() const {
    for (const auto& g : grads) {
        for (double v : g) {
            if (!std::isfinite(v)) return false;
        }
    }
    return true;
}

GradientSet backward(const ForwardTape& tape, const PrecisionPolicy& policy) {
    if (tape.params == nullptr) throw std::invalid_argument("backward: empty tape");
    const ParameterSet& params = *tape.params;
    if (params.generation() != tape.generation) {
        throw std::logic_error("backward: tape is stale, parameters changed after the forward pass");
    }
    const ModelConfig& cfg = params.config();
    const std::size_t T = tape.tokens.size();
    const std::size_t D = cfg.d_model;
    const std::size_t F = cfg.d_ff;
    const std::size_t V = cfg.vocab_size;
    const Rounder r(policy.forward_fmt);
    const AttentionMask& mask = tape.mask;

    GradientSet grads = GradientSet::zeros_like(params);

    // Output layer.
    std::vector<double> dnf(T * D, 0.0);
    {
        const auto& U = params[params.unembed_slot()].values;
        auto& dU = grads.grads[params.unembed_slot()];
        std::vector<double> dz(V);
        for (std::size_t n = 0; n < tape.target_pos.size(); ++n) {
            const std::size_t t = tape.target_pos[n];
            const double* p = &tape.out_probs[n * V];
            for (std::size_t v = 0; v < V; ++v) dz[v] = p[v];
            dz[static_cast<std::size_t>(tape.target_ids[n])] -= 1.0;
            for (double& x : dz) x = r(x);
            const double* nf = &tape.nf[t * D];
            double* dn = &dnf[t * D];
            for (std::size_t v = 0; v < V; ++v) {
                const double g = dz[v];
                if (g == 0.0) continue;
                const double* u = &U[v * D];
                double* du = &dU[v * D];
                for (std::size_t d = 0; d < D; ++d) {
                    du[d] += g * nf[d];
                    dn[d] += g * u[d];
                }
            }
        }
        r.apply(dnf);
    }

    std::vector<double> dh;
    rmsnorm_rows_backward(dnf, tape.h_final, tape.inv_rms_f, T, D, params[params.final_norm_slot()].values,
                          grads.grads[params.final_norm_slot()], dh);
    r.apply(dh);

    const double scale = 1.0 / std::sqrt(static_cast<double>(D));
    for (std::size_t li = cfg.n_layers; li-- > 0;) {
        const LayerCache& c = tape.layers[li];
        auto W = [&](LayerOffset off) -> const std::vector<double>& {
            return params[ParameterSet::layer_slot(li, off)].values;
        };
        auto dW = [&](LayerOffset off) -> std::vector<double>& {
            return grads.grads[ParameterSet::layer_slot(li, off)];
        };

        // MLP branch: h_out = h_mid + act * W_down
        matmul_grad_weight(c.act, T, F, dh, D, dW(kWDown));
        std::vector<double> dact(T * F, 0.0);
        matmul_grad_input(dh, T, D, W(kWDown), F, dact);
        r.apply(dact);
        std::vector<double> dup(T * F);
        for (std::size_t i = 0; i < T * F; ++i) {
            const double s = sigmoid(c.up[i]);
            dup[i] = r(dact[i] * s * (1.0 + c.up[i] * (1.0 - s)));
        }
        matmul_grad_weight(c.n2, T, D, dup, F, dW(kWUp));
        std::vector<double> dn2(T * D, 0.0);
        matmul_grad_input(dup, T, F, W(kWUp), D, dn2);
        r.apply(dn2);
        std::vector<double> dx;
        rmsnorm_rows_backward(dn2, c.h_mid, c.inv_rms2, T, D, W(kMlpNorm), dW(kMlpNorm), dx);
        std::vector<double> dh_mid(T * D);
        for (std::size_t i = 0; i < T * D; ++i) dh_mid[i] = r(dh[i] + dx[i]);

        // Attention branch: h_mid = h_in + ctx * W_o
        matmul_grad_weight(c.ctx, T, D, dh_mid, D, dW(kWo));
        std::vector<double> dctx(T * D, 0.0);
        matmul_grad_input(dh_mid, T, D, W(kWo), D, dctx);
        r.apply(dctx);

        std::vector<double> dq(T * D, 0.0);
        std::vector<double> dk(T * D, 0.0);
        std::vector<double> dv(T * D, 0.0);
        std::vector<double> dp(T);
        for (std::size_t i = 0; i < T; ++i) {
            const double* dci = &dctx[i * D];
            double weighted = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                if (!mask(i, j)) continue;
                const double p = c.probs[i * T + j];
                double acc = 0.0;
                for (std::size_t d = 0; d < D; ++d) {
                    acc += dci[d] * c.v[j * D + d];
                    dv[j * D + d] += p * dci[d];
                }
                dp[j] = r(acc);
                weighted += p * dp[j];
            }
            for (std::size_t j = 0; j <= i; ++j) {
                if (!mask(i, j)) continue;
                const double ds = r(c.probs[i * T + j] * (dp[j] - weighted));
                if (ds == 0.0) continue;
                for (std::size_t d = 0; d < D; ++d) {
                    dq[i * D + d] += ds * scale * c.k[j * D + d];
                    dk[j * D + d] += ds * scale * c.q[i * D + d];
                }
            }
        }
        r.apply(dq);
        r.apply(dk);
        r.apply(dv);

        matmul_grad_weight(c.n1, T, D, dq, D, dW(kWq));
        matmul_grad_weight(c.n1, T, D, dk, D, dW(kWk));
        matmul_grad_weight(c.n1, T, D, dv, D, dW(kWv));
        std::vector<double> dn1(T * D, 0.0);
        matmul_grad_input(dq, T, D, W(kWq), D, dn1);
        matmul_grad_input(dk, T, D, W(kWk), D, dn1);
        matmul_grad_input(dv, T, D, W(kWv), D, dn1);
        r.apply(dn1);
        rmsnorm_rows_backward(dn1, c.h_in, c.inv_rms1, T, D, W(kAttnNorm), dW(kAttnNorm), dx);
        dh.resize(T * D);
        for (std::size_t i = 0; i < T * D; ++i) dh[i] = r(dh_mid[i] + dx[i]);
    }

    auto& dE = grads.grads[ParameterSet::embed_slot()];
    for (std::size_t t = 0; t < T; ++t) {
        const std::size_t id = static_cast<std::size_t>(tape.tokens[t]);
        for (std::size_t d = 0; d < D; ++d) dE[id * D + d] += dh[t * D + d];
    }

    const Rounder gr(policy.grads_fmt);
    for (auto& g : grads.grads) gr.apply(g);
    return grads;
}

}  // namespace budgetlab
