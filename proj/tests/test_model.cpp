// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "budgetlab/model.h"

using namespace budgetlab;

namespace {

ModelConfig tiny_config(std::size_t vocab, std::size_t d, std::size_t layers, std::size_t ff, std::size_t ctx) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.d_model = d;
    c.n_layers = layers;
    c.d_ff = ff;
    c.context_length = ctx;
    return c;
}

PackedBlock single_block(std::vector<std::int32_t> ids, PackingMode mode = PackingMode::EosConcat) {
    PackedBlock b;
    b.packing_mode = mode;
    b.valid_length = ids.size();
    b.document_spans = {{0, ids.size()}};
    b.token_ids = std::move(ids);
    return b;
}

// Random O(1) parameters so that every path carries a non-trivial gradient.
void randomize(ParameterSet& ps, std::uint64_t seed, double scale) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    for (auto& p : ps.params()) {
        for (double& v : p.values) v = (p.kind == LayerKind::RMSNorm ? 1.0 : 0.0) + n(rng);
    }
    ps.bump_generation();
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

// Straight-line reference: one layer, no rounding, written against the
// architecture description rather than the library's loops.
double reference_nll(const ParameterSet& ps, const std::vector<std::int32_t>& tok) {
    const auto& c = ps.config();
    const std::size_t D = c.d_model, F = c.d_ff, V = c.vocab_size, T = tok.size();
    auto P = [&](const std::string& n) { return ps.at(n).values; };
    const auto E = P("embed"), g1 = P("layers.0.attn_norm"), wq = P("layers.0.wq"), wk = P("layers.0.wk"),
               wv = P("layers.0.wv"), wo = P("layers.0.wo"), g2 = P("layers.0.mlp_norm"), wu = P("layers.0.w_up"),
               wd = P("layers.0.w_down"), gf = P("final_norm"), U = P("unembed");
    auto norm = [&](const std::vector<double>& x, const std::vector<double>& g) {
        double ms = 0;
        for (double v : x) ms += v * v;
        ms /= static_cast<double>(x.size());
        std::vector<double> y(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = g[i] * x[i] / std::sqrt(ms + c.rmsnorm_eps);
        return y;
    };
    auto vecmat = [](const std::vector<double>& x, const std::vector<double>& W, std::size_t out) {
        std::vector<double> y(out, 0.0);
        for (std::size_t i = 0; i < x.size(); ++i)
            for (std::size_t j = 0; j < out; ++j) y[j] += x[i] * W[i * out + j];
        return y;
    };
    std::vector<std::vector<double>> h(T), q(T), k(T), v(T);
    for (std::size_t t = 0; t < T; ++t) {
        h[t].assign(E.begin() + tok[t] * D, E.begin() + (tok[t] + 1) * D);
        const auto n1 = norm(h[t], g1);
        q[t] = vecmat(n1, wq, D);
        k[t] = vecmat(n1, wk, D);
        v[t] = vecmat(n1, wv, D);
    }
    double nll = 0.0;
    for (std::size_t t = 0; t + 1 < T; ++t) {
        std::vector<double> s(t + 1);
        for (std::size_t j = 0; j <= t; ++j) {
            s[j] = 0;
            for (std::size_t d = 0; d < D; ++d) s[j] += q[t][d] * k[j][d];
            s[j] /= std::sqrt(static_cast<double>(D));
        }
        const auto a = softmax(s);
        std::vector<double> ctx(D, 0.0);
        for (std::size_t j = 0; j <= t; ++j)
            for (std::size_t d = 0; d < D; ++d) ctx[d] += a[j] * v[j][d];
        auto o = vecmat(ctx, wo, D);
        std::vector<double> hm(D);
        for (std::size_t d = 0; d < D; ++d) hm[d] = h[t][d] + o[d];
        auto u = vecmat(norm(hm, g2), wu, F);
        for (double& x : u) x = silu(x);
        auto m = vecmat(u, wd, D);
        for (std::size_t d = 0; d < D; ++d) hm[d] += m[d];
        const auto nf = norm(hm, gf);
        std::vector<double> logits(V, 0.0);
        for (std::size_t w = 0; w < V; ++w)
            for (std::size_t d = 0; d < D; ++d) logits[w] += nf[d] * U[w * D + d];
        const auto p = softmax(logits);
        nll -= std::log(p[tok[t + 1]]);
    }
    return nll;
}

}  // namespace

TEST_CASE("policy presets") {
    const auto pure = PrecisionPolicy::pure_bf16();
    CHECK(pure.weights_fmt == kBF16);
    CHECK(pure.optimizer_state_fmt == kBF16);
    CHECK_FALSE(pure.master_weights);
    CHECK(pure.high_precision_islands);
    const auto mixed = PrecisionPolicy::mixed_bf16();
    CHECK(mixed.master_weights);
    CHECK(mixed.optimizer_state_fmt == kFP32);
    CHECK(mixed.grads_fmt == kBF16);
    PrecisionPolicy bad = mixed;
    bad.optimizer_state_fmt = kBF16;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    CHECK(PrecisionPolicy::from_name("pure") == pure);
    CHECK_THROWS(PrecisionPolicy::from_name("fp8"));
}

TEST_CASE("config validation") {
    auto c = tiny_config(16, 8, 1, 4, 8);
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c.d_ff = 8;
    CHECK_NOTHROW(c.validate());
    c.vocab_size = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("init: gains are one, linear weights match the folded-normal mean") {
    const auto cfg = tiny_config(64, 64, 2, 256, 16);
    const auto a = init_model(cfg, 11);
    const auto b = init_model(cfg, 11);
    double sum_abs = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].values == b[i].values);
        for (double v : a[i].values) {
            CHECK(quantize(v, kBF16) == v);
            if (a[i].kind == LayerKind::RMSNorm) CHECK(v == 1.0);
        }
        if (a[i].kind == LayerKind::Linear) {
            for (double v : a[i].values) sum_abs += std::abs(v);
            n += a[i].size();
        }
    }
    REQUIRE(n >= 10000);
    const double folded = 0.02 * std::sqrt(2.0 / std::acos(-1.0));
    CHECK(std::abs(sum_abs / static_cast<double>(n) - folded) < 0.002);
    CHECK(std::abs(sum_abs / static_cast<double>(n) - 0.016) < 0.002);
    CHECK(init_model(cfg, 12)[1 + kWq].values != a[1 + kWq].values);
}

TEST_CASE("rmsnorm worked examples") {
    const auto pure = PrecisionPolicy::pure_bf16();
    const std::vector<double> ones{1, 1, 1, 1};
    CHECK(rmsnorm(std::vector<double>{1, 1, 1, 1}, ones, 0.0, pure) == ones);
    CHECK(rmsnorm(std::vector<double>{2, 2, 2, 2}, ones, 0.0, pure) == ones);
    CHECK(rmsnorm(std::vector<double>{1, 0, 0, 0}, std::vector<double>{2, 2, 2, 2}, 0.0, pure) ==
          std::vector<double>{4, 0, 0, 0});
    CHECK_THROWS(rmsnorm(std::vector<double>{}, std::vector<double>{}, 0.0, pure));
    CHECK_THROWS(rmsnorm(std::vector<double>{1, 2}, ones, 0.0, pure));
}

TEST_CASE("rmsnorm power-of-two scale invariance") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 1.0);
    for (const auto& policy : {PrecisionPolicy::pure_bf16(), PrecisionPolicy::wide()}) {
        for (int trial = 0; trial < 200; ++trial) {
            std::vector<double> x(16), g(16);
            for (auto& v : x) v = quantize(n(rng), policy.forward_fmt);
            for (auto& v : g) v = quantize(1.0 + 0.1 * n(rng), policy.weights_fmt);
            const auto y = rmsnorm(x, g, 0.0, policy);
            for (int k : {-6, -1, 1, 5}) {
                std::vector<double> xs = x;
                for (auto& v : xs) v = std::ldexp(v, k);
                CHECK(rmsnorm(xs, g, 0.0, policy) == y);
            }
            if (policy.forward_fmt.is_carrier()) continue;
            // General scale: bounded in units of the output format.
            std::vector<double> x3 = x;
            for (auto& v : x3) v *= 3.0;
            const auto y3 = rmsnorm(x3, g, 0.0, policy);
            for (std::size_t i = 0; i < y3.size(); ++i)
                CHECK(std::abs(y3[i] - y[i]) <= 4 * ulp(y[i], policy.forward_fmt));
        }
    }
}

TEST_CASE("softmax rows sum to one") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.0, 10.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> z(50);
        for (auto& v : z) v = n(rng);
        const auto p = softmax(z);
        CHECK(std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) < 1e-6);
    }
}

TEST_CASE("zero unembedding gives uniform loss") {
    const auto cfg = tiny_config(37, 8, 1, 16, 8);
    auto ps = init_model(cfg, 1);
    std::fill(ps.at("unembed").values.begin(), ps.at("unembed").values.end(), 0.0);
    const auto block = single_block({4, 9, 30, 2, 7, 7});
    for (const auto& policy : {PrecisionPolicy::wide(), PrecisionPolicy::pure_bf16()}) {
        const auto r = forward_loss(ps, block, policy);
        CHECK(r.token_count == 5);
        for (std::size_t t = 0; t < 5; ++t) CHECK(r.position_nll[t] == doctest::Approx(std::log(37.0)).epsilon(1e-12));
    }
}

TEST_CASE("forward matches a straight-line reference") {
    const auto cfg = tiny_config(7, 2, 1, 2, 3);
    auto ps = init_model(cfg, 21);
    randomize(ps, 21, 0.7);
    const std::vector<std::int32_t> tok{3, 0, 5};
    const double ref = reference_nll(ps, tok);
    const double wide = forward_loss(ps, single_block(tok), PrecisionPolicy::wide()).nll_sum;
    CHECK(std::abs(wide - ref) <= 1e-3 * std::abs(ref));
    CHECK(std::abs(wide - ref) <= 1e-12 * std::abs(ref));
    // Same parameters rounded to bf16 and run through the pure policy.
    quantize_parameters(ps, kBF16);
    const double pure = forward_loss(ps, single_block(tok), PrecisionPolicy::pure_bf16()).nll_sum;
    CHECK(std::abs(pure - reference_nll(ps, tok)) <= 2e-2 * std::abs(ref));
}

TEST_CASE("forward rejects out-of-vocabulary ids") {
    const auto ps = init_model(tiny_config(8, 4, 1, 4, 4), 1);
    CHECK_THROWS_AS(forward_loss(ps, single_block({1, 8}), PrecisionPolicy::pure_bf16()), std::invalid_argument);
}

TEST_CASE("bos-masked documents are independent of their neighbours") {
    const auto cfg = tiny_config(40, 16, 2, 32, 16);
    auto ps = init_model(cfg, 8);
    randomize(ps, 8, 0.3);
    quantize_parameters(ps, kBF16);
    const std::vector<std::int32_t> a{10, 11, 12, 13, 14}, b{20, 21, 22, 23}, c{30, 31, 32, 33, 34};
    const auto pure = PrecisionPolicy::pure_bf16();
    const auto together = pack_documents({a, b}, PackingMode::BosMasked, 16);
    const auto other = pack_documents({c, b}, PackingMode::BosMasked, 16);
    const auto alone = pack_documents({b}, PackingMode::BosMasked, 16);
    REQUIRE(together.size() == 1);
    const auto rt = forward_loss(ps, together[0], pure);
    const auto ro = forward_loss(ps, other[0], pure);
    const auto ra = forward_loss(ps, alone[0], pure);
    // b starts at offset 6 after [BOS a] and at 0 alone.
    for (std::size_t t = 0; t < 4; ++t) {
        CHECK(rt.position_nll[6 + t] == ra.position_nll[t]);
        CHECK(ro.position_nll[6 + t] == ra.position_nll[t]);
    }
    // Under EOS concatenation the neighbour does leak in.
    const auto et = forward_loss(ps, pack_documents({a, b}, PackingMode::EosConcat, 16)[0], pure);
    const auto eo = forward_loss(ps, pack_documents({c, b}, PackingMode::EosConcat, 16)[0], pure);
    bool differs = false;
    for (std::size_t t = 6; t < 9; ++t) differs |= et.position_nll[t] != eo.position_nll[t];
    CHECK(differs);
}

TEST_CASE("backward: rmsnorm gain gradient by hand") {
    // rms(1,0,0,0) = 1/2, so dL/dgain_0 = dy_0 * x_0 / rms = 2.
    const std::vector<double> x{1, 0, 0, 0}, g{1, 1, 1, 1}, dy{1, 0, 0, 0};
    const auto r = rmsnorm_backward(x, g, 0.0, dy);
    CHECK(r.dgain == std::vector<double>{2, 0, 0, 0});
    // y_0 = 2 x_0 / sqrt(x_0^2 / 4) is locally constant in x_0.
    CHECK(r.dx[0] == doctest::Approx(0.0).scale(1.0));
    // Finite-difference cross-check on a random vector.
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> xr(6), gr(6), dr(6);
    for (auto* v : {&xr, &gr, &dr})
        for (auto& e : *v) e = n(rng);
    const auto an = rmsnorm_backward(xr, gr, 1e-5, dr);
    const auto wide = PrecisionPolicy::wide();
    for (std::size_t i = 0; i < 6; ++i) {
        auto loss = [&](std::vector<double> xx) {
            const auto y = rmsnorm(xx, gr, 1e-5, wide);
            return std::inner_product(y.begin(), y.end(), dr.begin(), 0.0);
        };
        auto xp = xr, xm = xr;
        xp[i] += 1e-6;
        xm[i] -= 1e-6;
        CHECK(an.dx[i] == doctest::Approx((loss(xp) - loss(xm)) / 2e-6).epsilon(1e-6));
    }
}

TEST_CASE("backward: no targets means zero gradients") {
    const auto cfg = tiny_config(16, 8, 1, 8, 4);
    auto ps = init_model(cfg, 2);
    PackedBlock b = single_block({5, 6, 3, 3});
    b.valid_length = 1;
    b.document_spans = {{0, 1}, {1, 4}};
    const auto r = forward_loss(ps, b, PrecisionPolicy::pure_bf16());
    CHECK(r.token_count == 0);
    const auto g = backward(r.tape, PrecisionPolicy::pure_bf16());
    for (const auto& gv : g.grads)
        for (double v : gv) CHECK(v == 0.0);
}

TEST_CASE("backward: stale tape is rejected") {
    auto ps = init_model(tiny_config(16, 8, 1, 8, 4), 2);
    const auto r = forward_loss(ps, single_block({5, 6, 7}), PrecisionPolicy::pure_bf16());
    ps.bump_generation();
    CHECK_THROWS_AS(backward(r.tape, PrecisionPolicy::pure_bf16()), std::logic_error);
}

TEST_CASE("backward: gradients are deterministic and stored in grads_fmt") {
    auto ps = init_model(tiny_config(24, 8, 2, 16, 8), 4);
    const auto block = single_block({1, 5, 9, 13, 17, 21, 2, 6});
    const auto pure = PrecisionPolicy::pure_bf16();
    const auto g1 = backward(forward_loss(ps, block, pure).tape, pure);
    const auto g2 = backward(forward_loss(ps, block, pure).tape, pure);
    CHECK(g1.grads == g2.grads);
    for (const auto& gv : g1.grads)
        for (double v : gv) CHECK(quantize(v, kBF16) == v);
    CHECK(g1.global_norm() > 0.0);
}

TEST_CASE("backward: final-norm gain gradient for a one-hot residual") {
    // With d_model = 4 and the residual stream equal to (1,0,0,0) at the
    // predicting position, the final norm output is (2,0,0,0) * gain and
    // dL/dgain_0 = dL/dy_0 * 2.
    auto cfg = tiny_config(4, 4, 1, 4, 2);
    cfg.rmsnorm_eps = 0.0;
    auto ps = init_model(cfg, 1);
    for (auto& p : ps.params())
        if (p.kind != LayerKind::RMSNorm) std::fill(p.values.begin(), p.values.end(), 0.0);
    ps.at("embed").values[0 * 4 + 0] = 1.0;  // token 0 -> (1,0,0,0)
    // Unembedding row 0 = (1,0,0,0), others zero: dL/dy_0 = p0 - 1 for target 0.
    ps.at("unembed").values[0] = 1.0;
    ps.bump_generation();
    const auto r = forward_loss(ps, single_block({0, 0}), PrecisionPolicy::wide());
    const auto g = backward(r.tape, PrecisionPolicy::wide());
    // Logits (2,0,0,0): p0 = e^2 / (e^2 + 3).
    const double p0 = std::exp(2.0) / (std::exp(2.0) + 3.0);
    const double dy0 = p0 - 1.0;
    CHECK(g.grads[ps.final_norm_slot()][0] == doctest::Approx(2.0 * dy0).epsilon(1e-12));
}

TEST_CASE("backward: finite-difference check for every layer kind") {
    for (PackingMode mode : {PackingMode::EosConcat, PackingMode::BosMasked}) {
        const auto cfg = tiny_config(9, 4, 1, 6, 6);
        auto ps = init_model(cfg, 31);
        randomize(ps, 31 + static_cast<int>(mode), 0.5);
        const auto blocks = pack_documents({{4, 5, 6}, {7, 8, 4}}, mode, 6);
        REQUIRE(blocks.size() == 2);
        const PackedBlock& block = blocks[0];
        const auto wide = PrecisionPolicy::wide();
        const auto g = backward(forward_loss(ps, block, wide).tape, wide);
        double worst = 0.0;
        for (std::size_t pi = 0; pi < ps.size(); ++pi) {
            for (std::size_t k = 0; k < ps[pi].size(); ++k) {
                const double orig = ps[pi].values[k];
                auto f = [&](double delta) {
                    ps[pi].values[k] = orig + delta;
                    ps.bump_generation();
                    return forward_loss(ps, block, wide).nll_sum;
                };
                const double h = 1e-3;
                const double num = (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h);
                ps[pi].values[k] = orig;
                ps.bump_generation();
                const double ana = g.grads[pi][k];
                const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-6});
                worst = std::max(worst, rel);
            }
        }
        CHECK(worst < 1e-4);
    }
}
