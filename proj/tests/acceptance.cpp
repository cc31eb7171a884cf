// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion. Arguments select a
// subset of criteria by number (default: all). Exit status is non-zero if
// any selected criterion fails.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "budgetlab/embedding_init.h"
#include "budgetlab/evaluation.h"
#include "budgetlab/numerics.h"
#include "budgetlab/planner.h"
#include "budgetlab/schedule.h"
#include "budgetlab/synthetic.h"
#include "budgetlab/tokenizer.h"
#include "budgetlab/trainer.h"
#include "support/oracles.h"

using namespace budgetlab;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// 1. bf16 rounding against exhaustive nearest-value search

Outcome numerics_oracle() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(20240611);
    std::uniform_int_distribution<int> exp_dist(-140, 130);
    std::uniform_real_distribution<double> mant(1.0, 2.0);
    const auto& table = oracle::all_finite_bf16();
    std::size_t mismatches = 0;
    const std::size_t n = 100000;
    for (std::size_t i = 0; i < n; ++i) {
        double x;
        if (i % 10 == 0) {
            // Exact midpoints between neighbours exercise the tie rule.
            const std::size_t k = rng() % (table.size() - 1);
            x = 0.5 * (table[k].value + table[k + 1].value);
        } else {
            x = std::ldexp(mant(rng), exp_dist(rng)) * ((rng() & 1) ? -1.0 : 1.0);
        }
        if (quantize(x, kBF16) != oracle::nearest_bf16(x)) ++mismatches;
    }
    const std::size_t count = enumerate_values(256.0, 512.0, kBF16).size();
    const std::size_t oracle_count = oracle::count_bf16_in(256.0, 512.0);
    const double secs = seconds_since(t0);
    return {mismatches == 0 && count == 128 && oracle_count == 128 && secs < 5.0,
            fmt("%zu/%zu mismatches; values in [256,512): %zu (oracle %zu); %.2f s", mismatches, n, count,
                oracle_count, secs)};
}

// ---------------------------------------------------------------------------
// 2. When a weight update vanishes

Outcome vanishing_update() {
    const double heuristic = heuristic_vanish_threshold(0.05, kBF16);
    const double w = quantize(0.05, kBF16);
    const double exact = exact_vanish_threshold(w, kBF16);
    const oracle::VanishBracket b = oracle::bf16_vanish_bracket(w);
    // The bracket values are adjacent bf16 numbers, so containment is
    // agreement within one ulp of the threshold.
    const bool within = exact >= b.u_stay && exact <= b.u_move;
    return {heuristic == 3.90625e-4 && within,
            fmt("heuristic(0.05) = %.10g; exact(%.12g) = %.10g, brute force stays up to %.10g and moves at %.10g",
                heuristic, w, exact, b.u_stay, b.u_move)};
}

// ---------------------------------------------------------------------------
// Shared desk-scale data

struct DeskData {
    Tokenizer tok;
    std::vector<PackedBlock> blocks;
};

DeskData desk_data(std::uint64_t lang_seed, std::size_t docs, std::size_t vocab, std::size_t ctx) {
    DeskData d;
    const auto text = SyntheticLanguage::make(lang_seed).sample_documents(docs, 60, lang_seed + 100);
    TrainerConfig tc;
    tc.vocab_size = vocab;
    d.tok = train_bpe(text, tc);
    std::vector<std::vector<std::int32_t>> ids;
    for (const auto& t : text) ids.push_back(d.tok.encode(t));
    d.blocks = pack_documents(ids, PackingMode::BosMasked, ctx);
    return d;
}

// ---------------------------------------------------------------------------
// 3. RMSNorm gains freeze under pure bf16

Outcome rmsnorm_freeze() {
    const auto t0 = std::chrono::steady_clock::now();
    ModelConfig mc;  // vocab 512, d_model 64, 2 layers
    const DeskData data = desk_data(5, 300, mc.vocab_size, mc.context_length);
    const std::uint64_t steps = 200;

    auto train = [&](const PrecisionPolicy& policy) {
        ParameterSet m = init_model(mc, 17, policy.weights_fmt);
        m.snapshot_init();
        OptimizerState st = init_optimizer_state(m, policy);
        LoopConfig lc;
        lc.policy = policy;
        lc.constant_lr = 4e-5;
        lc.data_seed = 3;
        run_training(m, st, data.blocks, lc, 1, steps);
        return param_change(m, effective_weights(m, st));
    };
    const WeightReport pure = train(PrecisionPolicy::pure_bf16());
    const WeightReport mixed = train(PrecisionPolicy::mixed_bf16());
    const double rms_p = pure.rmsnorm().mean_abs_change, rms_m = mixed.rmsnorm().mean_abs_change;
    const double oth_p = pure.other().mean_abs_change, oth_m = mixed.other().mean_abs_change;
    const bool ok = rms_m > 0.0 && oth_m > 0.0 && rms_p <= 0.01 * rms_m && oth_p >= 0.25 * oth_m;
    const double secs = seconds_since(t0);
    return {ok && secs < 600.0,
            fmt("%llu steps at lr 4e-5: rmsnorm mean|dw| pure %.3g vs mixed %.3g (ratio %.4f, need <= 0.01); "
                "other %.3g vs %.3g (ratio %.3f, need >= 0.25); %.0f s",
                static_cast<unsigned long long>(steps), rms_p, rms_m, rms_m > 0 ? rms_p / rms_m : NAN, oth_p, oth_m,
                oth_m > 0 ? oth_p / oth_m : NAN, secs)};
}

// ---------------------------------------------------------------------------
// 4. Analytic gradients against finite differences

Outcome gradient_check() {
    std::mt19937_64 rng(77);
    const PrecisionPolicy wide = PrecisionPolicy::wide(true);
    double worst = 0.0;
    std::set<LayerKind> kinds;
    for (int inst = 0; inst < 20; ++inst) {
        ModelConfig c;
        c.vocab_size = 6 + rng() % 7;
        c.d_model = 2 + rng() % 4;
        c.n_layers = 1 + rng() % 2;
        c.d_ff = c.d_model + rng() % 4;
        c.context_length = 5 + rng() % 4;
        ParameterSet ps = init_model(c, rng(), wide.weights_fmt);
        std::normal_distribution<double> nd(0.0, 0.5);
        for (auto& p : ps.params()) {
            for (double& v : p.values) v = (p.kind == LayerKind::RMSNorm ? 1.0 : 0.0) + nd(rng);
        }
        ps.bump_generation();
        std::vector<std::vector<std::int32_t>> docs(2);
        for (auto& d : docs) {
            const std::size_t len = 2 + rng() % 3;
            for (std::size_t i = 0; i < len; ++i) d.push_back(4 + static_cast<std::int32_t>(rng() % (c.vocab_size - 4)));
        }
        const PackingMode mode = inst % 2 ? PackingMode::BosMasked : PackingMode::EosConcat;
        const PackedBlock block = pack_documents(docs, mode, c.context_length).front();
        const GradientSet g = backward(forward_loss(ps, block, wide).tape, wide);
        for (std::size_t pi = 0; pi < ps.size(); ++pi) {
            kinds.insert(ps[pi].kind);
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
                worst = std::max(worst, std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-6}));
            }
        }
    }
    return {worst < 1e-4 && kinds.size() == 4,
            fmt("20 instances, %zu layer kinds, max relative error %.3g", kinds.size(), worst)};
}

// ---------------------------------------------------------------------------
// 5. Planner feasibility matrix

Outcome planner_matrix() {
    const ModelShape m;  // 7e9 parameters, context 4096
    auto hw = [](std::size_t g) {
        HardwareSpec h;
        h.gpu_count = g;
        return h;
    };
    auto pt = [](Precision p, std::size_t mb, bool ckpt, Sharding s, AccumSync a, bool paged) {
        RunConfigPoint r;
        r.precision = p;
        r.micro_batch = mb;
        r.act_ckpt = ckpt;
        r.sharding = s;
        r.accum_sync = a;
        r.paged_optimizer = paged;
        return r;
    };
    const bool mixed1_oom = best_config(Precision::Mixed, m, hw(1)).empty();
    const bool pure1_ok = !best_config(Precision::Pure, m, hw(1)).empty();

    struct Row {
        std::size_t g;
        RunConfigPoint p;
    };
    const std::vector<Row> rows{
        {1, pt(Precision::Pure, 1, false, Sharding::NotApplicable, AccumSync::NotApplicable, true)},
        {2, pt(Precision::Mixed, 4, true, Sharding::Full, AccumSync::Sync, true)},
        {2, pt(Precision::Pure, 1, false, Sharding::GradOp, AccumSync::NoSync, false)},
        {4, pt(Precision::Mixed, 8, true, Sharding::Full, AccumSync::Sync, false)},
        {4, pt(Precision::Pure, 1, false, Sharding::GradOp, AccumSync::NoSync, false)},
        {8, pt(Precision::Mixed, 8, true, Sharding::Full, AccumSync::Sync, true)},
        {8, pt(Precision::Pure, 1, false, Sharding::GradOp, AccumSync::NoSync, false)},
    };
    std::size_t feasible = 0;
    for (const auto& r : rows) feasible += memory_estimate(r.p, hw(r.g)).feasible;

    std::size_t compared = 0, pure_faster = 0;
    for (std::size_t g : {1, 2, 4, 8}) {
        for (const auto& p : enumerate_space(Precision::Pure, m, g)) {
            RunConfigPoint q = p;
            q.precision = Precision::Mixed;
            if (!memory_estimate(p, hw(g)).feasible || !memory_estimate(q, hw(g)).feasible) continue;
            ++compared;
            pure_faster += time_estimate(p, hw(g)) < time_estimate(q, hw(g));
        }
    }
    return {mixed1_oom && pure1_ok && feasible == rows.size() && compared > 0 && pure_faster == compared,
            fmt("mixed/1 %s, pure/1 %s; reference best configs feasible %zu/%zu; pure faster on %zu/%zu shared points",
                mixed1_oom ? "OOM" : "feasible", pure1_ok ? "feasible" : "OOM", feasible, rows.size(), pure_faster,
                compared)};
}

// ---------------------------------------------------------------------------
// 6. Schedule anatomy

Outcome schedule_anatomy() {
    bool ok = true;
    std::ostringstream d;
    const ScheduleSpec cos = ScheduleSpec::cosine_floor(7680, 4e-5, 2e-6);
    const auto cb = phase_boundaries(cos);
    ok &= cb.front() == 76 && lr_at(cos, 76) == 4e-5 && lr_at(cos, 7680) == 2e-6;
    d << "cosine: warmup ends " << cb.front() << ", lr(76)=" << lr_at(cos, 76) << ", lr(7680)=" << lr_at(cos, 7680);

    const ScheduleSpec inf = ScheduleSpec::infinite(1000);
    const std::vector<std::uint64_t> expect_b{10, 610, 860, 1000};
    const std::vector<double> expect_lr{3e-5, 1.65e-5, 1.65e-5, 2e-6};
    ok &= phase_boundaries(inf) == expect_b;
    d << "; infinite:";
    for (std::size_t i = 0; i < expect_b.size(); ++i) {
        const double lr = lr_at(inf, expect_b[i]);
        ok &= std::abs(lr - expect_lr[i]) <= 1e-12 * expect_lr[i];
        d << " lr(" << expect_b[i] << ")=" << lr;
    }
    double worst = 0.0;
    for (const ScheduleSpec* s : {&cos, &inf}) {
        const auto b = phase_boundaries(*s);
        for (std::size_t p = 0; p + 1 < b.size(); ++p) {
            const double left = phase_lr(*s, p, static_cast<double>(b[p]));
            const double right = phase_lr(*s, p + 1, static_cast<double>(b[p]));
            worst = std::max(worst, std::abs(left - right) / std::max(std::abs(left), std::abs(right)));
        }
    }
    ok &= worst <= 1e-12;
    d << "; worst boundary jump " << worst;
    return {ok, d.str()};
}

// ---------------------------------------------------------------------------
// 7. Tokenizer properties

std::string random_utf8(std::mt19937_64& rng, std::size_t n_chars) {
    static const std::vector<std::pair<char32_t, char32_t>> ranges{
        {0x20, 0x7E}, {0x09, 0x0A}, {0xA0, 0x17F}, {0x370, 0x3FF}, {0x400, 0x4FF},
        {0x600, 0x6FF}, {0x4E00, 0x4FFF}, {0xE000, 0xE0FF}, {0x1F300, 0x1F64F}, {0x10000, 0x10FFFF}};
    std::string out;
    for (std::size_t i = 0; i < n_chars; ++i) {
        const auto& r = ranges[rng() % ranges.size()];
        const char32_t c = r.first + static_cast<char32_t>(rng() % (r.second - r.first + 1));
        if (c < 0x80) {
            out += static_cast<char>(c);
        } else if (c < 0x800) {
            out += static_cast<char>(0xC0 | (c >> 6));
            out += static_cast<char>(0x80 | (c & 0x3F));
        } else if (c < 0x10000) {
            out += static_cast<char>(0xE0 | (c >> 12));
            out += static_cast<char>(0x80 | ((c >> 6) & 0x3F));
            out += static_cast<char>(0x80 | (c & 0x3F));
        } else {
            out += static_cast<char>(0xF0 | (c >> 18));
            out += static_cast<char>(0x80 | ((c >> 12) & 0x3F));
            out += static_cast<char>(0x80 | ((c >> 6) & 0x3F));
            out += static_cast<char>(0x80 | (c & 0x3F));
        }
    }
    return out;
}

Outcome tokenizer_properties() {
    const auto target = SyntheticLanguage::make(10);
    const auto other = SyntheticLanguage::make(11);
    const auto train_x = target.sample_documents(300, 60, 1);
    const auto held_x = target.sample_documents(100, 60, 2);
    // The generic tokenizer sees mostly the other language.
    auto train_mix = other.sample_documents(300, 60, 3);
    const auto some_x = target.sample_documents(30, 60, 4);
    train_mix.insert(train_mix.end(), some_x.begin(), some_x.end());
    TrainerConfig c;
    c.vocab_size = 1200;
    const Tokenizer specialized = train_bpe(train_x, c);
    const Tokenizer again = train_bpe(train_x, c);
    const Tokenizer generic = train_bpe(train_mix, c);

    std::mt19937_64 rng(99);
    std::size_t bad = 0;
    const std::size_t n = 10000;
    for (std::size_t i = 0; i < n; ++i) {
        const std::string s = random_utf8(rng, rng() % 48);
        if (specialized.decode(specialized.encode(s)) != s) ++bad;
    }
    const bool same = specialized == again && specialized.to_json() == again.to_json();
    const double fs = fertility(specialized, held_x), fg = fertility(generic, held_x);
    return {bad == 0 && same && fs < fg,
            fmt("round trip failures %zu/%zu; retrain identical: %s; held-out fertility specialized %.4f vs "
                "generic %.4f",
                bad, n, same ? "yes" : "no", fs, fg)};
}

// ---------------------------------------------------------------------------
// 8. Embedding initialization ordering after a tokenizer swap

bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
    }
    return true;
}

Outcome embedding_init_ordering() {
    const auto t0 = std::chrono::steady_clock::now();
    // Base model: mostly language A with a share of the target language B,
    // the situation of a multilingual base model.
    const auto A = SyntheticLanguage::make(1), B = SyntheticLanguage::make(2);
    std::vector<std::string> base_text = A.sample_documents(400, 60, 10);
    const auto b_share = B.sample_documents(80, 60, 11);
    base_text.insert(base_text.end(), b_share.begin(), b_share.end());
    const auto target_text = B.sample_documents(400, 60, 12);
    std::vector<EvalChunk> held;
    for (const auto& t : B.sample_documents(16, 60, 13)) held.push_back({"held-" + std::to_string(held.size()), t});

    TrainerConfig tc;
    tc.vocab_size = 512;
    const Tokenizer base_tok = train_bpe(base_text, tc);
    const Tokenizer new_tok = train_bpe(target_text, tc);

    ModelConfig mc;
    mc.vocab_size = base_tok.size();
    const PrecisionPolicy policy = PrecisionPolicy::mixed_bf16();
    ParameterSet model = init_model(mc, 1, policy.weights_fmt);
    OptimizerState st = init_optimizer_state(model, policy);
    std::vector<std::vector<std::int32_t>> base_ids, new_ids;
    for (const auto& t : base_text) base_ids.push_back(base_tok.encode(t));
    for (const auto& t : target_text) new_ids.push_back(new_tok.encode(t));
    LoopConfig lc;
    lc.policy = policy;
    lc.constant_lr = 1e-3;
    lc.data_seed = 5;
    run_training(model, st, pack_documents(base_ids, PackingMode::BosMasked, mc.context_length), lc, 1, 300);
    const auto w = effective_weights(model, st);
    for (std::size_t i = 0; i < model.size(); ++i) model[i].values = w[i];
    quantize_parameters(model, policy.weights_fmt);

    const AuxEmbeddings aux = train_aux_embeddings(new_ids, new_tok.size(), 2, 0, 7);
    auto nll_after_swap = [&](InitMethodKind kind, ParameterSet* out) {
        ParameterSet s = swap_vocabulary(model, base_tok, new_tok, {kind}, 3, &aux, policy.weights_fmt);
        const double v = word_normalized_nll(s, new_tok, held, policy).nll_per_word;
        if (out) *out = std::move(s);
        return v;
    };
    ParameterSet focus_model;
    const double focus = nll_after_swap(InitMethodKind::FocusLike, &focus_model);
    const double overlap = nll_after_swap(InitMethodKind::OverlapHeuristic, nullptr);
    const double normal = nll_after_swap(InitMethodKind::NormalFixed, nullptr);
    const double gap1 = (overlap - focus) / overlap, gap2 = (normal - overlap) / normal;

    ParameterSet warmed = focus_model;
    WarmupConfig wc;
    wc.steps = 100;
    embedding_warmup(warmed, pack_documents(new_ids, PackingMode::BosMasked, mc.context_length), wc);
    bool frozen_ok = true, moved = false;
    for (std::size_t i = 0; i < warmed.size(); ++i) {
        const bool emb = warmed[i].kind == LayerKind::Embedding || warmed[i].kind == LayerKind::Unembedding;
        if (emb) {
            moved |= !bits_equal(warmed[i].values, focus_model[i].values);
        } else {
            frozen_ok &= bits_equal(warmed[i].values, focus_model[i].values);
        }
    }
    const double secs = seconds_since(t0);
    return {gap1 >= 0.02 && gap2 >= 0.02 && frozen_ok && moved && secs < 900.0,
            fmt("held-out nll/word after swap: focus_like %.4f < overlap_heuristic %.4f (gap %.1f%%) < normal_fixed "
                "%.4f (gap %.1f%%); 100-step warmup: non-embedding bit-identical %s, embeddings moved %s; %.0f s",
                focus, overlap, 100 * gap1, normal, 100 * gap2, frozen_ok ? "yes" : "no", moved ? "yes" : "no",
                secs)};
}

// ---------------------------------------------------------------------------
// 9. Metric identities

Outcome metric_identities() {
    const auto lang = SyntheticLanguage::make(8);
    const auto text = lang.sample_documents(200, 60, 1);
    TrainerConfig tc;
    tc.vocab_size = 400;
    const Tokenizer tok = train_bpe(text, tc);
    std::vector<EvalChunk> chunks;
    std::size_t T = 0, W = 0;
    for (const auto& t : lang.sample_documents(12, 60, 2)) {
        chunks.push_back({"c" + std::to_string(chunks.size()), t});
        T += tok.encode(t).size();
        std::istringstream words(t);
        for (std::string w; words >> w;) ++W;
    }

    ModelConfig mc;
    mc.vocab_size = tok.size();
    mc.d_model = 16;
    mc.n_layers = 1;
    mc.d_ff = 32;
    mc.context_length = 32;  // shorter than the chunks, so windowing is exercised
    ParameterSet uniform = init_model(mc, 4);
    for (double& v : uniform.at("unembed").values) v = 0.0;
    uniform.bump_generation();
    const PrecisionPolicy wide = PrecisionPolicy::wide(true);
    const EvalReport u = word_normalized_nll(uniform, tok, chunks, wide);
    const double closed = static_cast<double>(T) * std::log(static_cast<double>(tok.size())) / static_cast<double>(W);
    const double err1 = std::abs(u.nll_per_word - closed);

    const ParameterSet model = init_model(mc, 5);
    const EvalReport r = word_normalized_nll(model, tok, chunks, PrecisionPolicy::pure_bf16());
    std::vector<std::string> texts;
    for (const auto& c : chunks) texts.push_back(c.text);
    const double fert = fertility(tok, texts);
    const double err2 = std::abs(r.nll_per_word / r.nll_per_token - fert);
    return {err1 <= 1e-9 && err2 <= 1e-9 && u.token_count == T && u.word_count == W,
            fmt("uniform model nll/word %.12f vs T ln|V| / W = %.12f (T=%zu, W=%zu, |V|=%zu); "
                "per-word/per-token %.12f vs fertility %.12f",
                u.nll_per_word, closed, T, W, tok.size(), r.nll_per_word / r.nll_per_token, fert)};
}

// ---------------------------------------------------------------------------
// 10. Scope exclusions

Outcome exclusions(const std::set<int>& ran) {
    const bool covered = ran.count(3) && ran.count(5) && ran.count(8);
    return {covered,
            "absolute NLL trajectories, downstream benchmark scores and wall-clock speedups are not reproduced; "
            "ordering and ratio properties checked instead by criteria 3, 5 and 8" +
                std::string(covered ? "" : " (not all of them were selected)")};
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));
    if (selected.empty()) {
        for (int i = 1; i <= 10; ++i) selected.insert(i);
    }
    const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
        {1, numerics_oracle},   {2, vanishing_update},  {3, rmsnorm_freeze},
        {4, gradient_check},    {5, planner_matrix},    {6, schedule_anatomy},
        {7, tokenizer_properties}, {8, embedding_init_ordering}, {9, metric_identities},
        {10, [&] { return exclusions(selected); }},
    };
    int failures = 0;
    for (const auto& [id, run] : criteria) {
        if (!selected.count(id)) continue;
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.pass;
        std::cout << (o.pass ? "PASS " : "FAIL ") << id << ": " << o.detail << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
