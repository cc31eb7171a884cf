// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "budgetlab/evaluation.h"
#include "budgetlab/synthetic.h"
#include "budgetlab/text.h"

using namespace budgetlab;

namespace {

ModelConfig small_config(std::size_t vocab, std::size_t ctx) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.d_model = 8;
    c.n_layers = 1;
    c.d_ff = 16;
    c.context_length = ctx;
    return c;
}

ParameterSet uniform_model(std::size_t vocab, std::size_t ctx) {
    ParameterSet m = init_model(small_config(vocab, ctx), 3);
    auto& u = m[m.unembed_slot()].values;
    std::fill(u.begin(), u.end(), 0.0);
    return m;
}

}  // namespace

TEST_CASE("uniform model: 10 tokens over 5 words") {
    const ParameterSet m = uniform_model(128, 64);
    std::vector<std::int32_t> ids{4, 5, 6, 7, 8, 9, 10, 11, 12, 13};
    const std::vector<EvalChunk> chunks{{"c0", "alpha beta gamma delta epsilon"}};
    for (const auto& policy : {PrecisionPolicy::pure_bf16(), PrecisionPolicy::wide()}) {
        const EvalReport r = word_normalized_nll(m, {ids}, chunks, policy);
        CHECK(r.token_count == 10);
        CHECK(r.word_count == 5);
        CHECK(r.nll_per_word == doctest::Approx(10.0 * std::log(128.0) / 5.0).epsilon(1e-12));
        CHECK(r.nll_per_word == doctest::Approx(9.704061).epsilon(1e-7));
        CHECK(r.nll_per_token == doctest::Approx(std::log(128.0)).epsilon(1e-12));
    }
}

TEST_CASE("windowing predicts every token exactly once") {
    // Context 4 forces several overlapping windows over 10 tokens.
    const ParameterSet m = uniform_model(128, 4);
    std::vector<std::int32_t> ids{4, 5, 6, 7, 8, 9, 10, 11, 12, 13};
    CHECK(chunk_nll(m, ids, PrecisionPolicy::wide()) == doctest::Approx(10.0 * std::log(128.0)).epsilon(1e-12));
    const ParameterSet trained = init_model(small_config(128, 4), 9, kWide);
    const ParameterSet wide_ctx = [&] {
        ParameterSet p = init_model(small_config(128, 64), 9, kWide);
        return p;
    }();
    // A window of the full sequence scores the first ctx-1 tokens identically.
    const std::vector<std::int32_t> head(ids.begin(), ids.begin() + 3);
    CHECK(chunk_nll(trained, head, PrecisionPolicy::wide()) ==
          doctest::Approx(chunk_nll(wide_ctx, head, PrecisionPolicy::wide())).epsilon(1e-12));
}

TEST_CASE("errors: empty chunk list, empty chunk, vocab mismatch") {
    const ParameterSet m = uniform_model(128, 16);
    CHECK_THROWS_AS(word_normalized_nll(m, std::vector<std::vector<std::int32_t>>{}, {}, PrecisionPolicy::wide()),
                    std::invalid_argument);
    CHECK_THROWS_AS(word_normalized_nll(m, {{4, 5}}, {{"c", "   "}}, PrecisionPolicy::wide()), std::invalid_argument);
    CHECK_THROWS_AS(word_normalized_nll(m, {{}}, {{"c", "word"}}, PrecisionPolicy::wide()), std::invalid_argument);
    const SyntheticLanguage lang = SyntheticLanguage::make(1);
    TrainerConfig tc;
    tc.vocab_size = 300;
    const Tokenizer tok = train_bpe(lang.sample_documents(50, 40, 2), tc);
    CHECK_THROWS_AS(word_normalized_nll(m, tok, {{"c", "word"}}, PrecisionPolicy::wide()), std::invalid_argument);
}

TEST_CASE("word count is tokenizer invariant and the ratio equals fertility") {
    const SyntheticLanguage lang = SyntheticLanguage::make(5);
    const auto corpus = lang.sample_documents(200, 60, 6);
    const auto held_out = lang.sample_documents(6, 50, 7);
    std::vector<EvalChunk> chunks;
    for (std::size_t i = 0; i < held_out.size(); ++i) chunks.push_back({"d" + std::to_string(i), held_out[i]});

    TrainerConfig small;
    small.vocab_size = 320;
    TrainerConfig large;
    large.vocab_size = 600;
    const Tokenizer a = train_bpe(corpus, small);
    const Tokenizer b = train_bpe(corpus, large);

    const ParameterSet ma = init_model(small_config(a.size(), 32), 11);
    const ParameterSet mb = init_model(small_config(b.size(), 32), 11);
    const EvalReport ra = word_normalized_nll(ma, a, chunks, PrecisionPolicy::pure_bf16());
    const EvalReport rb = word_normalized_nll(mb, b, chunks, PrecisionPolicy::pure_bf16());

    std::size_t words = 0;
    for (const auto& d : held_out) words += split_words(d).size();
    CHECK(ra.word_count == words);
    CHECK(rb.word_count == words);
    CHECK(ra.token_count != rb.token_count);
    CHECK(ra.nll_per_word / ra.nll_per_token == doctest::Approx(fertility(a, held_out)).epsilon(1e-12));
    CHECK(rb.nll_per_word / rb.nll_per_token == doctest::Approx(fertility(b, held_out)).epsilon(1e-12));
    // Same normalizer: per-word order follows total NLL order.
    CHECK((ra.nll_per_word < rb.nll_per_word) == (ra.nll_sum < rb.nll_sum));

    const EvalReport back = EvalReport::from_json(ra.to_json());
    CHECK(back.nll_sum == ra.nll_sum);
    CHECK(back.chunk_ids == ra.chunk_ids);
    CHECK(ra.to_csv().find("nll_per_word") != std::string::npos);
}

TEST_CASE("histogram bins") {
    const HistogramSpec spec;
    const auto e = spec.edges();
    REQUIRE(e.size() == 65);
    CHECK(e.front() == 1e-6);
    CHECK(e.back() == 10.0);
    for (std::size_t i = 1; i < e.size(); ++i) CHECK(e[i] > e[i - 1]);
    CHECK(spec.bin_of(0.0) == -1);
    CHECK(spec.bin_of(5e-7) == -1);
    CHECK(spec.bin_of(1e-6) == 0);
    CHECK(spec.bin_of(9.999) == 63);
    CHECK(spec.bin_of(10.0) == 64);
    // Every bin's geometric midpoint lands in that bin.
    for (std::size_t k = 0; k < 64; ++k) CHECK(spec.bin_of(std::sqrt(e[k] * e[k + 1])) == static_cast<long>(k));
    CHECK_THROWS_AS((HistogramSpec{0, 1e-6, 10}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((HistogramSpec{8, 1.0, 0.5}.validate()), std::invalid_argument);
}

TEST_CASE("fresh model: RMSNorm mean 1, others folded normal") {
    ModelConfig c;  // default 64-wide, 2 layers
    const ParameterSet m = init_model(c, 42);
    const WeightReport r = weight_histogram(m);
    CHECK(r.rmsnorm().mean_abs == 1.0);
    const double folded = 0.02 * std::sqrt(2.0 / M_PI);
    CHECK(r.other().mean_abs == doctest::Approx(folded).epsilon(0.02));
    std::size_t norm_params = 0;
    for (const auto& p : m.params()) norm_params += p.kind == LayerKind::RMSNorm ? p.size() : 0;
    for (std::size_t gi = 0; gi < 2; ++gi) {
        const WeightGroupStats& g = r.groups[gi];
        std::size_t mass = g.underflow + g.overflow;
        for (auto n : g.histogram) mass += n;
        CHECK(mass == g.count);
    }
    CHECK(r.rmsnorm().count == norm_params);
    CHECK(r.rmsnorm().count + r.other().count == m.parameter_count());
    CHECK(r.to_json()["groups"]["other"]["histogram"].size() == 64);
    // header + 2 groups x (64 + 2) rows
    const std::string csv = r.histogram_csv();
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 66);
}

TEST_CASE("param_change") {
    ParameterSet m;
    Parameter p;
    p.name = "w";
    p.kind = LayerKind::Linear;
    p.rows = 2;
    p.values = {1.0, 2.0};
    m.params().push_back(p);
    Parameter g;
    g.name = "g";
    g.kind = LayerKind::RMSNorm;
    g.rows = 1;
    g.values = {1.0};
    m.params().push_back(g);

    CHECK_THROWS_AS(param_change(m), std::invalid_argument);
    m.snapshot_init();
    WeightReport r0 = param_change(m);
    CHECK(r0.other().mean_abs_change == 0.0);
    CHECK(r0.rmsnorm().mean_abs_change == 0.0);

    m[0].values = {1.5, 2.0};
    const WeightReport r = param_change(m);
    CHECK(r.other().mean_abs_change == 0.25);
    CHECK(r.rmsnorm().mean_abs_change == 0.0);
    CHECK(r.to_json()["groups"]["other"]["mean_abs_change"] == 0.25);

    // Override values (e.g. a master copy) take precedence over stored values.
    const WeightReport o = param_change(m, {{1.0, 2.5}, {0.5}});
    CHECK(o.other().mean_abs_change == 0.25);
    CHECK(o.rmsnorm().mean_abs_change == 0.5);
    CHECK_THROWS_AS(param_change(m, {{1.0}}), std::invalid_argument);
    CHECK(r.summary_csv().find("rmsnorm,1,1,0") != std::string::npos);
}

TEST_CASE("untrained model has zero change everywhere") {
    ParameterSet m = init_model(small_config(32, 8), 1);
    m.snapshot_init();
    const WeightReport r = param_change(m);
    CHECK(r.rmsnorm().mean_abs_change == 0.0);
    CHECK(r.other().mean_abs_change == 0.0);
}
