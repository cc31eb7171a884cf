// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bit>
#include <filesystem>
#include <fstream>

#include "budgetlab/checkpoint.h"
#include "budgetlab/trainer.h"

using namespace budgetlab;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny() {
    ModelConfig c;
    c.vocab_size = 12;
    c.d_model = 4;
    c.n_layers = 1;
    c.d_ff = 6;
    c.context_length = 8;
    return c;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("budgetlab_ckpt_" + name);
    fs::remove_all(p);
    return p;
}

bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
    }
    return true;
}

void train_a_little(ParameterSet& m, OptimizerState& st, const PrecisionPolicy& policy) {
    const auto blocks = pack_documents({{4, 5, 6, 7, 8}, {9, 10, 11, 4}}, PackingMode::BosMasked, 8);
    LoopConfig cfg;
    cfg.policy = policy;
    cfg.batch_size = 2;
    cfg.constant_lr = 1e-2;
    run_training(m, st, blocks, cfg, 1, 3);
}

}  // namespace

TEST_CASE("round trip is bit exact for every preset") {
    for (const auto& name : {"pure", "mixed", "wide"}) {
        const PrecisionPolicy policy = PrecisionPolicy::from_name(name);
        ParameterSet m = init_model(tiny(), 5, policy.weights_fmt);
        m.snapshot_init();
        OptimizerState st = init_optimizer_state(m, policy);
        train_a_little(m, st, policy);

        const fs::path dir = scratch(name);
        save_checkpoint(dir.string(), m, policy, &st, {{"note", "x"}});
        const Checkpoint ck = load_checkpoint(dir.string());
        CHECK(ck.params.config() == m.config());
        CHECK(ck.policy == policy);
        CHECK(ck.metadata["note"] == "x");
        REQUIRE(ck.optimizer);
        CHECK(ck.optimizer->step == st.step);
        CHECK(ck.optimizer->master.has_value() == st.master.has_value());
        for (std::size_t i = 0; i < m.size(); ++i) {
            CHECK(ck.params[i].name == m[i].name);
            CHECK(ck.params[i].kind == m[i].kind);
            CHECK(bits_equal(ck.params[i].values, m[i].values));
            REQUIRE(ck.params[i].init_snapshot);
            CHECK(bits_equal(*ck.params[i].init_snapshot, *m[i].init_snapshot));
            CHECK(bits_equal(ck.optimizer->m[i], st.m[i]));
            CHECK(bits_equal(ck.optimizer->v[i], st.v[i]));
            if (st.master) CHECK(bits_equal((*ck.optimizer->master)[i], (*st.master)[i]));
        }

        // bf16/fp32 payloads are stored as f32; the wide preset needs f64.
        std::ifstream in(dir / "manifest.json");
        const auto manifest = nlohmann::json::parse(in);
        bool any_f64 = false;
        for (const auto& e : manifest["tensors"]) any_f64 |= e["dtype"] == "f64";
        CHECK(any_f64 == (std::string(name) == "wide"));

        // Saving the reloaded checkpoint reproduces identical bytes.
        const fs::path again = scratch(std::string(name) + "_again");
        save_checkpoint(again.string(), ck.params, ck.policy, &*ck.optimizer, ck.metadata);
        auto slurp = [](const fs::path& p) {
            std::ifstream f(p, std::ios::binary);
            return std::string(std::istreambuf_iterator<char>(f), {});
        };
        CHECK(slurp(dir / "tensors.bin") == slurp(again / "tensors.bin"));
        CHECK(slurp(dir / "manifest.json") == slurp(again / "manifest.json"));
        fs::remove_all(dir);
        fs::remove_all(again);
    }
}

TEST_CASE("payload is little-endian f32") {
    ParameterSet m = init_model(tiny(), 1);
    m[0].values[0] = 1.0;
    const fs::path dir = scratch("le");
    save_checkpoint(dir.string(), m, PrecisionPolicy::pure_bf16());
    std::ifstream f(dir / "tensors.bin", std::ios::binary);
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    // 1.0f = 0x3F800000
    CHECK(b[0] == 0x00);
    CHECK(b[1] == 0x00);
    CHECK(b[2] == 0x80);
    CHECK(b[3] == 0x3F);
    fs::remove_all(dir);
}

TEST_CASE("load errors") {
    CHECK_THROWS_AS(load_checkpoint((fs::temp_directory_path() / "budgetlab_missing_dir").string()), std::runtime_error);

    const ParameterSet m = init_model(tiny(), 2);
    const fs::path dir = scratch("bad");
    save_checkpoint(dir.string(), m, PrecisionPolicy::pure_bf16());
    {
        std::ofstream f(dir / "tensors.bin", std::ios::binary | std::ios::app);
        f << "junk";
    }
    CHECK_THROWS_AS(load_checkpoint(dir.string()), std::runtime_error);

    // A weight outside the declared format is rejected.
    ParameterSet off = m;
    off[1].values[0] = 1.0 + 1.0 / 1024.0;
    save_checkpoint(dir.string(), off, PrecisionPolicy::pure_bf16());
    CHECK_THROWS_AS(load_checkpoint(dir.string()), std::runtime_error);

    {
        std::ofstream f(dir / "manifest.json", std::ios::trunc);
        f << "{not json";
    }
    CHECK_THROWS_AS(load_checkpoint(dir.string()), std::runtime_error);
    fs::remove_all(dir);
}

TEST_CASE("config and policy JSON") {
    const ModelConfig c = tiny();
    CHECK(model_config_from_json(to_json(c)) == c);
    for (const auto& p : {PrecisionPolicy::pure_bf16(), PrecisionPolicy::mixed_bf16(), PrecisionPolicy::wide(true)}) {
        CHECK(precision_policy_from_json(to_json(p)) == p);
    }
    CHECK(precision_policy_from_json("mixed") == PrecisionPolicy::mixed_bf16());
}
