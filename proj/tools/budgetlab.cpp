// SPDX-License-Identifier: Apache-2.0
//
// budgetlab command-line tool. Exit codes: 0 ok, 1 user error, 2 numerical abort.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "budgetlab/checkpoint.h"
#include "budgetlab/experiment.h"
#include "budgetlab/planner.h"
#include "budgetlab/rng.h"
#include "budgetlab/synthetic.h"
#include "budgetlab/trainer.h"

using namespace budgetlab;
namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

/// Flags that mirror ExperimentConfig. Only flags given on the command line
/// are applied, then a --config file is merged over them.
struct ConfigFlags {
    std::string config;
    std::vector<std::string> train_corpus, eval_corpus, filter_tags;
    std::string output_dir, policy, schedule, tokenizer, base_checkpoint, base_tokenizer, init_method, packing;
    std::uint64_t steps = 0, seed = 0, eval_interval = 0;
    std::size_t batch_size = 0, vocab_size = 0, d_model = 0, n_layers = 0, d_ff = 0, context_length = 0;
    std::size_t warmup_steps = 0, max_eval_chunks = 0;
    double lr = 0;
    bool stochastic_rounding = false, no_filter = false;
    std::map<std::string, CLI::Option*> opts;

    void add(CLI::App* app) {
        auto reg = [&](const std::string& key, CLI::Option* o) { opts[key] = o; };
        app->add_option("--config", config, "JSON config; its keys override the flags")->check(CLI::ExistingFile);
        reg("train_corpus", app->add_option("--train-corpus", train_corpus, "JSON-lines training corpus"));
        reg("eval_corpus", app->add_option("--eval-corpus", eval_corpus, "JSON-lines evaluation corpus"));
        reg("filter_tags", app->add_option("--filter-tags", filter_tags, "quality tags to drop"));
        app->add_flag("--no-filter", no_filter, "keep documents regardless of tags");
        reg("output_dir", app->add_option("-o,--output-dir", output_dir, "run directory"));
        reg("policy", app->add_option("--policy", policy, "pure, mixed or wide"));
        reg("schedule", app->add_option("--schedule", schedule, "cosine or infinite"));
        reg("lr", app->add_option("--lr", lr, "peak learning rate"));
        reg("steps", app->add_option("--steps", steps, "training steps"));
        reg("seed", app->add_option("--seed", seed));
        reg("eval_interval", app->add_option("--eval-interval", eval_interval, "extra eval every n steps"));
        reg("batch_size", app->add_option("--batch-size", batch_size));
        reg("packing", app->add_option("--packing", packing, "eos_concat or bos_masked"));
        reg("tokenizer_path", app->add_option("--tokenizer", tokenizer, "existing tokenizer JSON"));
        reg("vocab_size", app->add_option("--vocab-size", vocab_size, "vocabulary size when training a tokenizer"));
        reg("base_checkpoint", app->add_option("--base-checkpoint", base_checkpoint));
        reg("base_tokenizer", app->add_option("--base-tokenizer", base_tokenizer));
        reg("init_method", app->add_option("--init-method", init_method, "embedding init for a tokenizer swap"));
        reg("embedding_warmup_steps", app->add_option("--embedding-warmup-steps", warmup_steps));
        reg("max_eval_chunks", app->add_option("--max-eval-chunks", max_eval_chunks));
        reg("d_model", app->add_option("--d-model", d_model));
        reg("n_layers", app->add_option("--n-layers", n_layers));
        reg("d_ff", app->add_option("--d-ff", d_ff));
        reg("context_length", app->add_option("--context-length", context_length));
        reg("stochastic_rounding", app->add_flag("--stochastic-rounding", stochastic_rounding));
    }

    bool given(const std::string& key) const { return opts.at(key)->count() > 0; }

    ExperimentConfig resolve() const {
        nlohmann::json j = nlohmann::json::object();
        auto put = [&](const std::string& key, const nlohmann::json& v) {
            if (given(key)) j[key] = v;
        };
        put("train_corpus", train_corpus);
        put("eval_corpus", eval_corpus);
        put("filter_tags", filter_tags);
        if (no_filter) j["filter_tags"] = nlohmann::json::array();
        put("output_dir", output_dir);
        put("policy", policy);
        put("steps", steps);
        put("seed", seed);
        put("eval_interval", eval_interval);
        put("batch_size", batch_size);
        put("packing", packing);
        put("tokenizer_path", tokenizer);
        put("base_checkpoint", base_checkpoint);
        put("base_tokenizer", base_tokenizer);
        put("init_method", init_method);
        put("embedding_warmup_steps", warmup_steps);
        put("max_eval_chunks", max_eval_chunks);
        put("stochastic_rounding", stochastic_rounding);
        if (given("vocab_size")) j["tokenizer"]["vocab_size"] = vocab_size;
        if (given("schedule")) j["schedule"]["kind"] = schedule;
        if (given("lr")) j["schedule"]["lr_peak"] = lr;
        for (const char* k : {"d_model", "n_layers", "d_ff", "context_length"}) {
            if (!given(k)) continue;
            const std::string key(k);
            j["model"][key] = key == "d_model" ? d_model : key == "n_layers" ? n_layers : key == "d_ff" ? d_ff : context_length;
        }
        if (!config.empty()) {
            std::ifstream in(config);
            nlohmann::json file;
            try {
                file = nlohmann::json::parse(in);
            } catch (const nlohmann::json::exception& e) {
                throw std::invalid_argument("config " + config + " is not valid JSON: " + e.what());
            }
            j.merge_patch(file);
        }
        return ExperimentConfig::from_json(j);
    }
};

void print(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Low-precision continued pretraining and tokenizer-swap experiments"};
    app.require_subcommand(1);

    // tokenizer-train
    auto* tt = app.add_subcommand("tokenizer-train", "train a byte-fallback BPE tokenizer");
    std::vector<std::string> tt_corpus, tt_tags = default_filter_tags();
    TrainerConfig tt_cfg;
    bool tt_no_bytes = false;
    std::string tt_out;
    tt->add_option("--corpus", tt_corpus, "JSON-lines corpus")->required();
    tt->add_option("--filter-tags", tt_tags);
    tt->add_option("--vocab-size", tt_cfg.vocab_size);
    tt->add_option("--character-coverage", tt_cfg.character_coverage);
    tt->add_flag("--no-byte-fallback", tt_no_bytes);
    tt->add_option("-o,--out", tt_out, "tokenizer JSON")->required();

    // init-embeddings
    auto* ie = app.add_subcommand("init-embeddings", "swap a checkpoint's tokenizer and re-initialize embeddings");
    std::string ie_ckpt, ie_old, ie_new, ie_method = "focus_like", ie_out;
    std::vector<std::string> ie_corpus;
    std::uint64_t ie_seed = 0;
    std::size_t ie_window = 2, ie_warmup = 0, ie_batch = 8;
    double ie_lr = 4e-5;
    ie->add_option("--checkpoint", ie_ckpt)->required();
    ie->add_option("--old-tokenizer", ie_old)->required();
    ie->add_option("--new-tokenizer", ie_new)->required();
    ie->add_option("--method", ie_method, "normal_fixed, fitted_normal, random_assign, overlap_heuristic, focus_like");
    ie->add_option("--corpus", ie_corpus, "target-language corpus for auxiliary vectors and warmup");
    ie->add_option("--aux-window", ie_window);
    ie->add_option("--warmup-steps", ie_warmup, "embedding-only warmup steps");
    ie->add_option("--warmup-lr", ie_lr);
    ie->add_option("--batch-size", ie_batch);
    ie->add_option("--seed", ie_seed);
    ie->add_option("-o,--out", ie_out, "output checkpoint directory")->required();

    // train / time-steps / switch-precision share the config flags
    auto* tr = app.add_subcommand("train", "run a full adaptation experiment");
    ConfigFlags tr_flags;
    tr_flags.add(tr);
    auto* ts = app.add_subcommand("time-steps", "time n training steps; the mean excludes the first");
    ConfigFlags ts_flags;
    ts_flags.add(ts);
    std::size_t ts_n = 11;
    std::string ts_out;
    ts->add_option("-n", ts_n, "steps to time");
    ts->add_option("--out", ts_out, "timing JSON");
    auto* sp = app.add_subcommand("switch-precision", "train pure, then continue mixed from a fraction of training");
    ConfigFlags sp_flags;
    sp_flags.add(sp);
    double sp_fraction = 0.86;
    sp->add_option("--fraction", sp_fraction);

    // continue
    auto* co = app.add_subcommand("continue", "resume a run from one of its checkpoints");
    std::string co_dir, co_out;
    std::uint64_t co_from = 0, co_until = 0;
    co->add_option("--run-dir", co_dir)->required()->check(CLI::ExistingDirectory);
    auto* co_from_opt = co->add_option("--from-step", co_from, "default: latest checkpoint");
    auto* co_until_opt = co->add_option("--until-step", co_until, "default: end of schedule");
    co->add_option("--out-dir", co_out, "default: the run directory");

    // eval
    auto* ev = app.add_subcommand("eval", "word- and token-normalized NLL of a checkpoint");
    std::string ev_ckpt, ev_tok, ev_out;
    std::vector<std::string> ev_corpus, ev_tags = default_filter_tags();
    std::size_t ev_max = 64;
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--tokenizer", ev_tok)->required();
    ev->add_option("--corpus", ev_corpus)->required();
    ev->add_option("--filter-tags", ev_tags);
    ev->add_option("--max-chunks", ev_max);
    ev->add_option("--out", ev_out, "report JSON (a CSV is written next to it)");

    // analyze-weights
    auto* aw = app.add_subcommand("analyze-weights", "weight histogram and change since init");
    std::string aw_ckpt, aw_out;
    HistogramSpec aw_spec;
    aw->add_option("--checkpoint", aw_ckpt)->required();
    aw->add_option("--bins", aw_spec.bins);
    aw->add_option("--lo", aw_spec.lo);
    aw->add_option("--hi", aw_spec.hi);
    aw->add_option("--out-dir", aw_out, "writes weights.json and CSVs");

    // plan
    auto* pl = app.add_subcommand("plan", "search the memory-saving configuration space");
    std::string pl_precision = "pure", pl_out;
    HardwareSpec pl_hw;
    ModelShape pl_model;
    double pl_mem_gb = 80;
    bool pl_no_prune = false;
    pl->add_option("--precision", pl_precision, "pure or mixed");
    pl->add_option("--gpus", pl_hw.gpu_count);
    pl->add_option("--memory-gb", pl_mem_gb, "per-device memory");
    pl->add_option("--interconnect-penalty", pl_hw.interconnect_penalty);
    pl->add_option("--params", pl_model.param_count);
    pl->add_option("--layers", pl_model.n_layers);
    pl->add_option("--d-model", pl_model.d_model);
    pl->add_option("--context", pl_model.context_length);
    pl->add_flag("--no-prune", pl_no_prune, "evaluate every point");
    pl->add_option("--out", pl_out, "ranking CSV");

    // ingest-stats
    auto* is = app.add_subcommand("ingest-stats", "count documents read and dropped by the quality filter");
    std::vector<std::string> is_corpus, is_tags = default_filter_tags();
    bool is_no_filter = false;
    is->add_option("--corpus", is_corpus)->required();
    is->add_option("--filter-tags", is_tags);
    is->add_flag("--no-filter", is_no_filter);

    // synth-corpus
    auto* sc = app.add_subcommand("synth-corpus", "write a JSON-lines corpus sampled from a seeded toy language");
    std::uint64_t sc_lang = 1, sc_seed = 0;
    std::size_t sc_docs = 200, sc_words = 60, sc_lexicon = 900, sc_tag_every = 0;
    std::string sc_out;
    sc->add_option("--language-seed", sc_lang);
    sc->add_option("--seed", sc_seed, "sampling seed");
    sc->add_option("--docs", sc_docs);
    sc->add_option("--words", sc_words, "words per document");
    sc->add_option("--lexicon", sc_lexicon);
    sc->add_option("--tag-every", sc_tag_every, "mark every n-th document as noisy (0 = never)");
    sc->add_option("-o,--out", sc_out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (*tt) {
            tt_cfg.byte_fallback = !tt_no_bytes;
            IngestReport rep;
            const auto docs = ingest_texts(tt_corpus, tt_tags, &rep);
            const Tokenizer tok = train_bpe(docs, tt_cfg);
            tok.save(tt_out);
            print({{"vocab_size", tok.size()}, {"fertility", fertility(tok, docs)}, {"ingest", rep.to_json()}});
        } else if (*ie) {
            const Checkpoint ck = load_checkpoint(ie_ckpt);
            const Tokenizer old_tok = Tokenizer::load(ie_old);
            const Tokenizer new_tok = Tokenizer::load(ie_new);
            InitMethod method;
            method.kind = init_method_from_string(ie_method);
            std::vector<std::vector<std::int32_t>> ids;
            for (const auto& d : ingest_texts(ie_corpus, default_filter_tags())) {
                auto e = new_tok.encode(d);
                if (!e.empty()) ids.push_back(std::move(e));
            }
            std::optional<AuxEmbeddings> aux;
            if (method.kind == InitMethodKind::FocusLike) {
                if (ids.empty()) throw std::invalid_argument("focus_like needs --corpus for auxiliary vectors");
                aux = train_aux_embeddings(ids, new_tok.size(), ie_window, 0, derive_seed(ie_seed, "aux"));
            }
            SwapReport rep;
            ParameterSet m = swap_vocabulary(ck.params, old_tok, new_tok, method, derive_seed(ie_seed, "init-method"),
                                             aux ? &*aux : nullptr, ck.policy.weights_fmt, &rep);
            if (ie_warmup > 0) {
                if (ids.empty()) throw std::invalid_argument("--warmup-steps needs --corpus");
                WarmupConfig wc;
                wc.steps = ie_warmup;
                wc.batch_size = ie_batch;
                wc.lr = ie_lr;
                wc.seed = derive_seed(ie_seed, "embedding-warmup");
                embedding_warmup(m, pack_documents(ids, PackingMode::BosMasked, m.config().context_length), wc);
                quantize_parameters(m, ck.policy.weights_fmt);
            }
            m.snapshot_init();
            save_checkpoint(ie_out, m, ck.policy, nullptr, {{"init_method", ie_method}, {"seed", ie_seed}});
            print({{"method", ie_method},
                   {"overlap", rep.input.overlap_count},
                   {"fell_back", rep.input.fell_back},
                   {"aux_missing", rep.input.aux_missing},
                   {"out", ie_out}});
        } else if (*tr) {
            const RunSummary s = run_adaptation(tr_flags.resolve());
            print({{"output_dir", s.output_dir},
                   {"nll_per_word", s.final_eval.nll_per_word},
                   {"nll_per_token", s.final_eval.nll_per_token}});
        } else if (*ts) {
            const TimingReport r = time_steps(ts_flags.resolve(), ts_n);
            if (!ts_out.empty()) write_text(ts_out, r.to_json().dump(2) + "\n");
            print(r.to_json());
        } else if (*sp) {
            const SwitchResult r = switch_precision_at(sp_flags.resolve(), sp_fraction);
            print({{"switch_step", r.switch_step},
                   {"pure", {{"dir", r.pure.output_dir}, {"nll_per_word", r.pure.final_eval.nll_per_word}}},
                   {"pure_pp", {{"dir", r.switched.output_dir}, {"nll_per_word", r.switched.final_eval.nll_per_word}}}});
        } else if (*co) {
            std::optional<std::uint64_t> from, until;
            if (co_from_opt->count()) from = co_from;
            if (co_until_opt->count()) until = co_until;
            const RunSummary s = continue_run(co_dir, from, until, co_out);
            print({{"output_dir", s.output_dir}, {"nll_per_word", s.final_eval.nll_per_word}});
        } else if (*ev) {
            const Checkpoint ck = load_checkpoint(ev_ckpt);
            const Tokenizer tok = Tokenizer::load(ev_tok);
            std::vector<EvalChunk> chunks;
            for (const auto& t : ingest_texts(ev_corpus, ev_tags)) {
                if (chunks.size() >= ev_max) break;
                chunks.push_back({"chunk-" + std::to_string(chunks.size()), t});
            }
            const EvalReport r = word_normalized_nll(ck.params, tok, chunks, ck.policy);
            if (!ev_out.empty()) {
                write_text(ev_out, r.to_json().dump(2) + "\n");
                write_text(fs::path(ev_out).replace_extension(".csv"), r.to_csv());
            }
            print(r.to_json());
        } else if (*aw) {
            const Checkpoint ck = load_checkpoint(aw_ckpt);
            std::vector<std::vector<double>> values;
            if (ck.optimizer) values = effective_weights(ck.params, *ck.optimizer);
            const bool has_init = ck.params.size() > 0 && ck.params[0].init_snapshot.has_value();
            const WeightReport r = has_init ? param_change(ck.params, values, aw_spec)
                                            : weight_histogram(ck.params, aw_spec, values);
            if (!aw_out.empty()) {
                write_text(fs::path(aw_out) / "weights.json", r.to_json().dump(2) + "\n");
                write_text(fs::path(aw_out) / "weights_summary.csv", r.summary_csv());
                write_text(fs::path(aw_out) / "weights_histogram.csv", r.histogram_csv());
            }
            std::cout << r.summary_csv();
        } else if (*pl) {
            pl_hw.per_gpu_memory = pl_mem_gb * 1e9;
            const PlanResult r = best_config(precision_from_string(pl_precision), pl_model, pl_hw, {}, !pl_no_prune);
            if (!pl_out.empty()) write_text(pl_out, r.ranking_csv());
            nlohmann::json j = r.to_json();
            print({{"best", j["best"]}, {"feasible", r.ranked.size()}, {"evaluated", r.all.size()}});
        } else if (*is) {
            const auto rep = ingest(is_corpus, is_no_filter ? std::vector<std::string>{} : is_tags, {});
            print(rep.to_json());
        } else if (*sc) {
            const auto lang = SyntheticLanguage::make(sc_lang, 3, sc_lexicon);
            const auto docs = lang.sample_documents(sc_docs, sc_words, sc_seed);
            std::ostringstream os;
            for (std::size_t i = 0; i < docs.size(); ++i) {
                nlohmann::json w = nlohmann::json::array();
                if (sc_tag_every > 0 && (i + 1) % sc_tag_every == 0) w.push_back("noisy");
                os << nlohmann::json{{"text", docs[i]}, {"quality_warnings", w}}.dump() << "\n";
            }
            write_text(sc_out, os.str());
            print({{"docs", docs.size()}, {"out", sc_out}});
        }
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
