// SPDX-License-Identifier: Apache-2.0

#include "budgetlab/experiment.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "budgetlab/checkpoint.h"
#include "budgetlab/rng.h"
#include "budgetlab/text.h"
#include "budgetlab/trainer.h"

namespace budgetlab {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Ingestion

const std::vector<std::string>& default_filter_tags() {
    static const std::vector<std::string> tags{"adult", "noisy", "header", "footer", "tiny", "short_sentences"};
    return tags;
}

nlohmann::json IngestReport::to_json() const {
    return {{"read", read}, {"retained", retained}, {"dropped", dropped()}, {"dropped_by_tag", dropped_by_tag}};
}

IngestReport ingest(const std::vector<std::string>& paths, const std::vector<std::string>& filter_tags,
                    const std::function<void(CorpusDocument&&)>& sink) {
    const std::set<std::string> active(filter_tags.begin(), filter_tags.end());
    IngestReport report;
    for (const auto& path : paths) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open corpus file " + path);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            const std::string where = path + ":" + std::to_string(line_no) + ": ";
            CorpusDocument doc;
            try {
                const auto j = nlohmann::json::parse(line);
                if (!j.is_object()) throw std::invalid_argument(where + "expected a JSON object");
                if (!j.contains("text") || !j["text"].is_string()) {
                    throw std::invalid_argument(where + "missing string field 'text'");
                }
                doc.text = j["text"].get<std::string>();
                if (j.contains("quality_warnings")) {
                    const auto& w = j["quality_warnings"];
                    if (!w.is_array()) throw std::invalid_argument(where + "'quality_warnings' must be a list");
                    for (const auto& t : w) {
                        if (!t.is_string()) throw std::invalid_argument(where + "quality warnings must be strings");
                        doc.quality_warnings.push_back(t.get<std::string>());
                    }
                }
            } catch (const nlohmann::json::exception& e) {
                throw std::invalid_argument(where + "malformed JSON (" + e.what() + ")");
            }
            ++report.read;
            bool drop = false;
            for (const auto& t : doc.quality_warnings) {
                if (active.count(t)) {
                    ++report.dropped_by_tag[t];
                    drop = true;
                }
            }
            if (drop) continue;
            ++report.retained;
            if (sink) sink(std::move(doc));
        }
    }
    return report;
}

std::vector<std::string> ingest_texts(const std::vector<std::string>& paths,
                                      const std::vector<std::string>& filter_tags, IngestReport* report) {
    std::vector<std::string> out;
    IngestReport r = ingest(paths, filter_tags, [&](CorpusDocument&& d) { out.push_back(std::move(d.text)); });
    if (report) *report = r;
    return out;
}

// ---------------------------------------------------------------------------
// Configuration

nlohmann::json to_json(const ScheduleSpec& s) {
    return {{"kind", to_string(s.kind)},
            {"total_steps", s.total_steps},
            {"warmup_frac", s.warmup_frac},
            {"lr_peak", s.lr_peak},
            {"cosine_end_lr", s.cosine_end_lr},
            {"cosine_frac", s.cosine_frac},
            {"constant_frac", s.constant_frac},
            {"anneal_frac", s.anneal_frac},
            {"final_lr", s.final_lr}};
}

ScheduleSpec schedule_from_json(const nlohmann::json& j) {
    ScheduleSpec s;
    if (j.contains("kind")) s.kind = schedule_kind_from_string(j["kind"].get<std::string>());
    // Start from the preset of the kind so partial specs are usable.
    s = s.kind == ScheduleKind::Infinite ? ScheduleSpec::infinite(j.value("total_steps", s.total_steps))
                                         : ScheduleSpec::cosine_floor(j.value("total_steps", s.total_steps));
    s.warmup_frac = j.value("warmup_frac", s.warmup_frac);
    s.lr_peak = j.value("lr_peak", s.lr_peak);
    s.cosine_end_lr = j.value("cosine_end_lr", s.cosine_end_lr);
    s.cosine_frac = j.value("cosine_frac", s.cosine_frac);
    s.constant_frac = j.value("constant_frac", s.constant_frac);
    s.anneal_frac = j.value("anneal_frac", s.anneal_frac);
    s.final_lr = j.value("final_lr", s.final_lr);
    s.validate();
    return s;
}

nlohmann::json to_json(const TrainerConfig& t) {
    return {{"vocab_size", t.vocab_size},
            {"character_coverage", t.character_coverage},
            {"byte_fallback", t.byte_fallback},
            {"seed", t.seed}};
}

TrainerConfig trainer_config_from_json(const nlohmann::json& j) {
    TrainerConfig t;
    t.vocab_size = j.value("vocab_size", t.vocab_size);
    t.character_coverage = j.value("character_coverage", t.character_coverage);
    t.byte_fallback = j.value("byte_fallback", t.byte_fallback);
    t.seed = j.value("seed", t.seed);
    t.validate();
    return t;
}

void ExperimentConfig::validate() const {
    model.validate();
    precision_policy();
    schedule.validate();
    if (steps == 0) throw std::invalid_argument("ExperimentConfig: steps must be >= 1");
    if (schedule.total_steps != steps) {
        throw std::invalid_argument("ExperimentConfig: schedule.total_steps (" + std::to_string(schedule.total_steps) +
                                    ") must equal steps (" + std::to_string(steps) + ")");
    }
    if (batch_size == 0) throw std::invalid_argument("ExperimentConfig: batch_size must be >= 1");
    if (max_eval_chunks == 0) throw std::invalid_argument("ExperimentConfig: max_eval_chunks must be >= 1");
    if (!base_tokenizer.empty() && base_checkpoint.empty()) {
        throw std::invalid_argument("ExperimentConfig: base_tokenizer needs base_checkpoint");
    }
    adamw().validate();
}

PrecisionPolicy ExperimentConfig::precision_policy() const { return PrecisionPolicy::from_name(policy); }

AdamWConfig ExperimentConfig::adamw() const {
    AdamWConfig a;
    a.lr_peak = schedule.lr_peak;
    a.betas = betas;
    a.weight_decay = weight_decay;
    a.eps = eps;
    if (stochastic_rounding) a.rounding = Stochastic{derive_seed(seed, "rounding")};
    return a;
}

nlohmann::json ExperimentConfig::to_json() const {
    return {{"model", budgetlab::to_json(model)},
            {"policy", policy},
            {"stochastic_rounding", stochastic_rounding},
            {"schedule", budgetlab::to_json(schedule)},
            {"steps", steps},
            {"batch_size", batch_size},
            {"packing", to_string(packing)},
            {"betas", {betas.first, betas.second}},
            {"weight_decay", weight_decay},
            {"eps", eps},
            {"tokenizer_path", tokenizer_path},
            {"tokenizer", budgetlab::to_json(tokenizer)},
            {"base_checkpoint", base_checkpoint},
            {"base_tokenizer", base_tokenizer},
            {"init_method",
             {{"kind", to_string(init_method.kind)},
              {"normal_std", init_method.normal_std},
              {"top_k", init_method.top_k},
              {"temperature", init_method.temperature}}},
            {"aux_window", aux_window},
            {"aux_dim", aux_dim},
            {"embedding_warmup_steps", embedding_warmup_steps},
            {"embedding_warmup_lr", embedding_warmup_lr},
            {"train_corpus", train_corpus},
            {"eval_corpus", eval_corpus},
            {"filter_tags", filter_tags},
            {"max_eval_chunks", max_eval_chunks},
            {"seed", seed},
            {"eval_interval", eval_interval},
            {"output_dir", output_dir}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    try {
        ExperimentConfig c;
        if (j.contains("model")) c.model = model_config_from_json(j["model"]);
        c.policy = j.value("policy", c.policy);
        c.stochastic_rounding = j.value("stochastic_rounding", c.stochastic_rounding);
        c.steps = j.value("steps", c.steps);
        c.schedule = j.contains("schedule") ? schedule_from_json(j["schedule"]) : ScheduleSpec::cosine_floor(c.steps);
        if (!j.contains("schedule") || !j["schedule"].contains("total_steps")) c.schedule.total_steps = c.steps;
        if (!j.contains("steps")) c.steps = c.schedule.total_steps;
        c.batch_size = j.value("batch_size", c.batch_size);
        if (j.contains("packing")) c.packing = packing_mode_from_string(j["packing"].get<std::string>());
        if (j.contains("betas")) {
            const auto b = j["betas"].get<std::vector<double>>();
            if (b.size() != 2) throw std::invalid_argument("ExperimentConfig: betas needs two values");
            c.betas = {b[0], b[1]};
        }
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.eps = j.value("eps", c.eps);
        c.tokenizer_path = j.value("tokenizer_path", c.tokenizer_path);
        if (j.contains("tokenizer")) c.tokenizer = trainer_config_from_json(j["tokenizer"]);
        c.base_checkpoint = j.value("base_checkpoint", c.base_checkpoint);
        c.base_tokenizer = j.value("base_tokenizer", c.base_tokenizer);
        if (j.contains("init_method")) {
            const auto& m = j["init_method"];
            if (m.is_string()) {
                c.init_method.kind = init_method_from_string(m.get<std::string>());
            } else {
                if (m.contains("kind")) c.init_method.kind = init_method_from_string(m["kind"].get<std::string>());
                c.init_method.normal_std = m.value("normal_std", c.init_method.normal_std);
                c.init_method.top_k = m.value("top_k", c.init_method.top_k);
                c.init_method.temperature = m.value("temperature", c.init_method.temperature);
            }
        }
        c.aux_window = j.value("aux_window", c.aux_window);
        c.aux_dim = j.value("aux_dim", c.aux_dim);
        c.embedding_warmup_steps = j.value("embedding_warmup_steps", c.embedding_warmup_steps);
        c.embedding_warmup_lr = j.value("embedding_warmup_lr", c.embedding_warmup_lr);
        c.train_corpus = j.value("train_corpus", c.train_corpus);
        c.eval_corpus = j.value("eval_corpus", c.eval_corpus);
        c.filter_tags = j.value("filter_tags", c.filter_tags);
        c.max_eval_chunks = j.value("max_eval_chunks", c.max_eval_chunks);
        c.seed = j.value("seed", c.seed);
        c.eval_interval = j.value("eval_interval", c.eval_interval);
        c.output_dir = j.value("output_dir", c.output_dir);
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("ExperimentConfig: ") + e.what());
    }
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("config " + path + " is not valid JSON: " + e.what());
    }
    return from_json(j);
}

const std::vector<int>& eval_grid_percentages() {
    static const std::vector<int> grid{0, 10, 30, 50, 70, 90, 100};
    return grid;
}

std::uint64_t grid_step(int pct, std::uint64_t steps) {
    return static_cast<std::uint64_t>(std::floor(static_cast<double>(pct) / 100.0 * static_cast<double>(steps) + 1e-9));
}

nlohmann::json RunSummary::to_json() const {
    nlohmann::json ev = nlohmann::json::array();
    for (const auto& e : evals) ev.push_back({{"pct", e.pct}, {"step", e.step}, {"report", e.report.to_json()}});
    nlohmann::json j{{"output_dir", output_dir},
                     {"steps", steps},
                     {"evals", ev},
                     {"final_eval", final_eval.to_json()},
                     {"weights", weights.to_json()}};
    if (switch_step) j["switch_step"] = *switch_step;
    return j;
}

nlohmann::json TimingReport::to_json() const {
    return {{"raw_seconds", raw_seconds}, {"mean_seconds_excluding_first", mean_seconds}, {"n", raw_seconds.size()}};
}

TimingReport summarize_timings(std::vector<double> raw_seconds) {
    if (raw_seconds.size() < 2) throw std::invalid_argument("summarize_timings: need at least two steps");
    TimingReport r;
    double s = 0.0;
    for (std::size_t i = 1; i < raw_seconds.size(); ++i) s += raw_seconds[i];
    r.mean_seconds = s / static_cast<double>(raw_seconds.size() - 1);
    r.raw_seconds = std::move(raw_seconds);
    return r;
}

// ---------------------------------------------------------------------------
// Runs

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

std::string ckpt_name(std::uint64_t step) { return "ckpt-step-" + std::to_string(step); }

struct RunData {
    Tokenizer tok;
    std::vector<std::vector<std::int32_t>> train_ids;
    std::vector<PackedBlock> blocks;
    std::vector<EvalChunk> chunks;
    IngestReport train_report;
};

RunData prepare_data(const ExperimentConfig& cfg, const Tokenizer* fixed_tok) {
    RunData d;
    if (cfg.train_corpus.empty()) throw std::invalid_argument("no training corpus given");
    std::vector<std::string> train = ingest_texts(cfg.train_corpus, cfg.filter_tags, &d.train_report);
    std::vector<std::string> eval;
    if (!cfg.eval_corpus.empty()) {
        eval = ingest_texts(cfg.eval_corpus, cfg.filter_tags);
    } else {
        if (train.size() < 2) throw std::invalid_argument("need at least two training documents to hold out eval text");
        const std::size_t held = std::max<std::size_t>(1, train.size() / 10);
        eval.assign(train.end() - static_cast<std::ptrdiff_t>(held), train.end());
        train.resize(train.size() - held);
    }
    if (train.empty()) throw std::invalid_argument("the training corpus is empty after filtering");

    if (fixed_tok) {
        d.tok = *fixed_tok;
    } else if (!cfg.tokenizer_path.empty()) {
        d.tok = Tokenizer::load(cfg.tokenizer_path);
    } else {
        d.tok = train_bpe(train, cfg.tokenizer);
    }
    for (const auto& t : train) {
        auto ids = d.tok.encode(t);
        if (!ids.empty()) d.train_ids.push_back(std::move(ids));
    }
    d.blocks = pack_documents(d.train_ids, cfg.packing, cfg.model.context_length);
    for (const auto& t : eval) {
        if (d.chunks.size() >= cfg.max_eval_chunks) break;
        if (count_words(t) == 0) continue;
        d.chunks.push_back({"eval-" + std::to_string(d.chunks.size()), t});
    }
    if (d.chunks.empty()) throw std::invalid_argument("no evaluation text after filtering");
    return d;
}

ParameterSet build_model(const ExperimentConfig& cfg, const RunData& data, const PrecisionPolicy& policy,
                         const fs::path& dir) {
    ParameterSet model;
    if (!cfg.base_checkpoint.empty()) {
        model = load_checkpoint(cfg.base_checkpoint).params;
        if (!cfg.base_tokenizer.empty()) {
            const Tokenizer old_tok = Tokenizer::load(cfg.base_tokenizer);
            if (!(old_tok == data.tok)) {
                std::optional<AuxEmbeddings> aux;
                if (cfg.init_method.kind == InitMethodKind::FocusLike) {
                    aux = train_aux_embeddings(data.train_ids, data.tok.size(), cfg.aux_window, cfg.aux_dim,
                                               derive_seed(cfg.seed, "aux"));
                }
                SwapReport rep;
                model = swap_vocabulary(model, old_tok, data.tok, cfg.init_method, derive_seed(cfg.seed, "init-method"),
                                        aux ? &*aux : nullptr, policy.weights_fmt, &rep);
                write_text(dir / "init_report.json",
                           nlohmann::json{{"method", to_string(cfg.init_method.kind)},
                                          {"overlap", rep.input.overlap_count},
                                          {"new_vocab", data.tok.size()},
                                          {"old_vocab", old_tok.size()},
                                          {"fell_back", rep.input.fell_back},
                                          {"aux_missing", rep.input.aux_missing}}
                                   .dump(2) +
                               "\n");
                if (cfg.embedding_warmup_steps > 0) {
                    WarmupConfig wc;
                    wc.steps = cfg.embedding_warmup_steps;
                    wc.batch_size = cfg.batch_size;
                    wc.lr = cfg.embedding_warmup_lr;
                    wc.adamw = cfg.adamw();
                    if (policy.weights_fmt.is_carrier()) wc.policy = policy;
                    wc.seed = derive_seed(cfg.seed, "embedding-warmup");
                    embedding_warmup(model, data.blocks, wc);
                }
            }
        }
        if (model.config().vocab_size != data.tok.size()) {
            throw std::invalid_argument("base checkpoint vocabulary (" + std::to_string(model.config().vocab_size) +
                                        ") does not match the tokenizer (" + std::to_string(data.tok.size()) +
                                        "); pass base_tokenizer to swap it");
        }
        if (model.config().context_length != cfg.model.context_length) {
            throw std::invalid_argument("base checkpoint context length differs from the configured one");
        }
    } else {
        ModelConfig mc = cfg.model;
        mc.vocab_size = data.tok.size();
        model = init_model(mc, derive_seed(cfg.seed, "model-init"), policy.weights_fmt);
    }
    quantize_parameters(model, policy.weights_fmt);
    model.snapshot_init();
    return model;
}

std::vector<nlohmann::json> read_events(const fs::path& path) {
    std::vector<nlohmann::json> out;
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(nlohmann::json::parse(line));
    }
    return out;
}

/// Mutable state of one run directory.
class Run {
public:
    Run(ExperimentConfig cfg, PrecisionPolicy policy, RunData data, ParameterSet params, OptimizerState state,
        std::set<std::uint64_t> extra_ckpts)
        : cfg_(std::move(cfg)),
          policy_(policy),
          data_(std::move(data)),
          params_(std::move(params)),
          state_(std::move(state)),
          extra_ckpts_(std::move(extra_ckpts)),
          dir_(cfg_.output_dir) {
        loop_.schedule = cfg_.schedule;
        loop_.adamw = cfg_.adamw();
        loop_.policy = policy_;
        loop_.batch_size = cfg_.batch_size;
        loop_.data_seed = derive_seed(cfg_.seed, "data-order");
        for (int pct : eval_grid_percentages()) grid_[grid_step(pct, cfg_.steps)].push_back(pct);
    }

    void open_log(bool append) {
        log_.open(dir_ / "events.jsonl", append ? std::ios::app : std::ios::trunc);
        if (!log_) throw std::runtime_error("cannot write " + (dir_ / "events.jsonl").string());
    }

    void event(const nlohmann::json& j) {
        log_ << j.dump() << '\n';
        log_.flush();
    }

    void write_static_files() {
        ExperimentConfig resolved = cfg_;
        resolved.model.vocab_size = data_.tok.size();
        write_text(dir_ / "config.json", resolved.to_json().dump(2) + "\n");
        data_.tok.save(dir_ / "tokenizer.json");
    }

    /// Evaluations and checkpoints due at `step` (after it has been taken).
    void after_step(std::uint64_t step) {
        const auto it = grid_.find(step);
        const bool interval = cfg_.eval_interval > 0 && step % cfg_.eval_interval == 0;
        if (it != grid_.end() || interval) {
            const EvalReport r = word_normalized_nll(params_, data_.tok, data_.chunks, policy_);
            if (it != grid_.end()) {
                for (int pct : it->second) {
                    event({{"event", "eval"}, {"step", step}, {"pct", pct}, {"report", r.to_json()}});
                }
            } else {
                event({{"event", "eval"}, {"step", step}, {"pct", -1}, {"report", r.to_json()}});
            }
        }
        if (it != grid_.end() || extra_ckpts_.count(step)) {
            nlohmann::json meta{{"step", step}, {"seed", cfg_.seed}, {"policy", cfg_.policy}};
            save_checkpoint((dir_ / ckpt_name(step)).string(), params_, policy_, &state_, meta);
            event({{"event", "checkpoint"}, {"step", step}, {"path", ckpt_name(step)}});
        }
    }

    void train(std::uint64_t first, std::uint64_t last) {
        std::vector<const PackedBlock*> batch;
        for (std::uint64_t step = first; step <= last; ++step) {
            const auto idx = batch_indices(loop_.data_seed, step, data_.blocks.size(), loop_.batch_size);
            batch.clear();
            for (std::size_t i : idx) batch.push_back(&data_.blocks[i]);
            const double lr = lr_at(loop_.schedule, step);
            StepStats s;
            try {
                s = train_step(params_, state_, batch, loop_.policy, loop_.adamw, lr);
            } catch (const NumericalError& e) {
                dump_nan(step, lr, idx, e.what());
                throw;
            }
            event({{"event", "step"},
                   {"step", step},
                   {"lr", lr},
                   {"loss", s.loss},
                   {"grad_norm", s.grad_norm},
                   {"tokens", s.tokens}});
            after_step(step);
        }
    }

    void dump_nan(std::uint64_t step, double lr, const std::vector<std::size_t>& idx, const std::string& what) {
        const fs::path dump = dir_ / "nan-dump";
        save_checkpoint(dump.string(), params_, policy_, &state_, {{"step", step}});
        nlohmann::json batch = nlohmann::json::array();
        for (std::size_t i : idx) batch.push_back({{"block", i}, {"token_ids", data_.blocks[i].token_ids}});
        write_text(dump / "diagnostic.json",
                   nlohmann::json{{"step", step}, {"lr", lr}, {"error", what}, {"batch", batch}}.dump(2) + "\n");
        event({{"event", "nan"}, {"step", step}, {"error", what}, {"dump", "nan-dump"}});
    }

    RunSummary finish() {
        RunSummary sum;
        sum.output_dir = dir_.string();
        sum.steps = cfg_.steps;
        for (const auto& e : read_events(dir_ / "events.jsonl")) {
            if (e.at("event") != "eval") continue;
            sum.evals.push_back({e.at("pct").get<int>(), e.at("step").get<std::uint64_t>(),
                                 EvalReport::from_json(e.at("report"))});
        }
        sum.final_eval = word_normalized_nll(params_, data_.tok, data_.chunks, policy_);
        sum.weights = param_change(params_, effective_weights(params_, state_));
        write_text(dir_ / "eval.json", sum.final_eval.to_json().dump(2) + "\n");
        write_text(dir_ / "eval.csv", sum.final_eval.to_csv());
        write_text(dir_ / "weights.json", sum.weights.to_json().dump(2) + "\n");
        write_text(dir_ / "weights_summary.csv", sum.weights.summary_csv());
        write_text(dir_ / "weights_histogram.csv", sum.weights.histogram_csv());
        return sum;
    }

    const ExperimentConfig& cfg() const { return cfg_; }
    const fs::path& dir() const { return dir_; }

private:
    ExperimentConfig cfg_;
    PrecisionPolicy policy_;
    RunData data_;
    ParameterSet params_;
    OptimizerState state_;
    std::set<std::uint64_t> extra_ckpts_;
    fs::path dir_;
    LoopConfig loop_;
    std::map<std::uint64_t, std::vector<int>> grid_;
    std::ofstream log_;
};

void write_summary(const RunSummary& s) {
    write_text(fs::path(s.output_dir) / "summary.json", s.to_json().dump(2) + "\n");
}

RunSummary run_fresh(const ExperimentConfig& cfg, const std::set<std::uint64_t>& extra_ckpts) {
    cfg.validate();
    if (cfg.output_dir.empty()) throw std::invalid_argument("run: output_dir is required");
    const fs::path dir(cfg.output_dir);
    fs::create_directories(dir);
    const PrecisionPolicy policy = cfg.precision_policy();
    RunData data = prepare_data(cfg, nullptr);
    ParameterSet params = build_model(cfg, data, policy, dir);
    OptimizerState state = init_optimizer_state(params, policy);
    ExperimentConfig resolved = cfg;
    resolved.model = params.config();
    Run run(resolved, policy, std::move(data), std::move(params), std::move(state), extra_ckpts);
    run.write_static_files();
    run.open_log(false);
    run.event({{"event", "start"}, {"steps", cfg.steps}, {"policy", cfg.policy}, {"seed", cfg.seed}});
    run.after_step(0);
    run.train(1, cfg.steps);
    RunSummary s = run.finish();
    write_summary(s);
    return s;
}

std::uint64_t latest_checkpoint(const fs::path& dir) {
    std::optional<std::uint64_t> best;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (e.is_directory() && name.rfind("ckpt-step-", 0) == 0) {
            const std::uint64_t s = std::stoull(name.substr(10));
            if (!best || s > *best) best = s;
        }
    }
    if (!best) throw std::runtime_error("no checkpoints in " + dir.string());
    return *best;
}

/// Resumes from src/<ckpt at from>; a policy override converts the state.
RunSummary resume(const fs::path& src, std::optional<std::uint64_t> from, std::optional<std::uint64_t> until,
                  const fs::path& out, const std::optional<std::string>& switch_to) {
    ExperimentConfig cfg = ExperimentConfig::load((src / "config.json").string());
    const std::uint64_t start = from ? *from : latest_checkpoint(src);
    const std::uint64_t stop = until ? *until : cfg.steps;
    if (stop > cfg.steps) {
        throw std::invalid_argument("continue: until_step " + std::to_string(stop) + " is beyond the schedule (" +
                                    std::to_string(cfg.steps) + " steps)");
    }
    if (stop < start) throw std::invalid_argument("continue: until_step is before the checkpoint step");
    const fs::path ck_dir = src / ckpt_name(start);
    if (!fs::exists(ck_dir)) throw std::runtime_error("no checkpoint at step " + std::to_string(start) + " in " + src.string());
    Checkpoint ck = load_checkpoint(ck_dir.string());
    if (!ck.optimizer) throw std::runtime_error("checkpoint " + ck_dir.string() + " has no optimizer state");
    const Tokenizer tok = Tokenizer::load(src / "tokenizer.json");

    PrecisionPolicy policy = ck.policy;
    OptimizerState state = std::move(*ck.optimizer);
    if (switch_to) {
        cfg.policy = *switch_to;
        policy = cfg.precision_policy();
        for (auto& p : ck.params.params()) {
            for (double& x : p.values) x = quantize(x, policy.weights_fmt);
        }
        for (auto* buf : {&state.m, &state.v}) {
            for (auto& t : *buf) {
                for (double& x : t) x = quantize(x, policy.optimizer_state_fmt);
            }
        }
        if (policy.master_weights) {
            std::vector<std::vector<double>> master;
            for (const auto& p : ck.params.params()) master.push_back(p.values);
            state.master = std::move(master);
        } else {
            state.master.reset();
        }
    }

    cfg.output_dir = out.string();
    fs::create_directories(out);
    // Keep the event history up to the resume point.
    std::vector<nlohmann::json> history = read_events(src / "events.jsonl");
    RunData data = prepare_data(cfg, &tok);
    Run run(cfg, policy, std::move(data), std::move(ck.params), std::move(state), {});
    run.write_static_files();
    run.open_log(false);
    for (const auto& e : history) {
        if (e.contains("step") && e["step"].get<std::uint64_t>() > start) continue;
        if (e.at("event") == "nan") continue;
        run.event(e);
    }
    if (switch_to) {
        run.event({{"event", "switch_precision"}, {"step", start}, {"to", *switch_to}});
    } else {
        run.event({{"event", "resume"}, {"step", start}});
    }
    run.train(start + 1, stop);
    RunSummary s = run.finish();
    if (switch_to) s.switch_step = start;
    write_summary(s);
    return s;
}

}  // namespace

RunSummary run_adaptation(const ExperimentConfig& cfg) { return run_fresh(cfg, {}); }

RunSummary continue_run(const std::string& run_dir, std::optional<std::uint64_t> from_step,
                        std::optional<std::uint64_t> until_step, const std::string& out_dir) {
    return resume(run_dir, from_step, until_step, out_dir.empty() ? fs::path(run_dir) : fs::path(out_dir),
                  std::nullopt);
}

SwitchResult switch_precision_at(const ExperimentConfig& cfg, double fraction) {
    if (!(fraction > 0.0 && fraction < 1.0)) {
        throw std::invalid_argument("switch_precision_at: fraction must lie strictly between 0 and 1");
    }
    if (cfg.policy != "pure") throw std::invalid_argument("switch_precision_at: the first branch must be pure");
    if (cfg.output_dir.empty()) throw std::invalid_argument("switch_precision_at: output_dir is required");
    SwitchResult r;
    r.switch_step =
        static_cast<std::uint64_t>(std::floor(fraction * static_cast<double>(cfg.steps) + 1e-9));
    if (r.switch_step == 0 || r.switch_step >= cfg.steps) {
        throw std::invalid_argument("switch_precision_at: fraction leaves no steps on one side of the switch");
    }
    ExperimentConfig pure = cfg;
    pure.output_dir = (fs::path(cfg.output_dir) / "pure").string();
    r.pure = run_fresh(pure, {r.switch_step});
    r.switched = resume(pure.output_dir, r.switch_step, std::nullopt, fs::path(cfg.output_dir) / "pure_pp",
                        std::string("mixed"));
    return r;
}

TimingReport time_steps(const ExperimentConfig& cfg, std::size_t n) {
    if (n < 2) throw std::invalid_argument("time_steps: need at least two steps");
    cfg.validate();
    const PrecisionPolicy policy = cfg.precision_policy();
    RunData data = prepare_data(cfg, nullptr);
    ParameterSet params;
    if (cfg.base_checkpoint.empty()) {
        ModelConfig mc = cfg.model;
        mc.vocab_size = data.tok.size();
        params = init_model(mc, derive_seed(cfg.seed, "model-init"), policy.weights_fmt);
    } else {
        params = build_model(cfg, data, policy, fs::temp_directory_path());
    }
    OptimizerState state = init_optimizer_state(params, policy);
    const AdamWConfig adamw = cfg.adamw();
    const std::uint64_t data_seed = derive_seed(cfg.seed, "data-order");
    std::vector<double> raw;
    std::vector<const PackedBlock*> batch;
    for (std::size_t step = 1; step <= n; ++step) {
        batch.clear();
        for (std::size_t i : batch_indices(data_seed, step, data.blocks.size(), cfg.batch_size)) {
            batch.push_back(&data.blocks[i]);
        }
        const double lr = step <= cfg.steps ? lr_at(cfg.schedule, step) : cfg.schedule.lr_peak;
        const auto t0 = std::chrono::steady_clock::now();
        train_step(params, state, batch, policy, adamw, lr);
        const auto t1 = std::chrono::steady_clock::now();
        raw.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    return summarize_timings(std::move(raw));
}

}  // namespace budgetlab
