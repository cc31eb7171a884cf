// SPDX-License-Identifier: Apache-2.0
//
// End-to-end runs: corpus ingestion, tokenizer and model setup (optionally
// swapping the tokenizer of a base checkpoint), the training loop with a
// fixed evaluation grid, precision switching and step timing.
//
// Run directory layout:
//   config.json            resolved ExperimentConfig
//   tokenizer.json
//   events.jsonl           one JSON object per step / eval / checkpoint
//   ckpt-step-<n>/         checkpoint at every eval grid step
//   eval.json, eval.csv    final EvalReport
//   weights.json, weights_summary.csv, weights_histogram.csv
//   summary.json
//   nan-dump/              only after a non-finite loss

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "budgetlab/embedding_init.h"
#include "budgetlab/evaluation.h"
#include "budgetlab/model.h"
#include "budgetlab/optimizer.h"
#include "budgetlab/schedule.h"
#include "budgetlab/tokenizer.h"

namespace budgetlab {

// ---------------------------------------------------------------------------
// Corpus ingestion

struct CorpusDocument {
    std::string text;
    std::vector<std::string> quality_warnings;
};

/// adult, noisy, header, footer, tiny, short_sentences
const std::vector<std::string>& default_filter_tags();

struct IngestReport {
    std::size_t read = 0;
    std::size_t retained = 0;
    /// A document carrying several active tags counts once per tag.
    std::map<std::string, std::size_t> dropped_by_tag;

    std::size_t dropped() const { return read - retained; }
    nlohmann::json to_json() const;
};

/// Reads JSON-lines files ({"text": ..., "quality_warnings": [...]}) in
/// order and passes every document without an active tag to `sink`.
/// Blank lines are skipped. Throws std::invalid_argument naming the file and
/// line for malformed input, std::runtime_error if a file cannot be opened.
IngestReport ingest(const std::vector<std::string>& paths, const std::vector<std::string>& filter_tags,
                    const std::function<void(CorpusDocument&&)>& sink);

std::vector<std::string> ingest_texts(const std::vector<std::string>& paths,
                                      const std::vector<std::string>& filter_tags, IngestReport* report = nullptr);

// ---------------------------------------------------------------------------
// Configuration

nlohmann::json to_json(const ScheduleSpec& s);
ScheduleSpec schedule_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainerConfig& t);
TrainerConfig trainer_config_from_json(const nlohmann::json& j);

struct ExperimentConfig {
    ModelConfig model;
    /// "pure", "mixed" or "wide".
    std::string policy = "pure";
    bool stochastic_rounding = false;
    ScheduleSpec schedule = ScheduleSpec::cosine_floor(200);
    /// Must equal schedule.total_steps.
    std::uint64_t steps = 200;
    std::size_t batch_size = 8;
    PackingMode packing = PackingMode::BosMasked;
    std::pair<double, double> betas{0.9, 0.95};
    double weight_decay = 0.05;
    double eps = 1e-8;

    /// Existing tokenizer; when empty one is trained on the training corpus.
    std::string tokenizer_path;
    TrainerConfig tokenizer;

    /// Optional starting point. With base_tokenizer set and different from
    /// the run's tokenizer, the vocabulary is swapped using init_method.
    std::string base_checkpoint;
    std::string base_tokenizer;
    InitMethod init_method;
    std::size_t aux_window = 2;
    std::size_t aux_dim = 0;
    std::size_t embedding_warmup_steps = 0;
    double embedding_warmup_lr = 4e-5;

    std::vector<std::string> train_corpus;
    /// When empty, the last tenth of the training documents is held out.
    std::vector<std::string> eval_corpus;
    std::vector<std::string> filter_tags = default_filter_tags();
    std::size_t max_eval_chunks = 64;

    std::uint64_t seed = 0;
    /// Extra evaluations every n steps on top of the fixed grid (0 = grid only).
    std::uint64_t eval_interval = 0;
    std::string output_dir;

    void validate() const;
    PrecisionPolicy precision_policy() const;
    AdamWConfig adamw() const;

    nlohmann::json to_json() const;
    /// Missing keys keep their defaults.
    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load(const std::string& path);
};

/// Percentages of training at which the model is evaluated.
const std::vector<int>& eval_grid_percentages();
/// floor(pct / 100 * steps).
std::uint64_t grid_step(int pct, std::uint64_t steps);

// ---------------------------------------------------------------------------
// Runs

struct GridEval {
    int pct = -1;  // -1 for interval evaluations
    std::uint64_t step = 0;
    EvalReport report;
};

struct RunSummary {
    std::string output_dir;
    std::uint64_t steps = 0;
    std::vector<GridEval> evals;
    EvalReport final_eval;
    WeightReport weights;
    std::optional<std::uint64_t> switch_step;

    nlohmann::json to_json() const;
};

/// Full run into cfg.output_dir. Deterministic in cfg.seed.
/// Throws NumericalError after writing nan-dump/ if the loss goes non-finite.
RunSummary run_adaptation(const ExperimentConfig& cfg);

/// Resumes the run in run_dir from its checkpoint at `from_step` (default:
/// the latest one) and trains through `until_step` (default: cfg.steps) into
/// out_dir (default: run_dir). Resuming reproduces the uninterrupted run
/// bit-for-bit.
RunSummary continue_run(const std::string& run_dir, std::optional<std::uint64_t> from_step = std::nullopt,
                        std::optional<std::uint64_t> until_step = std::nullopt, const std::string& out_dir = "");

/// Trains cfg (policy "pure") into <output_dir>/pure, then continues from its
/// checkpoint at floor(fraction * steps) with mixed precision into
/// <output_dir>/pure_pp, seeding the master copy from the bf16 weights.
/// Requires 0 < fraction < 1.
struct SwitchResult {
    std::uint64_t switch_step = 0;
    RunSummary pure;
    RunSummary switched;
};
SwitchResult switch_precision_at(const ExperimentConfig& cfg, double fraction);

struct TimingReport {
    std::vector<double> raw_seconds;
    /// Mean over steps 2..n.
    double mean_seconds = 0.0;

    nlohmann::json to_json() const;
};

/// Mean excluding the first entry. Requires at least two entries.
TimingReport summarize_timings(std::vector<double> raw_seconds);

/// Times n training steps (n >= 2) of the run described by cfg.
TimingReport time_steps(const ExperimentConfig& cfg, std::size_t n = 11);

}  // namespace budgetlab
