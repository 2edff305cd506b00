#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cplm/analysis.hpp"
#include "cplm/attention_bias.hpp"
#include "cplm/corpus.hpp"
#include "cplm/eval.hpp"
#include "cplm/model.hpp"
#include "cplm/tokenizer.hpp"
#include "cplm/trainer.hpp"

namespace cplm {

/// One schedule variant to train, e.g. the unbiased baseline or the
/// exponentially relaxing limit.
struct VariantSpec {
    std::string label;
    ScheduleSpec schedule;
};

struct CorpusConfig {
    std::filesystem::path train_path;
    bool lowercase = true;
    int min_words = 3;
    std::optional<LengthBand> length_band;
};

struct TokenizerSettings {
    TokenizerMode mode = TokenizerMode::word;
    int vocab_size = 8192;
};

struct EvalSettings {
    std::filesystem::path benchmark_path;  ///< empty = no minimal-pair evaluation
    std::vector<int> epochs_to_evaluate{1, 5, 10};
};

struct AnalysisSettings {
    std::vector<std::string> categories;  ///< empty = all categories
    ProjectionMethod projection = ProjectionMethod::pca;
    std::uint64_t seed = 0;
    int bins_per_axis = 50;
};

/// Fully resolved experiment description. Defaults come from a named profile;
/// a config file overrides profile values field by field.
struct ExperimentConfig {
    std::string profile = "paper-main";
    CorpusConfig corpus;
    TokenizerSettings tokenizer;
    ModelConfig model;  ///< vocab_size stays 0 until the tokenizer is trained
    TrainConfig train;
    std::vector<VariantSpec> variants;
    EvalSettings eval;
    AnalysisSettings analysis;
    std::filesystem::path output_dir = "cplm-out";
};

/// Built-in profiles: "paper-main" (10-epoch reference run), "table-6"
/// (20-epoch recipe), "desk-scale" (CPU-sized model and optimizer), and
/// "length-bands" (long-sentence evaluation, max_seq_len 160).
ExperimentConfig profile_defaults(const std::string& name);
std::vector<std::string> profile_names();

/// Parses and validates a config file against the profile defaults.
/// Unknown keys are errors; all constraint violations are reported together.
ExperimentConfig validate_config(const std::filesystem::path& path,
                                 const std::string& profile_override = {});

struct RunResult {
    std::string variant;
    std::uint64_t seed = 0;
    bool failed = false;
    std::string error;
    TrainRunRecord train_record;
    std::map<int, EvalReport> eval_by_epoch;
    int final_epoch = 0;
};

struct ResultsBundle {
    ExperimentConfig config;
    std::vector<RunResult> runs;
    std::vector<std::string> omissions;
    std::filesystem::path out_dir;
    /// Emitted file paths (relative to out_dir) with FNV-1a64 content hashes.
    std::vector<std::pair<std::string, std::string>> files;

    std::size_t failed_runs() const;
};

/// Executes every variant x seed combination (up to `parallelism` runs at a
/// time, each in its own output subdirectory), evaluates the requested epoch
/// checkpoints, runs the embedding-space analysis, and emits the result
/// tables plus a hashed manifest. A failed run aborts only itself.
ResultsBundle run_experiment(const ExperimentConfig& config, int parallelism = 1);

/// Rebuilds a bundle from the artifacts a previous run left in `out_dir`
/// (for re-emitting tables without retraining).
ResultsBundle load_bundle(const std::filesystem::path& out_dir);

/// Writes the accuracy matrix with significance markers, the
/// forward-vs-reversed delta table, capacity-curve CSVs, accuracy-trajectory
/// CSVs, the significance matrix, and manifest.json. Missing inputs produce
/// omission notes instead of failures.
void emit_tables(ResultsBundle& bundle);

/// Seed-averaged final-epoch accuracy for one variant; empty `category`
/// selects the macro-average. nullopt when no successful run has data.
std::optional<double> seed_mean_final_accuracy(const ResultsBundle& bundle,
                                               const std::string& variant,
                                               const std::string& category);

/// Single-report CSV row in the accuracy-table column layout.
std::string eval_report_csv(const EvalReport& report);

void save_eval_report(const EvalReport& report, const std::filesystem::path& csv_path,
                      const std::filesystem::path& json_path);

}  // namespace cplm
