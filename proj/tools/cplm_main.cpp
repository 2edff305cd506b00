// cplm: config-driven workbench for training small language models under
// working-memory attention-bias schedules and evaluating them on minimal-pair
// benchmarks.

#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cplm/analysis.hpp"
#include "cplm/attention_bias.hpp"
#include "cplm/corpus.hpp"
#include "cplm/errors.hpp"
#include "cplm/eval.hpp"
#include "cplm/experiment.hpp"
#include "cplm/synthetic.hpp"
#include "cplm/text.hpp"
#include "cplm/tokenizer.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitPartialFailure = 3;
constexpr int kExitIo = 4;

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::string current;
    try {
        for (char c : text + ",") {
            if (c == ',') {
                if (!current.empty()) {
                    seeds.push_back(std::stoull(current));
                    current.clear();
                }
            } else {
                current += c;
            }
        }
    } catch (const std::exception&) {
        throw cplm::ConfigError("--seeds expects comma-separated integers, got '" + text + "'");
    }
    if (seeds.empty()) {
        throw cplm::ConfigError("--seeds expects a comma-separated list, got '" + text + "'");
    }
    return seeds;
}

/// Output-root priority: CPLM_OUT > --out > config value.
fs::path resolve_out_dir(const fs::path& config_value, const std::string& flag_value) {
    if (const char* env = std::getenv("CPLM_OUT"); env != nullptr && *env != '\0') {
        return env;
    }
    if (!flag_value.empty()) {
        return flag_value;
    }
    return config_value;
}

struct CommonFlags {
    std::string config_path;
    std::string profile;
    std::string seeds;
    std::string out;
    int parallel = 1;
};

void add_common_flags(CLI::App* cmd, CommonFlags& flags, bool config_required) {
    auto* config_opt = cmd->add_option("--config", flags.config_path, "Experiment config file");
    if (config_required) {
        config_opt->required();
    }
    cmd->add_option("--profile", flags.profile,
                    "Profile providing defaults (paper-main, table-6, desk-scale, length-bands)");
    cmd->add_option("--seeds", flags.seeds, "Comma-separated seed list overriding the config");
    cmd->add_option("--out", flags.out, "Output directory (CPLM_OUT env overrides)");
    cmd->add_option("--parallel", flags.parallel, "Concurrent variant x seed runs")
        ->check(CLI::PositiveNumber);
}

cplm::ExperimentConfig resolve_config(const CommonFlags& flags) {
    cplm::ExperimentConfig config = flags.config_path.empty()
                                        ? cplm::profile_defaults(
                                              flags.profile.empty() ? "paper-main" : flags.profile)
                                        : cplm::validate_config(flags.config_path, flags.profile);
    if (!flags.seeds.empty()) {
        config.train.seeds = parse_seed_list(flags.seeds);
    }
    config.output_dir = resolve_out_dir(config.output_dir, flags.out);
    return config;
}

int finish_runs(const cplm::ResultsBundle& bundle) {
    std::cout << "artifacts in " << bundle.out_dir.string() << " (see manifest.json)\n";
    for (const auto& note : bundle.omissions) {
        std::cout << "note: " << note << "\n";
    }
    if (bundle.failed_runs() > 0) {
        std::cerr << bundle.failed_runs() << " of " << bundle.runs.size() << " runs failed\n";
        return kExitPartialFailure;
    }
    return kExitOk;
}

int cmd_preprocess(const std::string& input, const std::string& out, int min_words,
                   bool keep_case, const std::string& band_text) {
    cplm::Corpus corpus = cplm::load_corpus(input, !keep_case, min_words);
    if (!band_text.empty()) {
        cplm::LengthBand band;
        try {
            const auto colon = band_text.find(':');
            if (colon == std::string::npos) throw std::invalid_argument(band_text);
            band = {std::stoi(band_text.substr(0, colon)),
                    std::stoi(band_text.substr(colon + 1))};
        } catch (const std::exception&) {
            throw cplm::ConfigError("--band expects MIN:MAX integers, got '" + band_text + "'");
        }
        corpus = cplm::filter_by_length(corpus, band);
    }
    fs::create_directories(out);
    cplm::save_corpus(corpus, fs::path(out) / "corpus.txt");
    cplm::write_text_file(fs::path(out) / "length_histogram.csv",
                          cplm::length_histogram_csv(cplm::length_histogram(corpus)));
    std::string log = "transform,input,kept,dropped,modified\n";
    for (const auto& step : corpus.preprocessing_log) {
        log += step.name + "," + std::to_string(step.input) + "," + std::to_string(step.kept) +
               "," + std::to_string(step.dropped) + "," + std::to_string(step.modified) + "\n";
    }
    cplm::write_text_file(fs::path(out) / "preprocessing_log.csv", log);
    std::cout << "kept " << corpus.size() << " sentences -> " << out << "\n";
    return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& tokenizer_path,
             const std::string& benchmark_path, const std::string& out,
             const std::string& paired_text, bool bad_first) {
    const auto tokenizer = cplm::Tokenizer::load(tokenizer_path);
    std::vector<cplm::MinimalPair> pairs;
    if (!paired_text.empty()) {
        const auto colon = paired_text.find(':');
        const std::string category =
            colon == std::string::npos ? paired_text : paired_text.substr(0, colon);
        const std::string subcategory =
            colon == std::string::npos ? "default" : paired_text.substr(colon + 1);
        pairs = cplm::load_paired_text(benchmark_path, category, subcategory, bad_first);
    } else {
        pairs = cplm::load_benchmark(benchmark_path);
    }
    cplm::Checkpoint ckpt = cplm::load_checkpoint(checkpoint);
    if (ckpt.meta.config.vocab_size != tokenizer.vocab_size()) {
        throw cplm::ConfigError("checkpoint vocabulary size does not match the tokenizer");
    }
    cplm::GptModel<float> model(ckpt.meta.config, std::move(ckpt.params));
    model.bind_slopes(cplm::checkpoint_slopes(ckpt.meta));
    const auto report = cplm::build_report(cplm::score_pairs(model, tokenizer, pairs),
                                           fs::path(checkpoint).stem().string());
    fs::create_directories(out);
    cplm::save_eval_report(report, fs::path(out) / "report.csv", fs::path(out) / "report.json");
    std::cout << "overall accuracy " << cplm::format_fixed(report.overall * 100.0, 2) << "% over "
              << report.per_category.size() << " categories -> " << out << "\n";
    return kExitOk;
}

int cmd_analyze(const std::vector<std::string>& checkpoints, const std::string& tokenizer_path,
                const std::string& benchmark_path, const std::string& out,
                const std::vector<std::string>& categories, const std::string& method,
                std::uint64_t seed, int bins) {
    const auto tokenizer = cplm::Tokenizer::load(tokenizer_path);
    const auto pairs = cplm::load_benchmark(benchmark_path);
    std::vector<fs::path> paths(checkpoints.begin(), checkpoints.end());
    const auto report = cplm::track_trajectory(paths, pairs, categories, tokenizer,
                                               cplm::projection_method_from_string(method), seed,
                                               bins);
    fs::create_directories(out);
    cplm::write_text_file(fs::path(out) / "space_stats.csv",
                          cplm::trajectory_stats_csv("model", report));
    cplm::write_text_file(fs::path(out) / "projections.csv",
                          cplm::projection_csv(report.snapshots));
    for (const auto& snapshot : report.snapshots) {
        cplm::write_text_file(fs::path(out) / ("epoch_" + std::to_string(snapshot.epoch) + ".svg"),
                              cplm::projection_svg(snapshot));
    }
    std::string accuracy_csv = "epoch,overall\n";
    for (const auto& epoch : report.epochs) {
        accuracy_csv += std::to_string(epoch.epoch) + "," +
                        cplm::format_fixed(epoch.overall_accuracy * 100.0, 2) + "\n";
    }
    cplm::write_text_file(fs::path(out) / "accuracy_by_epoch.csv", accuracy_csv);
    std::cout << "analysis artifacts -> " << out << "\n";
    return kExitOk;
}

int cmd_curves(const CommonFlags& flags) {
    const auto config = flags.config_path.empty()
                            ? cplm::profile_defaults(
                                  flags.profile.empty() ? "paper-main" : flags.profile)
                            : cplm::validate_config(flags.config_path, flags.profile);
    const fs::path out = resolve_out_dir(config.output_dir, flags.out);
    fs::create_directories(out);
    for (const auto& variant : config.variants) {
        std::string name;
        for (char c : variant.label) {
            name += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' ||
                     c == '_')
                        ? c
                        : '_';
        }
        cplm::write_text_file(out / ("capacity_" + name + ".csv"),
                              cplm::capacity_curve_csv(variant.schedule));
    }
    std::cout << config.variants.size() << " capacity curves -> " << out.string() << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"small-LM training workbench with working-memory attention schedules"};
    app.require_subcommand(1);

    // preprocess
    auto* preprocess = app.add_subcommand("preprocess", "Clean a raw corpus and emit statistics");
    std::string pre_input, pre_out = "preprocessed", pre_band;
    int pre_min_words = 3;
    bool pre_keep_case = false;
    preprocess->add_option("--input", pre_input, "Raw corpus, one sentence per line")->required();
    preprocess->add_option("--out", pre_out, "Output directory");
    preprocess->add_option("--min-words", pre_min_words, "Minimum sentence length in words");
    preprocess->add_flag("--keep-case", pre_keep_case, "Skip lowercasing");
    preprocess->add_option("--band", pre_band, "Keep only sentences of MIN:MAX words");

    // train
    auto* train = app.add_subcommand("train", "Train configured variants without evaluation");
    CommonFlags train_flags;
    std::string train_variant;
    add_common_flags(train, train_flags, true);
    train->add_option("--variant", train_variant, "Train only this variant label");

    // eval
    auto* eval = app.add_subcommand("eval", "Score a minimal-pair benchmark with a checkpoint");
    std::string eval_ckpt, eval_tok, eval_bench, eval_out = "eval-out", eval_paired;
    bool eval_bad_first = false;
    eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
    eval->add_option("--tokenizer", eval_tok, "tokenizer.json from the training run")->required();
    eval->add_option("--benchmark", eval_bench, "Benchmark file")->required();
    eval->add_option("--out", eval_out, "Output directory");
    eval->add_option("--paired-text", eval_paired,
                     "Treat the benchmark as alternating-line text; value CATEGORY:SUBCATEGORY");
    eval->add_flag("--bad-first", eval_bad_first,
                   "Paired text lists the unacceptable sentence first");

    // analyze
    auto* analyze = app.add_subcommand("analyze", "Embedding-space dynamics across checkpoints");
    std::vector<std::string> ana_ckpts, ana_categories;
    std::string ana_tok, ana_bench, ana_out = "analysis-out", ana_method = "pca";
    std::uint64_t ana_seed = 0;
    int ana_bins = 50;
    analyze->add_option("--checkpoints", ana_ckpts, "Checkpoint files, epoch order")
        ->required()
        ->delimiter(',');
    analyze->add_option("--tokenizer", ana_tok, "tokenizer.json")->required();
    analyze->add_option("--benchmark", ana_bench, "Benchmark file")->required();
    analyze->add_option("--out", ana_out, "Output directory");
    analyze->add_option("--categories", ana_categories, "Category filter")->delimiter(',');
    analyze->add_option("--method", ana_method, "Projection: pca or tsne");
    analyze->add_option("--seed", ana_seed, "Projection seed");
    analyze->add_option("--bins", ana_bins, "Histogram bins per axis");

    // run
    auto* run = app.add_subcommand("run", "Full pipeline: train, evaluate, analyze, emit tables");
    CommonFlags run_flags;
    add_common_flags(run, run_flags, true);

    // curves
    auto* curves = app.add_subcommand("curves", "Emit capacity-curve CSVs only");
    CommonFlags curve_flags;
    add_common_flags(curves, curve_flags, false);

    // report
    auto* report = app.add_subcommand("report", "Re-emit tables from an existing run directory");
    std::string report_out;
    report->add_option("--out", report_out, "Run directory holding experiment.json")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (preprocess->parsed()) {
            return cmd_preprocess(pre_input, pre_out, pre_min_words, pre_keep_case, pre_band);
        }
        if (train->parsed()) {
            auto config = resolve_config(train_flags);
            config.eval.benchmark_path.clear();  // training only
            if (!train_variant.empty()) {
                std::vector<cplm::VariantSpec> kept;
                for (const auto& variant : config.variants) {
                    if (variant.label == train_variant) kept.push_back(variant);
                }
                if (kept.empty()) {
                    throw cplm::ConfigError("unknown variant label '" + train_variant + "'");
                }
                config.variants = std::move(kept);
            }
            return finish_runs(cplm::run_experiment(config, train_flags.parallel));
        }
        if (eval->parsed()) {
            return cmd_eval(eval_ckpt, eval_tok, eval_bench, eval_out, eval_paired,
                            eval_bad_first);
        }
        if (analyze->parsed()) {
            return cmd_analyze(ana_ckpts, ana_tok, ana_bench, ana_out, ana_categories, ana_method,
                               ana_seed, ana_bins);
        }
        if (run->parsed()) {
            const auto config = resolve_config(run_flags);
            return finish_runs(cplm::run_experiment(config, run_flags.parallel));
        }
        if (curves->parsed()) {
            return cmd_curves(curve_flags);
        }
        if (report->parsed()) {
            auto bundle = cplm::load_bundle(report_out);
            cplm::emit_tables(bundle);
            return finish_runs(bundle);
        }
    } catch (const cplm::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const cplm::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const cplm::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitOk;
}
