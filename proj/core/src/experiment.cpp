#include "cplm/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "cplm/errors.hpp"
#include "cplm/text.hpp"
#include "serialize.hpp"

namespace cplm {

namespace {

using nlohmann::json;

std::string sanitize_label(const std::string& label) {
    std::string out;
    for (char c : label) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                        (c >= '0' && c <= '9') || c == '.' || c == '-' || c == '_';
        out += ok ? c : '_';
    }
    return out;
}

std::string format_sci(double value) {
    char buffer[32];
    std::snprintf(buffer, sizeof(buffer), "%.3e", value);
    return buffer;
}

std::vector<VariantSpec> standard_variants() {
    std::vector<VariantSpec> variants;
    variants.push_back({"NoLimit", {ScheduleKind::none, 0.0, 1.0, 10, false, false}});
    variants.push_back({"StaticLimit", {ScheduleKind::static_limit, 1.0, 1.0, 10, false, false}});
    variants.push_back(
        {"DynamicLimit-Linear", {ScheduleKind::linear, 1.0, 1.0, 10, false, false}});
    variants.push_back(
        {"DynamicLimit-Exp", {ScheduleKind::exponential, 1.0, 0.6, 10, false, false}});
    variants.push_back({"DynamicLimit-Exp-Reversed",
                        {ScheduleKind::reversed_exponential, 0.01, 1.668, 10, false, false}});
    return variants;
}

}  // namespace

std::vector<std::string> profile_names() {
    return {"paper-main", "table-6", "desk-scale", "length-bands"};
}

ExperimentConfig profile_defaults(const std::string& name) {
    ExperimentConfig config;
    config.profile = name;
    config.model.n_layers = 4;
    config.model.n_heads = 4;
    config.model.d_model = 256;
    config.model.max_seq_len = 32;
    config.model.dropout = 0.1;
    config.train.lr = 5e-6;
    config.train.weight_decay = 0.01;
    config.train.beta1 = 0.9;
    config.train.beta2 = 0.999;
    config.train.eps = 1e-8;
    config.train.batch_size = 512;
    config.train.grad_accum_steps = 2;
    config.train.total_epochs = 10;
    config.train.warmup_fraction = 0.1;
    config.train.n_restarts = 1;
    config.train.early_stop_tolerance_epochs = 1;
    config.train.eval_split_fraction = 0.05;
    config.train.seeds = {0, 1, 2};
    config.variants = standard_variants();
    config.eval.epochs_to_evaluate = {1, 5, 10};

    if (name == "paper-main") {
        return config;
    }
    if (name == "table-6") {
        config.train.total_epochs = 20;
        return config;
    }
    if (name == "desk-scale") {
        config.model.n_layers = 2;
        config.model.d_model = 64;
        config.train.lr = 3e-4;
        config.train.batch_size = 32;
        config.train.grad_accum_steps = 1;
        // effectively disable early stopping so desk runs emit every epoch
        config.train.early_stop_tolerance_epochs = 10;
        config.tokenizer.vocab_size = 2048;
        return config;
    }
    if (name == "length-bands") {
        config.model.max_seq_len = 160;
        return config;
    }
    throw ConfigError("unknown profile '" + name +
                      "' (known: paper-main, table-6, desk-scale, length-bands)");
}

// ---------------------------------------------------------------------------
// Config parsing
// ---------------------------------------------------------------------------

namespace {

void check_keys(const json& obj, const std::set<std::string>& allowed,
                const std::string& section, std::vector<std::string>& errors) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!allowed.count(it.key())) {
            errors.push_back("unknown key '" + section + it.key() + "'");
        }
    }
}

template <typename T>
void take(const json& obj, const char* key, T& target, const std::string& section,
          std::vector<std::string>& errors) {
    if (!obj.contains(key)) return;
    try {
        target = obj.at(key).get<T>();
    } catch (const json::exception& e) {
        errors.push_back("bad value for '" + section + key + "': " + e.what());
    }
}

void parse_variant(const json& entry, std::size_t index, std::vector<VariantSpec>& out,
                   std::vector<std::string>& errors) {
    const std::string section = "variants[" + std::to_string(index) + "].";
    check_keys(entry,
               {"label", "kind", "m0", "r", "horizon_epochs", "snap_final_to_zero",
                "uniform_slope"},
               section, errors);
    VariantSpec variant;
    variant.schedule = ScheduleSpec{ScheduleKind::exponential, 1.0, 0.6, 10, false, false};
    std::string kind;
    take(entry, "label", variant.label, section, errors);
    take(entry, "kind", kind, section, errors);
    if (variant.label.empty()) {
        errors.push_back(section + "label is required");
    }
    if (kind.empty()) {
        errors.push_back(section + "kind is required");
        return;
    }
    try {
        variant.schedule.kind = schedule_kind_from_string(kind);
    } catch (const ConfigError& e) {
        errors.push_back(section + std::string(e.what()));
        return;
    }
    take(entry, "m0", variant.schedule.m0, section, errors);
    take(entry, "r", variant.schedule.r, section, errors);
    take(entry, "horizon_epochs", variant.schedule.horizon_epochs, section, errors);
    take(entry, "snap_final_to_zero", variant.schedule.snap_final_to_zero, section, errors);
    take(entry, "uniform_slope", variant.schedule.uniform_slope, section, errors);
    if (variant.schedule.kind == ScheduleKind::none) {
        variant.schedule.m0 = 0.0;
    }
    for (const auto& problem : variant.schedule.validation_errors()) {
        errors.push_back(section + problem);
    }
    out.push_back(std::move(variant));
}

}  // namespace

ExperimentConfig validate_config(const std::filesystem::path& path,
                                 const std::string& profile_override) {
    json doc;
    try {
        doc = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw ConfigError("config parse error in " + path.string() + ": " + e.what());
    }
    if (!doc.is_object()) {
        throw ConfigError("config root must be an object: " + path.string());
    }

    std::vector<std::string> errors;
    check_keys(doc,
               {"config_version", "profile", "corpus", "tokenizer", "model", "train", "variants",
                "eval", "analysis", "output_dir"},
               "", errors);

    int config_version = 1;
    take(doc, "config_version", config_version, "", errors);
    if (config_version != 1) {
        errors.push_back("unsupported config_version " + std::to_string(config_version));
    }

    std::string profile = profile_override;
    if (profile.empty() && doc.contains("profile")) {
        take(doc, "profile", profile, "", errors);
    }
    if (profile.empty()) {
        profile = "paper-main";
    }

    ExperimentConfig config;
    try {
        config = profile_defaults(profile);
    } catch (const ConfigError& e) {
        errors.push_back(e.what());
        config = profile_defaults("paper-main");
        config.profile = profile;
    }

    if (doc.contains("corpus")) {
        const auto& section = doc.at("corpus");
        check_keys(section, {"train_path", "lowercase", "min_words", "length_band"}, "corpus.",
                   errors);
        std::string train_path;
        take(section, "train_path", train_path, "corpus.", errors);
        if (!train_path.empty()) config.corpus.train_path = train_path;
        take(section, "lowercase", config.corpus.lowercase, "corpus.", errors);
        take(section, "min_words", config.corpus.min_words, "corpus.", errors);
        if (section.contains("length_band")) {
            std::vector<int> band;
            take(section, "length_band", band, "corpus.", errors);
            if (band.size() == 2) {
                config.corpus.length_band = LengthBand{band[0], band[1]};
            } else {
                errors.push_back("corpus.length_band must be [min_words, max_words]");
            }
        }
    }

    if (doc.contains("tokenizer")) {
        const auto& section = doc.at("tokenizer");
        check_keys(section, {"mode", "vocab_size"}, "tokenizer.", errors);
        std::string mode;
        take(section, "mode", mode, "tokenizer.", errors);
        if (!mode.empty()) {
            try {
                config.tokenizer.mode = tokenizer_mode_from_string(mode);
            } catch (const ConfigError& e) {
                errors.push_back(e.what());
            }
        }
        take(section, "vocab_size", config.tokenizer.vocab_size, "tokenizer.", errors);
    }

    if (doc.contains("model")) {
        const auto& section = doc.at("model");
        check_keys(section,
                   {"n_layers", "n_heads", "d_model", "d_ff", "max_seq_len", "dropout",
                    "tied_embeddings", "pooling"},
                   "model.", errors);
        take(section, "n_layers", config.model.n_layers, "model.", errors);
        take(section, "n_heads", config.model.n_heads, "model.", errors);
        take(section, "d_model", config.model.d_model, "model.", errors);
        take(section, "d_ff", config.model.d_ff, "model.", errors);
        take(section, "max_seq_len", config.model.max_seq_len, "model.", errors);
        take(section, "dropout", config.model.dropout, "model.", errors);
        take(section, "tied_embeddings", config.model.tied_embeddings, "model.", errors);
        std::string pooling;
        take(section, "pooling", pooling, "model.", errors);
        if (!pooling.empty()) {
            try {
                config.model.pooling = pool_from_string(pooling);
            } catch (const ConfigError& e) {
                errors.push_back(e.what());
            }
        }
    }

    if (doc.contains("train")) {
        const auto& section = doc.at("train");
        check_keys(section,
                   {"lr", "weight_decay", "beta1", "beta2", "eps", "batch_size",
                    "grad_accum_steps", "total_epochs", "warmup_fraction", "lr_schedule",
                    "n_restarts", "early_stop_tolerance_epochs", "eval_split_fraction", "seeds"},
                   "train.", errors);
        take(section, "lr", config.train.lr, "train.", errors);
        take(section, "weight_decay", config.train.weight_decay, "train.", errors);
        take(section, "beta1", config.train.beta1, "train.", errors);
        take(section, "beta2", config.train.beta2, "train.", errors);
        take(section, "eps", config.train.eps, "train.", errors);
        take(section, "batch_size", config.train.batch_size, "train.", errors);
        take(section, "grad_accum_steps", config.train.grad_accum_steps, "train.", errors);
        take(section, "total_epochs", config.train.total_epochs, "train.", errors);
        take(section, "warmup_fraction", config.train.warmup_fraction, "train.", errors);
        take(section, "n_restarts", config.train.n_restarts, "train.", errors);
        take(section, "early_stop_tolerance_epochs", config.train.early_stop_tolerance_epochs,
             "train.", errors);
        take(section, "eval_split_fraction", config.train.eval_split_fraction, "train.", errors);
        take(section, "seeds", config.train.seeds, "train.", errors);
        if (section.contains("lr_schedule")) {
            std::string schedule;
            take(section, "lr_schedule", schedule, "train.", errors);
            if (schedule != "cosine_with_restarts") {
                errors.push_back("train.lr_schedule: only 'cosine_with_restarts' is supported");
            }
        }
    }

    if (doc.contains("variants")) {
        if (!doc.at("variants").is_array() || doc.at("variants").empty()) {
            errors.push_back("variants must be a non-empty array");
        } else {
            config.variants.clear();
            for (std::size_t i = 0; i < doc.at("variants").size(); ++i) {
                parse_variant(doc.at("variants")[i], i, config.variants, errors);
            }
        }
    }

    if (doc.contains("eval")) {
        const auto& section = doc.at("eval");
        check_keys(section, {"benchmark_path", "epochs_to_evaluate"}, "eval.", errors);
        std::string benchmark;
        take(section, "benchmark_path", benchmark, "eval.", errors);
        if (!benchmark.empty()) config.eval.benchmark_path = benchmark;
        take(section, "epochs_to_evaluate", config.eval.epochs_to_evaluate, "eval.", errors);
    }

    if (doc.contains("analysis")) {
        const auto& section = doc.at("analysis");
        check_keys(section, {"categories", "projection", "seed", "bins_per_axis"}, "analysis.",
                   errors);
        take(section, "categories", config.analysis.categories, "analysis.", errors);
        std::string projection;
        take(section, "projection", projection, "analysis.", errors);
        if (!projection.empty()) {
            try {
                config.analysis.projection = projection_method_from_string(projection);
            } catch (const ConfigError& e) {
                errors.push_back(e.what());
            }
        }
        take(section, "seed", config.analysis.seed, "analysis.", errors);
        take(section, "bins_per_axis", config.analysis.bins_per_axis, "analysis.", errors);
    }

    if (doc.contains("output_dir")) {
        std::string out;
        take(doc, "output_dir", out, "", errors);
        if (!out.empty()) config.output_dir = out;
    }

    // constraint checks, reported exhaustively
    if (config.corpus.train_path.empty()) {
        errors.push_back("corpus.train_path is required");
    } else if (!std::filesystem::exists(config.corpus.train_path)) {
        errors.push_back("corpus.train_path does not exist: " + config.corpus.train_path.string());
    }
    if (config.corpus.min_words < 1) {
        errors.push_back("corpus.min_words must be >= 1");
    }
    if (config.corpus.length_band) {
        try {
            config.corpus.length_band->validate();
        } catch (const ConfigError& e) {
            errors.push_back(e.what());
        }
    }
    if (config.tokenizer.vocab_size <= Tokenizer::n_special) {
        errors.push_back("tokenizer.vocab_size must exceed " +
                         std::to_string(Tokenizer::n_special));
    }
    {
        ModelConfig probe = config.model;
        probe.vocab_size = 1;  // filled from the tokenizer at run time
        for (const auto& problem : probe.validation_errors()) {
            errors.push_back("model: " + problem);
        }
    }
    for (const auto& problem : config.train.validation_errors()) {
        errors.push_back("train: " + problem);
    }
    {
        std::set<std::string> labels;
        for (const auto& variant : config.variants) {
            if (!labels.insert(variant.label).second) {
                errors.push_back("duplicate variant label '" + variant.label + "'");
            }
        }
    }
    if (!config.eval.benchmark_path.empty() &&
        !std::filesystem::exists(config.eval.benchmark_path)) {
        errors.push_back("eval.benchmark_path does not exist: " +
                         config.eval.benchmark_path.string());
    }
    for (int epoch : config.eval.epochs_to_evaluate) {
        if (epoch < 1) {
            errors.push_back("eval.epochs_to_evaluate entries must be >= 1");
            break;
        }
    }
    if (config.analysis.bins_per_axis < 1) {
        errors.push_back("analysis.bins_per_axis must be >= 1");
    }

    if (!errors.empty()) {
        std::string message = "config validation failed (" + std::to_string(errors.size()) +
                              " problem" + (errors.size() == 1 ? "" : "s") + "):";
        for (const auto& e : errors) {
            message += "\n  - " + e;
        }
        throw ConfigError(message);
    }
    return config;
}

// ---------------------------------------------------------------------------
// Resolved-config echo (experiment.json); output_dir is intentionally
// omitted so reruns into different directories produce identical bytes.
// ---------------------------------------------------------------------------

namespace {

json config_to_json(const ExperimentConfig& config) {
    json variants = json::array();
    for (const auto& variant : config.variants) {
        auto v = detail::schedule_spec_to_json(variant.schedule);
        v["label"] = variant.label;
        variants.push_back(v);
    }
    json corpus{{"train_path", config.corpus.train_path.string()},
                {"lowercase", config.corpus.lowercase},
                {"min_words", config.corpus.min_words}};
    if (config.corpus.length_band) {
        corpus["length_band"] = {config.corpus.length_band->min_words,
                                 config.corpus.length_band->max_words};
    }
    return json{
        {"config_version", 1},
        {"profile", config.profile},
        {"corpus", corpus},
        {"tokenizer",
         {{"mode", to_string(config.tokenizer.mode)},
          {"vocab_size", config.tokenizer.vocab_size}}},
        {"model", detail::model_config_to_json(config.model)},
        {"train",
         {{"lr", config.train.lr},
          {"weight_decay", config.train.weight_decay},
          {"beta1", config.train.beta1},
          {"beta2", config.train.beta2},
          {"eps", config.train.eps},
          {"batch_size", config.train.batch_size},
          {"grad_accum_steps", config.train.grad_accum_steps},
          {"total_epochs", config.train.total_epochs},
          {"warmup_fraction", config.train.warmup_fraction},
          {"n_restarts", config.train.n_restarts},
          {"early_stop_tolerance_epochs", config.train.early_stop_tolerance_epochs},
          {"eval_split_fraction", config.train.eval_split_fraction},
          {"seeds", config.train.seeds}}},
        {"variants", variants},
        {"eval",
         {{"benchmark_path", config.eval.benchmark_path.string()},
          {"epochs_to_evaluate", config.eval.epochs_to_evaluate}}},
        {"analysis",
         {{"categories", config.analysis.categories},
          {"projection", to_string(config.analysis.projection)},
          {"seed", config.analysis.seed},
          {"bins_per_axis", config.analysis.bins_per_axis}}}};
}

ExperimentConfig config_from_json(const json& doc) {
    ExperimentConfig config;
    config.profile = doc.at("profile").get<std::string>();
    config.corpus.train_path = doc.at("corpus").at("train_path").get<std::string>();
    config.corpus.lowercase = doc.at("corpus").at("lowercase").get<bool>();
    config.corpus.min_words = doc.at("corpus").at("min_words").get<int>();
    if (doc.at("corpus").contains("length_band")) {
        const auto band = doc.at("corpus").at("length_band").get<std::vector<int>>();
        config.corpus.length_band = LengthBand{band.at(0), band.at(1)};
    }
    config.tokenizer.mode =
        tokenizer_mode_from_string(doc.at("tokenizer").at("mode").get<std::string>());
    config.tokenizer.vocab_size = doc.at("tokenizer").at("vocab_size").get<int>();
    config.model = detail::model_config_from_json(doc.at("model"));
    const auto& train = doc.at("train");
    config.train.lr = train.at("lr").get<double>();
    config.train.weight_decay = train.at("weight_decay").get<double>();
    config.train.beta1 = train.at("beta1").get<double>();
    config.train.beta2 = train.at("beta2").get<double>();
    config.train.eps = train.at("eps").get<double>();
    config.train.batch_size = train.at("batch_size").get<int>();
    config.train.grad_accum_steps = train.at("grad_accum_steps").get<int>();
    config.train.total_epochs = train.at("total_epochs").get<int>();
    config.train.warmup_fraction = train.at("warmup_fraction").get<double>();
    config.train.n_restarts = train.at("n_restarts").get<int>();
    config.train.early_stop_tolerance_epochs =
        train.at("early_stop_tolerance_epochs").get<int>();
    config.train.eval_split_fraction = train.at("eval_split_fraction").get<double>();
    config.train.seeds = train.at("seeds").get<std::vector<std::uint64_t>>();
    for (const auto& entry : doc.at("variants")) {
        VariantSpec variant;
        variant.label = entry.at("label").get<std::string>();
        variant.schedule.kind = schedule_kind_from_string(entry.at("kind").get<std::string>());
        variant.schedule.m0 = entry.at("m0").get<double>();
        variant.schedule.r = entry.at("r").get<double>();
        variant.schedule.horizon_epochs = entry.at("horizon_epochs").get<int>();
        variant.schedule.snap_final_to_zero = entry.at("snap_final_to_zero").get<bool>();
        variant.schedule.uniform_slope = entry.at("uniform_slope").get<bool>();
        config.variants.push_back(std::move(variant));
    }
    config.eval.benchmark_path = doc.at("eval").at("benchmark_path").get<std::string>();
    config.eval.epochs_to_evaluate =
        doc.at("eval").at("epochs_to_evaluate").get<std::vector<int>>();
    config.analysis.categories =
        doc.at("analysis").at("categories").get<std::vector<std::string>>();
    config.analysis.projection =
        projection_method_from_string(doc.at("analysis").at("projection").get<std::string>());
    config.analysis.seed = doc.at("analysis").at("seed").get<std::uint64_t>();
    config.analysis.bins_per_axis = doc.at("analysis").at("bins_per_axis").get<int>();
    return config;
}

json report_counts_json(const EvalReport& report) {
    json categories = json::object();
    for (const auto& [category, score] : report.per_category) {
        categories[category] = {{"n_pairs", score.n_pairs},
                                {"n_correct", score.n_correct},
                                {"n_skipped", score.n_skipped},
                                {"accuracy", score.accuracy()}};
    }
    return json{{"model_label", report.model_label},
                {"seed_set", report.seed_set},
                {"overall", report.overall},
                {"categories", categories}};
}

EvalReport report_from_counts_json(const json& doc) {
    EvalReport report;
    report.model_label = doc.at("model_label").get<std::string>();
    report.seed_set = doc.at("seed_set").get<std::vector<std::uint64_t>>();
    report.overall = doc.at("overall").get<double>();
    for (const auto& [category, entry] : doc.at("categories").items()) {
        CategoryScore score;
        score.n_pairs = entry.at("n_pairs").get<std::size_t>();
        score.n_correct = entry.at("n_correct").get<std::size_t>();
        score.n_skipped = entry.at("n_skipped").get<std::size_t>();
        report.per_category[category] = score;
    }
    return report;
}

std::filesystem::path run_dir_for(const ExperimentConfig& config, const std::string& label,
                                  std::uint64_t seed) {
    return config.output_dir / sanitize_label(label) / ("seed_" + std::to_string(seed));
}

}  // namespace

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

std::size_t ResultsBundle::failed_runs() const {
    std::size_t n = 0;
    for (const auto& run : runs) {
        if (run.failed) ++n;
    }
    return n;
}

namespace {

std::mutex g_log_mutex;

void log_line(const std::string& line) {
    std::lock_guard<std::mutex> lock(g_log_mutex);
    std::cout << line << std::endl;
}

RunResult execute_run(const ExperimentConfig& config, const VariantSpec& variant,
                      std::uint64_t seed, const Corpus& corpus, const Tokenizer& tokenizer,
                      const std::vector<MinimalPair>& benchmark) {
    RunResult result;
    result.variant = variant.label;
    result.seed = seed;
    try {
        ModelConfig model_config = config.model;
        model_config.vocab_size = tokenizer.vocab_size();
        model_config.positional = variant.schedule.kind == ScheduleKind::none
                                      ? PositionalKind::learned
                                      : PositionalKind::none;
        const auto run_dir = run_dir_for(config, variant.label, seed);
        result.train_record = train_model(model_config, variant.schedule, corpus, tokenizer,
                                          config.train, seed, run_dir);
        result.final_epoch = result.train_record.epochs.back().epoch;
        log_line("[" + variant.label + " seed " + std::to_string(seed) + "] trained " +
                 std::to_string(result.final_epoch) + " epochs, val ppl " +
                 format_fixed(result.train_record.epochs.back().val_ppl, 3));

        if (!benchmark.empty()) {
            std::set<int> epochs(config.eval.epochs_to_evaluate.begin(),
                                 config.eval.epochs_to_evaluate.end());
            epochs.insert(result.final_epoch);
            json eval_doc{{"variant", variant.label},
                          {"seed", seed},
                          {"final_epoch", result.final_epoch},
                          {"stopped_early", result.train_record.stopped_early},
                          {"epochs", json::object()}};
            for (int epoch : epochs) {
                if (epoch < 1 || epoch > result.final_epoch) continue;
                const auto& entry =
                    result.train_record.epochs[static_cast<std::size_t>(epoch - 1)];
                Checkpoint ckpt = load_checkpoint(run_dir / entry.ckpt);
                GptModel<float> model(ckpt.meta.config, std::move(ckpt.params));
                model.bind_slopes(checkpoint_slopes(ckpt.meta));
                auto report =
                    build_report(score_pairs(model, tokenizer, benchmark), variant.label);
                report.seed_set = {seed};
                eval_doc["epochs"][std::to_string(epoch)] = report_counts_json(report);
                result.eval_by_epoch[epoch] = std::move(report);
            }
            write_text_file(run_dir / "eval.json", eval_doc.dump(2) + "\n");
            log_line("[" + variant.label + " seed " + std::to_string(seed) +
                     "] final accuracy " +
                     format_fixed(result.eval_by_epoch.at(result.final_epoch).overall * 100.0,
                                  2) +
                     "%");
        }
    } catch (const std::exception& e) {
        result.failed = true;
        result.error = e.what();
        log_line("[" + variant.label + " seed " + std::to_string(seed) + "] FAILED: " + e.what());
    }
    return result;
}

void run_analysis_stage(const ExperimentConfig& config, const Tokenizer& tokenizer,
                        const std::vector<MinimalPair>& benchmark, ResultsBundle& bundle) {
    if (benchmark.empty()) {
        bundle.omissions.push_back("analysis skipped: no benchmark configured");
        return;
    }
    for (const auto& variant : config.variants) {
        const RunResult* chosen = nullptr;
        for (const auto& run : bundle.runs) {
            if (run.variant == variant.label && !run.failed) {
                chosen = &run;
                break;  // first healthy seed
            }
        }
        if (!chosen) {
            bundle.omissions.push_back("analysis omitted for '" + variant.label +
                                       "': no successful run");
            continue;
        }
        std::vector<std::filesystem::path> checkpoints;
        const auto run_dir = run_dir_for(config, variant.label, chosen->seed);
        for (int epoch : config.eval.epochs_to_evaluate) {
            if (epoch >= 1 && epoch <= chosen->final_epoch) {
                checkpoints.push_back(
                    run_dir /
                    chosen->train_record.epochs[static_cast<std::size_t>(epoch - 1)].ckpt);
            }
        }
        if (checkpoints.size() < 2) {
            bundle.omissions.push_back("analysis omitted for '" + variant.label +
                                       "': fewer than 2 evaluated epochs");
            continue;
        }
        try {
            const auto report = track_trajectory(
                checkpoints, benchmark, config.analysis.categories, tokenizer,
                config.analysis.projection, config.analysis.seed, config.analysis.bins_per_axis);
            const auto analysis_dir = run_dir / "analysis";
            std::filesystem::create_directories(analysis_dir);
            write_text_file(analysis_dir / "space_stats.csv",
                            trajectory_stats_csv(variant.label, report));
            write_text_file(analysis_dir / "projections.csv", projection_csv(report.snapshots));
            for (const auto& snapshot : report.snapshots) {
                write_text_file(
                    analysis_dir / ("epoch_" + std::to_string(snapshot.epoch) + ".svg"),
                    projection_svg(snapshot));
            }
        } catch (const std::exception& e) {
            bundle.omissions.push_back("analysis failed for '" + variant.label +
                                       "': " + e.what());
        }
    }
}

}  // namespace

ResultsBundle run_experiment(const ExperimentConfig& config, int parallelism) {
    ResultsBundle bundle;
    bundle.config = config;
    bundle.out_dir = config.output_dir;
    std::filesystem::create_directories(config.output_dir);

    Corpus corpus =
        load_corpus(config.corpus.train_path, config.corpus.lowercase, config.corpus.min_words);
    if (config.corpus.length_band) {
        corpus = filter_by_length(corpus, *config.corpus.length_band);
        if (corpus.empty()) {
            throw DataError("corpus is empty after length-band filtering");
        }
    }
    const Tokenizer tokenizer =
        Tokenizer::train(corpus, config.tokenizer.vocab_size, config.tokenizer.mode);
    tokenizer.save(config.output_dir / "tokenizer.json");

    std::vector<MinimalPair> benchmark;
    if (!config.eval.benchmark_path.empty()) {
        benchmark = load_benchmark(config.eval.benchmark_path);
    }

    write_text_file(config.output_dir / "experiment.json",
                    config_to_json(config).dump(2) + "\n");

    struct Job {
        const VariantSpec* variant;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (const auto& variant : config.variants) {
        for (std::uint64_t seed : config.train.seeds) {
            jobs.push_back({&variant, seed});
        }
    }
    bundle.runs.resize(jobs.size());

    const int n_threads = std::max(1, std::min<int>(parallelism, static_cast<int>(jobs.size())));
    std::atomic<std::size_t> next_job{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t index = next_job.fetch_add(1);
            if (index >= jobs.size()) return;
            bundle.runs[index] = execute_run(config, *jobs[index].variant, jobs[index].seed,
                                             corpus, tokenizer, benchmark);
        }
    };
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(n_threads));
        for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    run_analysis_stage(config, tokenizer, benchmark, bundle);
    emit_tables(bundle);
    return bundle;
}

ResultsBundle load_bundle(const std::filesystem::path& out_dir) {
    ResultsBundle bundle;
    bundle.out_dir = out_dir;
    json doc;
    try {
        doc = json::parse(read_text_file(out_dir / "experiment.json"));
    } catch (const json::exception& e) {
        throw DataError("cannot parse " + (out_dir / "experiment.json").string() + ": " +
                        e.what());
    }
    bundle.config = config_from_json(doc);
    bundle.config.output_dir = out_dir;

    for (const auto& variant : bundle.config.variants) {
        for (std::uint64_t seed : bundle.config.train.seeds) {
            RunResult result;
            result.variant = variant.label;
            result.seed = seed;
            const auto run_dir = run_dir_for(bundle.config, variant.label, seed);
            const auto records_path = run_dir / "train_records.jsonl";
            if (!std::filesystem::exists(records_path)) {
                result.failed = true;
                result.error = "missing " + records_path.string();
                bundle.runs.push_back(std::move(result));
                continue;
            }
            for (const auto& line : read_lines(records_path)) {
                if (line.empty()) continue;
                const auto entry = json::parse(line);
                EpochRecord record;
                record.epoch = entry.at("epoch").get<int>();
                record.train_loss = entry.at("train_loss").get<double>();
                record.val_ppl = entry.at("val_ppl").get<double>();
                record.m = entry.at("m").get<double>();
                record.w = entry.at("w").get<double>();
                record.lr = entry.at("lr").get<double>();
                record.ckpt = entry.at("ckpt").get<std::string>();
                result.train_record.epochs.push_back(std::move(record));
            }
            if (result.train_record.epochs.empty()) {
                result.failed = true;
                result.error = "no completed epochs in " + records_path.string();
                bundle.runs.push_back(std::move(result));
                continue;
            }
            result.train_record.seed = seed;
            result.train_record.run_dir = run_dir;
            result.train_record.records_path = records_path;
            result.train_record.stopped_early =
                static_cast<int>(result.train_record.epochs.size()) <
                bundle.config.train.total_epochs;
            result.final_epoch = result.train_record.epochs.back().epoch;

            const auto eval_path = run_dir / "eval.json";
            if (std::filesystem::exists(eval_path)) {
                const auto eval_doc = json::parse(read_text_file(eval_path));
                for (const auto& [epoch_str, report_doc] : eval_doc.at("epochs").items()) {
                    result.eval_by_epoch[std::stoi(epoch_str)] =
                        report_from_counts_json(report_doc);
                }
            }
            bundle.runs.push_back(std::move(result));
        }
    }
    return bundle;
}

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

namespace {

struct PooledCounts {
    std::size_t n_correct = 0;
    std::size_t n_pairs = 0;
};

/// Final-epoch counts pooled across a variant's successful seeds.
std::map<std::string, PooledCounts> pooled_final_counts(const ResultsBundle& bundle,
                                                        const std::string& variant) {
    std::map<std::string, PooledCounts> pooled;
    for (const auto& run : bundle.runs) {
        if (run.variant != variant || run.failed || run.eval_by_epoch.empty()) continue;
        const auto& report = run.eval_by_epoch.at(run.final_epoch);
        for (const auto& [category, score] : report.per_category) {
            pooled[category].n_correct += score.n_correct;
            pooled[category].n_pairs += score.n_pairs;
        }
    }
    return pooled;
}

PooledCounts total_counts(const std::map<std::string, PooledCounts>& pooled) {
    PooledCounts total;
    for (const auto& [category, counts] : pooled) {
        total.n_correct += counts.n_correct;
        total.n_pairs += counts.n_pairs;
    }
    return total;
}

}  // namespace

std::optional<double> seed_mean_final_accuracy(const ResultsBundle& bundle,
                                               const std::string& variant,
                                               const std::string& category) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& run : bundle.runs) {
        if (run.variant != variant || run.failed || run.eval_by_epoch.empty()) continue;
        const auto& report = run.eval_by_epoch.at(run.final_epoch);
        if (category.empty()) {
            sum += report.overall;
            ++n;
        } else {
            const auto it = report.per_category.find(category);
            if (it != report.per_category.end() && it->second.n_pairs > 0) {
                sum += it->second.accuracy();
                ++n;
            }
        }
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

namespace {

std::string marker_for(const PooledCounts& a, const PooledCounts& b) {
    if (a.n_pairs == 0 || b.n_pairs == 0) return "";
    const auto z = z_test_proportions(a.n_correct, a.n_pairs, b.n_correct, b.n_pairs);
    if (!z.significant_at_05) return "";
    return z.z > 0 ? "*" : "\xE2\x80\xA0";  // dagger
}

std::vector<std::string> all_categories(const ResultsBundle& bundle) {
    std::set<std::string> seen;
    for (const auto& run : bundle.runs) {
        for (const auto& [epoch, report] : run.eval_by_epoch) {
            for (const auto& [category, score] : report.per_category) {
                seen.insert(category);
            }
        }
    }
    return canonical_category_order({seen.begin(), seen.end()});
}

const VariantSpec* find_variant(const ExperimentConfig& config, ScheduleKind kind) {
    for (const auto& variant : config.variants) {
        if (variant.schedule.kind == kind) return &variant;
    }
    return nullptr;
}

void write_table(const ResultsBundle& bundle, const std::filesystem::path& relative,
                 const std::string& content) {
    const auto full = bundle.out_dir / relative;
    std::filesystem::create_directories(full.parent_path());
    write_text_file(full, content);
}

}  // namespace

std::string eval_report_csv(const EvalReport& report) {
    std::vector<std::string> categories;
    for (const auto& [category, score] : report.per_category) {
        categories.push_back(category);
    }
    categories = canonical_category_order(categories);
    std::ostringstream out;
    out << "model,OVERALL";
    for (const auto& category : categories) out << ',' << category;
    out << "\n" << report.model_label << ',' << format_fixed(report.overall * 100.0, 2);
    for (const auto& category : categories) {
        out << ',' << format_fixed(report.per_category.at(category).accuracy() * 100.0, 2);
    }
    out << "\n";
    return out.str();
}

void save_eval_report(const EvalReport& report, const std::filesystem::path& csv_path,
                      const std::filesystem::path& json_path) {
    write_text_file(csv_path, eval_report_csv(report));
    write_text_file(json_path, report_counts_json(report).dump(2) + "\n");
}

void emit_tables(ResultsBundle& bundle) {
    const auto& config = bundle.config;
    const auto tables_dir = std::filesystem::path("tables");
    const auto categories = all_categories(bundle);
    const bool have_eval = !categories.empty();

    const VariantSpec* baseline = find_variant(config, ScheduleKind::none);
    const VariantSpec* exponential = find_variant(config, ScheduleKind::exponential);
    const VariantSpec* reversed = find_variant(config, ScheduleKind::reversed_exponential);

    std::map<std::string, std::map<std::string, PooledCounts>> pooled;
    for (const auto& variant : config.variants) {
        pooled[variant.label] = pooled_final_counts(bundle, variant.label);
    }

    // (a) accuracy matrix with significance markers against the unbiased row
    if (have_eval) {
        std::ostringstream out;
        out << "model,OVERALL";
        for (const auto& category : categories) out << ',' << category;
        out << "\n";
        for (const auto& variant : config.variants) {
            out << variant.label;
            const bool mark = baseline != nullptr && variant.label != baseline->label;
            const auto mean_overall = seed_mean_final_accuracy(bundle, variant.label, "");
            out << ',';
            if (mean_overall) {
                out << format_fixed(*mean_overall * 100.0, 2);
                if (mark) {
                    out << marker_for(total_counts(pooled[variant.label]),
                                      total_counts(pooled[baseline->label]));
                }
            }
            for (const auto& category : categories) {
                out << ',';
                const auto mean = seed_mean_final_accuracy(bundle, variant.label, category);
                if (!mean) continue;
                out << format_fixed(*mean * 100.0, 2);
                if (mark && pooled[variant.label].count(category) &&
                    pooled[baseline->label].count(category)) {
                    out << marker_for(pooled[variant.label][category],
                                      pooled[baseline->label][category]);
                }
            }
            out << "\n";
        }
        write_table(bundle, tables_dir / "table1.csv", out.str());
        if (baseline == nullptr) {
            bundle.omissions.push_back("table1: no unbiased baseline variant, markers omitted");
        }
    } else {
        bundle.omissions.push_back("table1 omitted: no evaluation data");
    }

    // (b) forward-vs-reversed delta table
    if (have_eval && exponential != nullptr && reversed != nullptr) {
        std::ostringstream out;
        out << "model,OVERALL";
        for (const auto& category : categories) out << ',' << category;
        out << "\n";
        for (const VariantSpec* variant : {exponential, reversed}) {
            out << variant->label;
            const auto mean_overall = seed_mean_final_accuracy(bundle, variant->label, "");
            out << ',' << (mean_overall ? format_fixed(*mean_overall * 100.0, 2) : "");
            for (const auto& category : categories) {
                const auto mean = seed_mean_final_accuracy(bundle, variant->label, category);
                out << ',' << (mean ? format_fixed(*mean * 100.0, 2) : "");
            }
            out << "\n";
        }
        out << "delta";
        {
            const auto fwd = seed_mean_final_accuracy(bundle, exponential->label, "");
            const auto rev = seed_mean_final_accuracy(bundle, reversed->label, "");
            out << ',';
            if (fwd && rev) {
                out << format_fixed((*fwd - *rev) * 100.0, 2)
                    << marker_for(total_counts(pooled[exponential->label]),
                                  total_counts(pooled[reversed->label]));
            }
        }
        for (const auto& category : categories) {
            const auto fwd = seed_mean_final_accuracy(bundle, exponential->label, category);
            const auto rev = seed_mean_final_accuracy(bundle, reversed->label, category);
            out << ',';
            if (fwd && rev) {
                out << format_fixed((*fwd - *rev) * 100.0, 2);
                if (pooled[exponential->label].count(category) &&
                    pooled[reversed->label].count(category)) {
                    out << marker_for(pooled[exponential->label][category],
                                      pooled[reversed->label][category]);
                }
            }
        }
        out << "\n";
        write_table(bundle, tables_dir / "table3.csv", out.str());
    } else if (have_eval) {
        bundle.omissions.push_back(
            "table3 omitted: needs both an exponential and a reversed_exponential variant");
    }

    // significance matrix: exponential variant against every other variant
    if (have_eval && exponential != nullptr) {
        std::ostringstream out;
        out << "reference,baseline,category,z,p,significant\n";
        for (const auto& variant : config.variants) {
            if (variant.label == exponential->label) continue;
            auto emit_row = [&](const std::string& category, const PooledCounts& a,
                                const PooledCounts& b) {
                if (a.n_pairs == 0 || b.n_pairs == 0) return;
                const auto z = z_test_proportions(a.n_correct, a.n_pairs, b.n_correct, b.n_pairs);
                out << exponential->label << ',' << variant.label << ',' << category << ','
                    << (z.degenerate ? "nan" : format_fixed(z.z, 6)) << ','
                    << format_sci(z.p_two_sided) << ',' << (z.significant_at_05 ? 1 : 0) << "\n";
            };
            emit_row("OVERALL", total_counts(pooled[exponential->label]),
                     total_counts(pooled[variant.label]));
            for (const auto& category : categories) {
                if (pooled[exponential->label].count(category) &&
                    pooled[variant.label].count(category)) {
                    emit_row(category, pooled[exponential->label][category],
                             pooled[variant.label][category]);
                }
            }
        }
        write_table(bundle, tables_dir / "significance.csv", out.str());
    } else if (have_eval) {
        bundle.omissions.push_back("significance omitted: no exponential variant");
    }

    // (c) capacity curves per variant
    for (const auto& variant : config.variants) {
        write_table(bundle, tables_dir / ("capacity_" + sanitize_label(variant.label) + ".csv"),
                    capacity_curve_csv(variant.schedule));
    }

    // (d) accuracy trajectories over evaluated epochs
    if (have_eval) {
        std::ostringstream out;
        out << "model,epoch,OVERALL";
        for (const auto& category : categories) out << ',' << category;
        out << "\n";
        for (const auto& variant : config.variants) {
            std::set<int> epochs;
            for (const auto& run : bundle.runs) {
                if (run.variant != variant.label || run.failed) continue;
                for (const auto& [epoch, report] : run.eval_by_epoch) epochs.insert(epoch);
            }
            for (int epoch : epochs) {
                double overall_sum = 0.0;
                std::size_t overall_n = 0;
                std::map<std::string, std::pair<double, std::size_t>> cat_sums;
                for (const auto& run : bundle.runs) {
                    if (run.variant != variant.label || run.failed) continue;
                    const auto it = run.eval_by_epoch.find(epoch);
                    if (it == run.eval_by_epoch.end()) continue;
                    overall_sum += it->second.overall;
                    ++overall_n;
                    for (const auto& [category, score] : it->second.per_category) {
                        if (score.n_pairs > 0) {
                            cat_sums[category].first += score.accuracy();
                            ++cat_sums[category].second;
                        }
                    }
                }
                if (overall_n == 0) continue;
                out << variant.label << ',' << epoch << ','
                    << format_fixed(overall_sum / static_cast<double>(overall_n) * 100.0, 2);
                for (const auto& category : categories) {
                    out << ',';
                    const auto it = cat_sums.find(category);
                    if (it != cat_sums.end()) {
                        out << format_fixed(
                            it->second.first / static_cast<double>(it->second.second) * 100.0,
                            2);
                    }
                }
                out << "\n";
            }
        }
        write_table(bundle, tables_dir / "trajectory.csv", out.str());
    }

    // manifest: every artifact in the bundle, hashed
    json failures = json::array();
    for (const auto& run : bundle.runs) {
        if (run.failed) {
            failures.push_back(
                {{"variant", run.variant}, {"seed", run.seed}, {"error", run.error}});
        }
    }
    std::vector<std::string> relative_paths;
    for (auto it = std::filesystem::recursive_directory_iterator(bundle.out_dir);
         it != std::filesystem::recursive_directory_iterator(); ++it) {
        if (!it->is_regular_file()) continue;
        const auto rel = std::filesystem::relative(it->path(), bundle.out_dir).generic_string();
        if (rel == "manifest.json") continue;
        relative_paths.push_back(rel);
    }
    std::sort(relative_paths.begin(), relative_paths.end());
    json files = json::array();
    bundle.files.clear();
    for (const auto& rel : relative_paths) {
        const auto hash = to_hex(fnv1a64(read_text_file(bundle.out_dir / rel)));
        files.push_back({{"path", rel}, {"fnv1a64", hash}});
        bundle.files.emplace_back(rel, hash);
    }
    json manifest{{"profile", config.profile},
                  {"seeds", config.train.seeds},
                  {"variants", json::array()},
                  {"failures", failures},
                  {"omissions", bundle.omissions},
                  {"files", files}};
    for (const auto& variant : config.variants) {
        manifest["variants"].push_back(variant.label);
    }
    write_text_file(bundle.out_dir / "manifest.json", manifest.dump(2) + "\n");
}

}  // namespace cplm
