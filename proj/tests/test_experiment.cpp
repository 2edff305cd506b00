#include <fstream>

#include "doctest.h"

#include "cplm/errors.hpp"
#include "cplm/experiment.hpp"
#include "cplm/synthetic.hpp"
#include "cplm/text.hpp"
#include "test_util.hpp"

using namespace cplm;
using cplm_test::TempDir;

namespace {

std::filesystem::path write_fixture_corpus(const TempDir& dir) {
    const auto path = dir.path / "corpus.txt";
    save_corpus(synthetic_corpus(1, 80), path);
    return path;
}

std::string minimal_config_text(const std::filesystem::path& corpus) {
    return std::string("{\n") + "  \"config_version\": 1,\n" + "  \"corpus\": {\"train_path\": \"" +
           corpus.string() + "\"},\n" +
           "  \"variants\": [{\"label\": \"exp\", \"kind\": \"exponential\"}]\n" + "}\n";
}

/// A bundle with crafted final-epoch counts, no training involved.
ResultsBundle crafted_bundle(const TempDir& dir) {
    ResultsBundle bundle;
    bundle.out_dir = dir.path / "bundle";
    std::filesystem::create_directories(bundle.out_dir);

    bundle.config.profile = "desk-scale";
    bundle.config.output_dir = bundle.out_dir;
    bundle.config.train.seeds = {0, 1};
    bundle.config.variants = {
        {"NoLimit", {ScheduleKind::none, 0.0, 1.0, 10}},
        {"DynamicLimit-Exp", {ScheduleKind::exponential, 1.0, 0.6, 10}},
        {"DynamicLimit-Exp-Reversed", {ScheduleKind::reversed_exponential, 0.01, 1.668, 10}},
    };

    auto make_run = [](const std::string& variant, std::uint64_t seed, std::size_t correct_case,
                       std::size_t correct_npi) {
        RunResult run;
        run.variant = variant;
        run.seed = seed;
        run.final_epoch = 3;
        EvalReport report;
        report.model_label = variant;
        report.seed_set = {seed};
        report.per_category["CASE"] = {1000, correct_case, 0};
        report.per_category["NPI"] = {1000, correct_npi, 0};
        report.overall = (static_cast<double>(correct_case) / 1000.0 +
                          static_cast<double>(correct_npi) / 1000.0) /
                         2.0;
        run.eval_by_epoch[3] = report;
        EvalReport early = report;
        run.eval_by_epoch[1] = early;
        return run;
    };
    // per-seed counts chosen so pooled CASE pools to 1244/2000 vs 1130/2000
    bundle.runs.push_back(make_run("NoLimit", 0, 560, 520));
    bundle.runs.push_back(make_run("NoLimit", 1, 570, 500));
    bundle.runs.push_back(make_run("DynamicLimit-Exp", 0, 620, 521));
    bundle.runs.push_back(make_run("DynamicLimit-Exp", 1, 624, 519));
    bundle.runs.push_back(make_run("DynamicLimit-Exp-Reversed", 0, 500, 500));
    bundle.runs.push_back(make_run("DynamicLimit-Exp-Reversed", 1, 500, 500));
    return bundle;
}

std::vector<std::string> csv_lines(const std::filesystem::path& path) {
    std::vector<std::string> lines;
    for (const auto& line : read_lines(path)) {
        if (!line.empty()) lines.push_back(line);
    }
    return lines;
}

std::vector<std::string> split_csv_row(const std::string& row) {
    std::vector<std::string> cells;
    std::string cell;
    for (char c : row + ",") {
        if (c == ',') {
            cells.push_back(cell);
            cell.clear();
        } else {
            cell += c;
        }
    }
    return cells;
}

}  // namespace

TEST_SUITE("experiment") {

TEST_CASE("minimal config fills defaults from the paper-main profile") {
    TempDir dir("cfg_min");
    const auto corpus = write_fixture_corpus(dir);
    const auto config_path = dir.path / "config.json";
    write_text_file(config_path, minimal_config_text(corpus));

    const auto config = validate_config(config_path);
    CHECK(config.profile == "paper-main");
    CHECK(config.train.total_epochs == 10);
    CHECK(config.train.lr == 5e-6);
    CHECK(config.train.batch_size == 512);
    CHECK(config.model.d_model == 256);
    REQUIRE(config.variants.size() == 1);
    CHECK(config.variants[0].schedule.m0 == 1.0);
    CHECK(config.variants[0].schedule.r == 0.6);
    CHECK(config.variants[0].schedule.horizon_epochs == 10);
    CHECK(config.train.seeds == std::vector<std::uint64_t>{0, 1, 2});
}

TEST_CASE("m0 out of range is reported with the expected message") {
    TempDir dir("cfg_m0");
    const auto corpus = write_fixture_corpus(dir);
    const auto config_path = dir.path / "config.json";
    write_text_file(config_path,
                    "{\"config_version\":1,\"corpus\":{\"train_path\":\"" + corpus.string() +
                        "\"},\"variants\":[{\"label\":\"x\",\"kind\":\"exponential\","
                        "\"m0\":1.5}]}");
    CHECK_THROWS_WITH_AS(validate_config(config_path), doctest::Contains("m0 out of [0,1]"),
                         ConfigError);
}

TEST_CASE("duplicate variant labels are rejected") {
    TempDir dir("cfg_dup");
    const auto corpus = write_fixture_corpus(dir);
    const auto config_path = dir.path / "config.json";
    write_text_file(config_path,
                    "{\"config_version\":1,\"corpus\":{\"train_path\":\"" + corpus.string() +
                        "\"},\"variants\":[{\"label\":\"x\",\"kind\":\"none\"},"
                        "{\"label\":\"x\",\"kind\":\"static\"}]}");
    CHECK_THROWS_WITH_AS(validate_config(config_path),
                         doctest::Contains("duplicate variant label"), ConfigError);
}

TEST_CASE("unknown keys are rejected and all violations are listed") {
    TempDir dir("cfg_unknown");
    const auto corpus = write_fixture_corpus(dir);
    const auto config_path = dir.path / "config.json";
    write_text_file(config_path,
                    "{\"config_version\":1,\"coprus\":{},\"corpus\":{\"train_path\":\"" +
                        corpus.string() +
                        "\",\"bogus\":3},\"train\":{\"lr\":0},"
                        "\"variants\":[{\"label\":\"x\",\"kind\":\"exponential\"}]}");
    try {
        validate_config(config_path);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string message = e.what();
        CHECK(message.find("unknown key 'coprus'") != std::string::npos);
        CHECK(message.find("unknown key 'corpus.bogus'") != std::string::npos);
        CHECK(message.find("lr must be > 0") != std::string::npos);
    }
}

TEST_CASE("missing corpus path is a validation error") {
    TempDir dir("cfg_nopath");
    const auto config_path = dir.path / "config.json";
    write_text_file(config_path,
                    "{\"config_version\":1,\"corpus\":{\"train_path\":\"/does/not/exist\"},"
                    "\"variants\":[{\"label\":\"x\",\"kind\":\"none\"}]}");
    CHECK_THROWS_WITH_AS(validate_config(config_path), doctest::Contains("does not exist"),
                         ConfigError);
}

TEST_CASE("profiles carry their distinguishing values") {
    CHECK(profile_defaults("paper-main").train.total_epochs == 10);
    CHECK(profile_defaults("table-6").train.total_epochs == 20);
    CHECK(profile_defaults("desk-scale").model.d_model == 64);
    CHECK(profile_defaults("desk-scale").train.batch_size == 32);
    CHECK(profile_defaults("length-bands").model.max_seq_len == 160);
    CHECK(profile_defaults("paper-main").variants.size() == 5);
    CHECK_THROWS_AS(profile_defaults("nope"), ConfigError);
}

TEST_CASE("profile override flag beats the config's profile key") {
    TempDir dir("cfg_profile");
    const auto corpus = write_fixture_corpus(dir);
    const auto config_path = dir.path / "config.json";
    write_text_file(config_path, "{\"config_version\":1,\"profile\":\"paper-main\","
                                 "\"corpus\":{\"train_path\":\"" +
                                     corpus.string() + "\"}}");
    const auto config = validate_config(config_path, "table-6");
    CHECK(config.train.total_epochs == 20);
}

TEST_CASE("emit_tables: markers agree with z_test_proportions exactly") {
    TempDir dir("tables");
    auto bundle = crafted_bundle(dir);
    emit_tables(bundle);

    const auto lines = csv_lines(bundle.out_dir / "tables" / "table1.csv");
    REQUIRE(lines.size() == 4);
    const auto header = split_csv_row(lines[0]);
    REQUIRE(header.size() == 4);
    CHECK(header[0] == "model");
    CHECK(header[1] == "OVERALL");
    CHECK(header[2] == "CASE");
    CHECK(header[3] == "NPI");

    // pooled CASE counts: exp 1244/2000 vs none 1130/2000 -> z ~ 3.67 -> '*'
    const auto exp_row = split_csv_row(lines[2]);
    CHECK(exp_row[0] == "DynamicLimit-Exp");
    CHECK(exp_row[2] == "62.20*");
    // NPI pooled: 1040/2000 vs 1020/2000 -> not significant -> no marker
    const auto npi_z = z_test_proportions(1040, 2000, 1020, 2000);
    CHECK_FALSE(npi_z.significant_at_05);
    CHECK(exp_row[3] == "52.00");

    // baseline row carries no markers
    const auto base_row = split_csv_row(lines[1]);
    CHECK(base_row[0] == "NoLimit");
    CHECK(base_row[2] == "56.50");

    // every marker in the table matches a fresh z-test on the pooled counts
    const auto case_z = z_test_proportions(1244, 2000, 1130, 2000);
    CHECK(case_z.significant_at_05);
    CHECK(case_z.z > 0);
}

TEST_CASE("emit_tables: delta table and significance matrix") {
    TempDir dir("tables3");
    auto bundle = crafted_bundle(dir);
    emit_tables(bundle);

    const auto lines = csv_lines(bundle.out_dir / "tables" / "table3.csv");
    REQUIRE(lines.size() == 4);  // header, forward, reversed, delta
    const auto delta = split_csv_row(lines[3]);
    CHECK(delta[0] == "delta");
    // CASE: 62.20 - 50.00 = 12.20, significant
    CHECK(delta[2].rfind("12.20", 0) == 0);

    const auto sig_lines = csv_lines(bundle.out_dir / "tables" / "significance.csv");
    REQUIRE(sig_lines.size() > 1);
    CHECK(sig_lines[0] == "reference,baseline,category,z,p,significant");
    bool found_case_row = false;
    for (const auto& line : sig_lines) {
        const auto cells = split_csv_row(line);
        if (cells.size() == 6 && cells[0] == "DynamicLimit-Exp" && cells[1] == "NoLimit" &&
            cells[2] == "CASE") {
            found_case_row = true;
            const auto expected = z_test_proportions(1244, 2000, 1130, 2000);
            CHECK(std::stod(cells[3]) == doctest::Approx(expected.z).epsilon(1e-6));
            CHECK(cells[5] == "1");
        }
    }
    CHECK(found_case_row);
}

TEST_CASE("emit_tables: capacity curves, trajectory, and hashed manifest") {
    TempDir dir("tables_misc");
    auto bundle = crafted_bundle(dir);
    emit_tables(bundle);

    const auto capacity = csv_lines(bundle.out_dir / "tables" / "capacity_DynamicLimit-Exp.csv");
    REQUIRE(capacity.size() == 12);  // header + epochs 0..10
    CHECK(capacity[0] == "epoch,m,w");
    const auto last = split_csv_row(capacity[11]);
    CHECK(std::stod(last[2]) == doctest::Approx(0.9939533824).epsilon(1e-9));

    const auto trajectory = csv_lines(bundle.out_dir / "tables" / "trajectory.csv");
    CHECK(trajectory.size() == 1 + 3 * 2);  // 3 variants x epochs {1, 3}

    // manifest lists every file with a matching hash
    const auto manifest_text = read_text_file(bundle.out_dir / "manifest.json");
    CHECK(manifest_text.find("table1.csv") != std::string::npos);
    for (const auto& [rel, hash] : bundle.files) {
        const auto content = read_text_file(bundle.out_dir / rel);
        REQUIRE(to_hex(fnv1a64(content)) == hash);
    }
}

TEST_CASE("seed-averaged accuracy equals the mean of per-seed accuracies") {
    TempDir dir("seed_mean");
    auto bundle = crafted_bundle(dir);
    const auto mean = seed_mean_final_accuracy(bundle, "DynamicLimit-Exp", "CASE");
    REQUIRE(mean.has_value());
    CHECK(*mean == doctest::Approx((0.620 + 0.624) / 2.0).epsilon(1e-12));
    const auto overall = seed_mean_final_accuracy(bundle, "DynamicLimit-Exp", "");
    const double per_seed_mean =
        (bundle.runs[2].eval_by_epoch.at(3).overall + bundle.runs[3].eval_by_epoch.at(3).overall) /
        2.0;
    CHECK(*overall == doctest::Approx(per_seed_mean).epsilon(1e-12));
    CHECK_FALSE(seed_mean_final_accuracy(bundle, "missing", "").has_value());
}

TEST_CASE("eval report CSV layout") {
    EvalReport report;
    report.model_label = "toy";
    report.per_category["NPI"] = {10, 7, 0};
    report.per_category["CASE"] = {10, 9, 0};
    report.overall = 0.8;
    const auto csv = eval_report_csv(report);
    CHECK(csv == "model,OVERALL,CASE,NPI\ntoy,80.00,90.00,70.00\n");
}

}  // TEST_SUITE
