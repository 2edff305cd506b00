#include <cmath>

#include "doctest.h"

#include "cplm/analysis.hpp"
#include "cplm/rng.hpp"
#include "cplm/synthetic.hpp"
#include "test_util.hpp"

using namespace cplm;
using cplm_test::TempDir;

namespace {

EmbeddingSnapshot snapshot_at(double x, double y, int epoch, int space) {
    EmbeddingSnapshot snapshot;
    snapshot.epoch = epoch;
    snapshot.labels = {"good", "bad"};
    snapshot.vectors = Eigen::MatrixXd::Zero(2, 2);
    snapshot.projection = Eigen::MatrixXd(2, 2);
    snapshot.projection << x, y, x, y;
    snapshot.projection_space = space;
    return snapshot;
}

}  // namespace

TEST_SUITE("analysis") {

TEST_CASE("pca: collinear points project with zero second coordinate") {
    Eigen::MatrixXd points(3, 10);
    Eigen::RowVectorXd direction = Eigen::RowVectorXd::LinSpaced(10, 0.3, 1.2);
    points.row(0) = 1.0 * direction;
    points.row(1) = 2.5 * direction;
    points.row(2) = -0.75 * direction;
    const auto projected = project_2d(points, ProjectionMethod::pca, 0);
    REQUIRE(projected.rows() == 3);
    for (int i = 0; i < 3; ++i) {
        CHECK(std::abs(projected(i, 1)) < 1e-6);
    }
}

TEST_CASE("pca: axis-aligned 2-D data comes back unchanged up to sign") {
    Eigen::MatrixXd points(4, 2);
    points << 3, 0, -3, 0, 0, 1, 0, -1;
    const auto projected = project_2d(points, ProjectionMethod::pca, 0);
    CHECK((projected - points).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("pca is bit-for-bit reproducible") {
    Rng rng(55);
    Eigen::MatrixXd points(40, 8);
    for (Eigen::Index i = 0; i < points.size(); ++i) {
        points.data()[i] = rng.normal();
    }
    const auto a = project_2d(points, ProjectionMethod::pca, 1);
    const auto b = project_2d(points, ProjectionMethod::pca, 2);  // seed unused for pca
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        REQUIRE(a.data()[i] == b.data()[i]);
    }
}

TEST_CASE("pca: joint projection of a shifted copy preserves the shift length") {
    Rng rng(19);
    Eigen::MatrixXd base(30, 2);
    for (Eigen::Index i = 0; i < base.size(); ++i) {
        base.data()[i] = rng.normal();
    }
    const double shift = 3.75;
    Eigen::MatrixXd joint(60, 2);
    joint.topRows(30) = base;
    joint.bottomRows(30) = base;
    joint.bottomRows(30).col(0).array() += shift;

    const auto projected = project_2d(joint, ProjectionMethod::pca, 0);
    const Eigen::RowVector2d mean_a = projected.topRows(30).colwise().mean();
    const Eigen::RowVector2d mean_b = projected.bottomRows(30).colwise().mean();
    CHECK((mean_a - mean_b).norm() == doctest::Approx(shift).epsilon(1e-9));
}

TEST_CASE("projection input validation") {
    CHECK_THROWS_AS(project_2d(Eigen::MatrixXd::Zero(1, 5), ProjectionMethod::pca, 0),
                    std::invalid_argument);
    CHECK_THROWS_AS(project_2d(Eigen::MatrixXd::Zero(5, 1), ProjectionMethod::pca, 0),
                    std::invalid_argument);
}

TEST_CASE("tsne: deterministic per seed, shape N x 2") {
    Rng rng(77);
    Eigen::MatrixXd points(25, 6);
    for (Eigen::Index i = 0; i < points.size(); ++i) {
        points.data()[i] = rng.normal();
    }
    const auto a = project_2d(points, ProjectionMethod::tsne, 9);
    const auto b = project_2d(points, ProjectionMethod::tsne, 9);
    REQUIRE(a.rows() == 25);
    REQUIRE(a.cols() == 2);
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        REQUIRE(a.data()[i] == b.data()[i]);
    }
    const auto c = project_2d(points, ProjectionMethod::tsne, 10);
    CHECK((a - c).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("histogram entropy oracles") {
    Eigen::MatrixXd same = Eigen::MatrixXd::Constant(17, 2, 3.25);
    CHECK(histogram_entropy(same) == 0.0);

    // one point per bin on a 50x50 grid
    Eigen::MatrixXd grid(2500, 2);
    for (int i = 0; i < 50; ++i) {
        for (int j = 0; j < 50; ++j) {
            grid(i * 50 + j, 0) = (i + 0.5) / 50.0;
            grid(i * 50 + j, 1) = (j + 0.5) / 50.0;
        }
    }
    CHECK(histogram_entropy(grid, 50) ==
          doctest::Approx(std::log(2500.0)).epsilon(1e-9));

    // even split between exactly two bins
    Eigen::MatrixXd two(4, 2);
    two << 0, 0, 0, 0, 1, 0, 1, 0;
    CHECK(histogram_entropy(two, 50) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("entropy bounds and scale invariance") {
    Rng rng(31);
    for (int trial = 0; trial < 25; ++trial) {
        const auto n = rng.uniform_int(1, 400);
        Eigen::MatrixXd points(n, 2);
        for (Eigen::Index i = 0; i < points.size(); ++i) {
            points.data()[i] = rng.normal() * 10.0;
        }
        const double entropy = histogram_entropy(points, 50);
        CHECK(entropy >= 0.0);
        CHECK(entropy <= std::log(2500.0) + 1e-12);

        // power-of-two scaling is exact in floating point, so binning and
        // entropy are bit-identical
        const double scale = std::exp2(static_cast<double>(rng.uniform_int(-8, 8)));
        CHECK(histogram_entropy(points * scale, 50) == entropy);
    }
}

TEST_CASE("mean distance between snapshots") {
    const auto origin = snapshot_at(0.0, 0.0, 1, 7);
    const auto away = snapshot_at(3.0, 4.0, 5, 7);
    CHECK(epoch_mean_distance(origin, away) == 5.0);
    CHECK(epoch_mean_distance(origin, origin) == 0.0);

    const auto other_space = snapshot_at(1.0, 1.0, 5, 8);
    CHECK_THROWS_AS(epoch_mean_distance(origin, other_space), std::invalid_argument);

    EmbeddingSnapshot unprojected;
    unprojected.vectors = Eigen::MatrixXd::Zero(2, 2);
    CHECK_THROWS_AS(epoch_mean_distance(origin, unprojected), std::invalid_argument);
}

TEST_CASE("mean distance is a metric on snapshot means") {
    Rng rng(47);
    for (int trial = 0; trial < 40; ++trial) {
        const auto a = snapshot_at(rng.normal() * 5, rng.normal() * 5, 1, 3);
        const auto b = snapshot_at(rng.normal() * 5, rng.normal() * 5, 2, 3);
        const auto c = snapshot_at(rng.normal() * 5, rng.normal() * 5, 3, 3);
        const double ab = epoch_mean_distance(a, b);
        const double ba = epoch_mean_distance(b, a);
        const double bc = epoch_mean_distance(b, c);
        const double ac = epoch_mean_distance(a, c);
        CHECK(ab >= 0.0);
        CHECK(ab == doctest::Approx(ba).epsilon(1e-15));
        CHECK(ac <= ab + bc + 1e-12);
    }
}

TEST_CASE("trajectory over identical checkpoints has zero drift") {
    TempDir dir("traj");
    const auto corpus = synthetic_corpus(5, 120);
    const auto tok = Tokenizer::train(corpus, 256, TokenizerMode::word);
    const auto pairs = synthetic_benchmark(5, 12);

    ModelConfig config;
    config.n_layers = 1;
    config.n_heads = 2;
    config.d_model = 16;
    config.vocab_size = tok.vocab_size();
    config.max_seq_len = 16;
    config.dropout = 0.0;
    config.positional = PositionalKind::none;
    GptModel<float> model(config, 3);

    std::vector<std::filesystem::path> paths;
    for (int epoch : {1, 5, 10}) {
        CheckpointMeta meta;
        meta.config = config;
        meta.epoch = epoch;
        meta.slope_at_save = 0.25;
        meta.bias_active = true;
        const auto path = dir.path / ("epoch_" + std::to_string(epoch) + ".ckpt");
        save_checkpoint(path, meta, model.params());
        paths.push_back(path);
    }

    const auto report = track_trajectory(paths, pairs, {}, tok, ProjectionMethod::pca, 0, 50);
    REQUIRE(report.epochs.size() == 3);
    REQUIRE(report.distances.size() == 3);  // (1,5), (5,10), (1,10)
    CHECK(report.distances[0].epoch_a == 1);
    CHECK(report.distances[0].epoch_b == 5);
    CHECK(report.distances[1].epoch_a == 5);
    CHECK(report.distances[1].epoch_b == 10);
    CHECK(report.distances[2].epoch_a == 1);
    CHECK(report.distances[2].epoch_b == 10);
    for (const auto& distance : report.distances) {
        CHECK(distance.distance < 1e-9);
    }
    for (const auto& epoch : report.epochs) {
        CHECK(epoch.overall_accuracy >= 0.0);
        CHECK(epoch.overall_accuracy <= 1.0);
    }

    const auto csv = trajectory_stats_csv("model", report);
    CHECK(csv.find("entropy@1") != std::string::npos);
    CHECK(csv.find("dist@1-5") != std::string::npos);
    CHECK(csv.find("dist@5-10") != std::string::npos);
    CHECK(csv.find("dist@1-10") != std::string::npos);

    CHECK_THROWS_AS(track_trajectory({paths[0]}, pairs, {}, tok, ProjectionMethod::pca, 0, 50),
                    std::invalid_argument);
}

TEST_CASE("category filter restricts the embedded pairs") {
    TempDir dir("traj_filter");
    const auto corpus = synthetic_corpus(6, 120);
    const auto tok = Tokenizer::train(corpus, 256, TokenizerMode::word);
    const auto pairs = synthetic_benchmark(6, 12);

    ModelConfig config;
    config.n_layers = 1;
    config.n_heads = 2;
    config.d_model = 16;
    config.vocab_size = tok.vocab_size();
    config.max_seq_len = 16;
    config.dropout = 0.0;
    GptModel<float> model(config, 4);
    std::vector<std::filesystem::path> paths;
    for (int epoch : {1, 2}) {
        CheckpointMeta meta;
        meta.config = config;
        meta.epoch = epoch;
        const auto path = dir.path / ("e" + std::to_string(epoch) + ".ckpt");
        save_checkpoint(path, meta, model.params());
        paths.push_back(path);
    }

    const auto filtered =
        track_trajectory(paths, pairs, {"S-V AGR"}, tok, ProjectionMethod::pca, 0, 50);
    std::size_t sv_pairs = 0;
    for (const auto& pair : pairs) {
        if (pair.category == "S-V AGR") ++sv_pairs;
    }
    CHECK(filtered.snapshots[0].vectors.rows() == static_cast<Eigen::Index>(2 * sv_pairs));
    CHECK_THROWS_AS(
        track_trajectory(paths, pairs, {"NOPE"}, tok, ProjectionMethod::pca, 0, 50),
        std::invalid_argument);
}

TEST_CASE("projection CSV and SVG artifacts") {
    auto snapshot = snapshot_at(1.0, 2.0, 3, 1);
    const auto csv = projection_csv({snapshot});
    CHECK(csv.rfind("x,y,label,epoch\n", 0) == 0);
    CHECK(csv.find("good,3") != std::string::npos);

    const auto svg = projection_svg(snapshot);
    CHECK(svg.find("<svg") != std::string::npos);
    CHECK(svg.find("circle") != std::string::npos);
    CHECK(svg.find("epoch 3") != std::string::npos);
}

}  // TEST_SUITE
