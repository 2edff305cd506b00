#include <cmath>

#include "doctest.h"

#include "cplm/errors.hpp"
#include "cplm/model.hpp"
#include "cplm/rng.hpp"
#include "cplm/text.hpp"
#include "test_util.hpp"

using namespace cplm;
using cplm_test::TempDir;

namespace {

ModelConfig tiny_config(int vocab, PositionalKind positional = PositionalKind::none) {
    ModelConfig config;
    config.n_layers = 2;
    config.n_heads = 2;
    config.d_model = 16;
    config.vocab_size = vocab;
    config.max_seq_len = 12;
    config.dropout = 0.0;
    config.positional = positional;
    return config;
}

std::vector<int> random_ids(Rng& rng, int vocab, int length) {
    std::vector<int> ids(static_cast<std::size_t>(length));
    for (auto& id : ids) {
        id = static_cast<int>(rng.uniform_int(0, vocab - 1));
    }
    return ids;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("forward shape contract, including single-token inputs") {
    GptModel<float> model(tiny_config(23), 1);
    const auto logits1 = model.forward({5}, {});
    CHECK(logits1.rows() == 1);
    CHECK(logits1.cols() == 23);
    const auto logits4 = model.forward({5, 6, 7, 8}, {});
    CHECK(logits4.rows() == 4);
    CHECK(logits4.allFinite());
}

TEST_CASE("input validation: length, vocabulary range, slope count") {
    GptModel<float> model(tiny_config(23), 1);
    CHECK_THROWS_AS(model.forward(std::vector<int>(13, 1), {}), std::invalid_argument);
    CHECK_THROWS_AS(model.forward({23}, {}), std::out_of_range);
    CHECK_THROWS_AS(model.forward({1}, {0.5}), std::invalid_argument);  // needs 2 slopes

    GptModel<float> learned(tiny_config(23, PositionalKind::learned), 1);
    CHECK_THROWS_AS(learned.forward({1, 2}, {0.5, 0.25}), std::invalid_argument);
}

TEST_CASE("row-wise softmax of logits normalizes within 1e-6") {
    GptModel<float> model(tiny_config(31), 3);
    const auto logits = model.forward({1, 2, 3, 4, 5}, {0.5, 0.25});
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
        const Eigen::VectorXd row = logits.row(t).transpose().cast<double>();
        const double m = row.maxCoeff();
        const double sum = ((row.array() - m).exp() / (row.array() - m).exp().sum()).sum();
        CHECK(std::abs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("softmax normalization tightens to 1e-12 at 64-bit") {
    GptModel<double> model(tiny_config(31), 3);
    const auto logits = model.forward({1, 2, 3, 4, 5}, {0.5, 0.25});
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
        const Eigen::VectorXd row = logits.row(t);
        const double m = row.maxCoeff();
        const double sum = ((row.array() - m).exp() / (row.array() - m).exp().sum()).sum();
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("zero slopes match the bias-free attention path within 1e-6") {
    GptModel<float> model(tiny_config(29), 11);
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const auto ids = random_ids(rng, 29, static_cast<int>(rng.uniform_int(1, 12)));
        const auto biased = model.forward(ids, {0.0, 0.0});
        const auto plain = model.forward(ids, {});
        CHECK((biased - plain).cwiseAbs().maxCoeff() < 1e-6f);
    }
}

TEST_CASE("learned positions with a zeroed table also match the bias-free path") {
    const auto config = tiny_config(29, PositionalKind::learned);
    GptModel<float> with_pos(config, 11);
    with_pos.params().pos_emb.setZero();

    auto none_config = config;
    none_config.positional = PositionalKind::none;
    ModelParams<float> copy = with_pos.params();
    copy.pos_emb.resize(0, 0);
    GptModel<float> without(none_config, std::move(copy));

    const std::vector<int> ids{3, 1, 4, 1, 5};
    CHECK((with_pos.forward(ids, {}) - without.forward(ids, {0.0, 0.0}))
              .cwiseAbs()
              .maxCoeff() < 1e-6f);
}

TEST_CASE("nonzero slopes change the logits") {
    GptModel<float> model(tiny_config(29), 11);
    const std::vector<int> ids{3, 1, 4, 1, 5};
    const auto biased = model.forward(ids, {1.0, 0.5});
    const auto plain = model.forward(ids, {});
    CHECK((biased - plain).cwiseAbs().maxCoeff() > 1e-4f);
}

TEST_CASE("causality: prefix logits are exactly invariant to suffix edits") {
    Rng rng(17);
    GptModel<float> model(tiny_config(29), 7);
    for (int trial = 0; trial < 200; ++trial) {
        const int length = static_cast<int>(rng.uniform_int(2, 12));
        auto ids = random_ids(rng, 29, length);
        const int edit_pos = static_cast<int>(rng.uniform_int(1, length - 1));
        const bool biased = rng.uniform() < 0.5;
        const std::vector<double> slopes =
            biased ? std::vector<double>{1.0, 0.25} : std::vector<double>{};

        const auto before = model.forward(ids, slopes);
        auto edited = ids;
        edited[static_cast<std::size_t>(edit_pos)] =
            (edited[static_cast<std::size_t>(edit_pos)] + 7) % 29;
        const auto after = model.forward(edited, slopes);

        for (int t = 0; t < edit_pos; ++t) {
            for (int v = 0; v < 29; ++v) {
                REQUIRE(before(t, v) == after(t, v));  // bit-exact
            }
        }
    }
}

TEST_CASE("sequence log prob: uniform model gives L * ln(1/V)") {
    auto config = tiny_config(10);
    config.n_layers = 1;
    GptModel<double> model(config, ModelParams<double>::shaped(config));  // all-zero weights
    const double lp = model.sequence_log_prob({2, 5, 6, 7}, {});          // BOS + 3 tokens
    CHECK(lp == doctest::Approx(3.0 * std::log(0.1)).epsilon(1e-9));

    // single conditioned token: one term
    const double lp1 = model.sequence_log_prob({2, 5}, {});
    CHECK(lp1 == doctest::Approx(std::log(0.1)).epsilon(1e-9));
}

TEST_CASE("sequence log prob is negative and refuses bad lengths") {
    GptModel<float> model(tiny_config(23), 13);
    CHECK(model.sequence_log_prob({1, 2, 3}, {}) < 0.0);
    CHECK_THROWS_AS(model.sequence_log_prob({1}, {}), std::invalid_argument);
    CHECK_THROWS_AS(model.sequence_log_prob(std::vector<int>(13, 1), {}),
                    std::invalid_argument);
}

TEST_CASE("loss: uniform-logit model scores ln V") {
    auto config = tiny_config(23);
    GptModel<float> model(config, ModelParams<float>::shaped(config));
    auto grads = ModelParams<float>::shaped(config);
    const auto stats = model.loss_and_gradients({{2, 5, 6}, {2, 7, 8, 9}}, {}, grads, nullptr);
    CHECK(stats.mean() == doctest::Approx(std::log(23.0)).epsilon(1e-6));
    CHECK(stats.n_targets == 5);
}

TEST_CASE("loss contract violations") {
    GptModel<float> model(tiny_config(23), 13);
    auto grads = ModelParams<float>::shaped(tiny_config(23));
    CHECK_THROWS_AS(model.loss_and_gradients({}, {}, grads, nullptr), std::invalid_argument);
    CHECK_THROWS_AS(model.loss_and_gradients({{1}}, {}, grads, nullptr), std::invalid_argument);
}

TEST_CASE("batch of identical sequences matches the single-sequence gradients") {
    const auto config = tiny_config(23);
    GptModel<float> model(config, 21);
    const std::vector<int> row{2, 5, 6, 7, 8};

    auto grads_single = ModelParams<float>::shaped(config);
    model.loss_and_gradients({row}, {}, grads_single, nullptr);
    auto grads_batch = ModelParams<float>::shaped(config);
    model.loss_and_gradients({row, row, row}, {}, grads_batch, nullptr);

    auto a = grads_single.tensor_refs();
    auto b = grads_batch.tensor_refs();
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (Eigen::Index k = 0; k < a[i].size(); ++k) {
            CHECK(a[i].data[k] == doctest::Approx(b[i].data[k]).epsilon(1e-5));
        }
    }
}

TEST_CASE("pad positions are excluded from the loss") {
    const auto config = tiny_config(23);
    GptModel<float> model(config, 21);
    auto grads_a = ModelParams<float>::shaped(config);
    const auto plain = model.loss_and_gradients({{2, 5, 6, 7}}, {}, grads_a, nullptr);
    auto grads_b = ModelParams<float>::shaped(config);
    const auto padded = model.loss_and_gradients({{2, 5, 6, 7, 0, 0, 0}}, {}, grads_b, nullptr,
                                                 /*pad_id=*/0);
    CHECK(plain.n_targets == padded.n_targets);
    CHECK(plain.ce_sum == doctest::Approx(padded.ce_sum).epsilon(1e-12));
}

TEST_CASE("same seed and config give bit-identical weights and first loss") {
    const auto config = tiny_config(31);
    GptModel<float> a(config, 42);
    GptModel<float> b(config, 42);
    auto ra = a.params().tensor_refs();
    auto rb = b.params().tensor_refs();
    for (std::size_t i = 0; i < ra.size(); ++i) {
        for (Eigen::Index k = 0; k < ra[i].size(); ++k) {
            REQUIRE(ra[i].data[k] == rb[i].data[k]);
        }
    }
    auto grads = ModelParams<float>::shaped(config);
    const auto loss_a = a.loss_and_gradients({{1, 2, 3, 4}}, {}, grads, nullptr);
    const auto loss_b = b.loss_and_gradients({{1, 2, 3, 4}}, {}, grads, nullptr);
    CHECK(loss_a.ce_sum == loss_b.ce_sum);
}

TEST_CASE("sentence embeddings: shape, pooling, and positional sensitivity") {
    auto config = tiny_config(23);
    GptModel<float> model(config, 31);
    const auto emb = model.sentence_embedding({2, 10, 11, 3}, {1.0, 0.5}, 4);
    CHECK(emb.size() == config.d_model);

    // mean over a single content token equals last-pooling over it
    auto last_config = config;
    last_config.pooling = PoolKind::last;
    GptModel<float> last_model(last_config, ModelParams<float>(model.params()));
    const std::vector<int> one_content{2, 9, 3};
    const auto mean_emb = model.sentence_embedding(one_content, {}, 4);
    const auto last_emb = last_model.sentence_embedding(one_content, {}, 4);
    CHECK((mean_emb - last_emb).cwiseAbs().maxCoeff() == 0.0);

    // swapping two content tokens moves the embedding under a bias
    const auto fwd = model.sentence_embedding({2, 10, 11, 3}, {1.0, 0.5}, 4);
    const auto rev = model.sentence_embedding({2, 11, 10, 3}, {1.0, 0.5}, 4);
    CHECK((fwd - rev).norm() > 1e-6);

    CHECK_THROWS_AS(model.sentence_embedding({2, 3}, {}, 4), std::invalid_argument);
}

TEST_CASE("checkpoint container round-trips weights and metadata") {
    TempDir dir("ckpt");
    const auto config = tiny_config(23);
    GptModel<float> model(config, 77);
    CheckpointMeta meta;
    meta.config = config;
    meta.epoch = 7;
    meta.slope_at_save = 0.2176782336;
    meta.bias_active = true;
    meta.uniform_slope = false;
    meta.rng_state = "13 37";
    const auto path = dir.path / "model.ckpt";
    save_checkpoint(path, meta, model.params());

    const auto loaded = load_checkpoint(path);
    CHECK(loaded.meta.epoch == 7);
    CHECK(loaded.meta.slope_at_save == doctest::Approx(0.2176782336));
    CHECK(loaded.meta.bias_active);
    CHECK(loaded.meta.rng_state == "13 37");
    CHECK(loaded.meta.config.d_model == config.d_model);

    auto orig = model.params().tensor_refs();
    auto back = loaded.params.tensor_refs();
    REQUIRE(orig.size() == back.size());
    for (std::size_t i = 0; i < orig.size(); ++i) {
        REQUIRE(orig[i].name == back[i].name);
        for (Eigen::Index k = 0; k < orig[i].size(); ++k) {
            REQUIRE(orig[i].data[k] == back[i].data[k]);
        }
    }

    const auto slopes = checkpoint_slopes(loaded.meta);
    REQUIRE(slopes.size() == 2);
    CHECK(slopes[0] == doctest::Approx(0.2176782336));

    // magic check
    CHECK_THROWS_AS(load_checkpoint(dir.path / "missing.ckpt"), IoError);
    write_text_file(dir.path / "junk.ckpt", "NOTCPLM banana");
    CHECK_THROWS_AS(load_checkpoint(dir.path / "junk.ckpt"), DataError);
}

TEST_CASE("checkpoint file starts with the CPLM1 magic at byte 0") {
    TempDir dir("magic");
    const auto config = tiny_config(23);
    GptModel<float> model(config, 1);
    CheckpointMeta meta;
    meta.config = config;
    save_checkpoint(dir.path / "m.ckpt", meta, model.params());
    const auto bytes = read_text_file(dir.path / "m.ckpt");
    REQUIRE(bytes.size() > 5);
    CHECK(bytes.substr(0, 5) == "CPLM1");
}

TEST_CASE("untied output head has its own tensor") {
    auto config = tiny_config(23);
    config.tied_embeddings = false;
    GptModel<float> model(config, 3);
    bool found = false;
    for (const auto& ref : model.params().tensor_refs()) {
        if (ref.name == "lm_head") found = true;
    }
    CHECK(found);
    CHECK(model.forward({1, 2, 3}, {}).allFinite());
}

}  // TEST_SUITE
