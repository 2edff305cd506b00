#include <benchmark/benchmark.h>

#include "cplm/analysis.hpp"
#include "cplm/attention_bias.hpp"
#include "cplm/model.hpp"
#include "cplm/rng.hpp"
#include "cplm/synthetic.hpp"
#include "cplm/tokenizer.hpp"

namespace {

cplm::ModelConfig bench_config(int d_model, int n_layers) {
    cplm::ModelConfig config;
    config.n_layers = n_layers;
    config.n_heads = 4;
    config.d_model = d_model;
    config.vocab_size = 2048;
    config.max_seq_len = 32;
    config.dropout = 0.1;
    config.positional = cplm::PositionalKind::none;
    return config;
}

std::vector<int> bench_ids(int length) {
    cplm::Rng rng(1);
    std::vector<int> ids(static_cast<std::size_t>(length));
    for (auto& id : ids) {
        id = static_cast<int>(rng.uniform_int(4, 2047));
    }
    return ids;
}

void BM_BiasMatrix(benchmark::State& state) {
    for (auto _ : state) {
        auto bias = cplm::bias_matrix(static_cast<int>(state.range(0)));
        benchmark::DoNotOptimize(bias.penalties.data());
    }
}
BENCHMARK(BM_BiasMatrix)->Arg(32)->Arg(128)->Arg(512);

void BM_Forward(benchmark::State& state) {
    const auto config = bench_config(static_cast<int>(state.range(0)), 2);
    cplm::GptModel<float> model(config, 7);
    const auto slopes = cplm::effective_slopes(cplm::head_slopes(4), 0.5, false);
    const auto ids = bench_ids(32);
    for (auto _ : state) {
        auto logits = model.forward(ids, slopes);
        benchmark::DoNotOptimize(logits.data());
    }
    state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_Forward)->Arg(64)->Arg(128)->Arg(256);

void BM_LossAndGradients(benchmark::State& state) {
    const auto config = bench_config(static_cast<int>(state.range(0)), 2);
    cplm::GptModel<float> model(config, 7);
    const auto slopes = cplm::effective_slopes(cplm::head_slopes(4), 0.5, false);
    std::vector<std::vector<int>> batch;
    for (int row = 0; row < 8; ++row) {
        batch.push_back(bench_ids(24));
    }
    auto grads = cplm::ModelParams<float>::shaped(config);
    cplm::Rng dropout(3);
    for (auto _ : state) {
        auto stats = model.loss_and_gradients(batch, slopes, grads, &dropout);
        benchmark::DoNotOptimize(stats.ce_sum);
    }
    state.SetItemsProcessed(state.iterations() * 8 * 24);
}
BENCHMARK(BM_LossAndGradients)->Arg(64)->Arg(128);

void BM_TokenizerEncode(benchmark::State& state) {
    const auto corpus = cplm::synthetic_corpus(3, 2000);
    const auto tok = cplm::Tokenizer::train(corpus, 2048, cplm::TokenizerMode::word);
    const std::string sentence = corpus.sentence_text(17);
    for (auto _ : state) {
        auto ids = tok.encode(sentence, true, true);
        benchmark::DoNotOptimize(ids.data());
    }
}
BENCHMARK(BM_TokenizerEncode);

void BM_HistogramEntropy(benchmark::State& state) {
    cplm::Rng rng(5);
    Eigen::MatrixXd points(state.range(0), 2);
    for (Eigen::Index i = 0; i < points.size(); ++i) {
        points.data()[i] = rng.normal();
    }
    for (auto _ : state) {
        benchmark::DoNotOptimize(cplm::histogram_entropy(points, 50));
    }
}
BENCHMARK(BM_HistogramEntropy)->Arg(1000)->Arg(10000);

void BM_PcaProjection(benchmark::State& state) {
    cplm::Rng rng(6);
    Eigen::MatrixXd vectors(state.range(0), 64);
    for (Eigen::Index i = 0; i < vectors.size(); ++i) {
        vectors.data()[i] = rng.normal();
    }
    for (auto _ : state) {
        auto projected = cplm::project_2d(vectors, cplm::ProjectionMethod::pca, 0);
        benchmark::DoNotOptimize(projected.data());
    }
}
BENCHMARK(BM_PcaProjection)->Arg(256)->Arg(1024);

}  // namespace

BENCHMARK_MAIN();
