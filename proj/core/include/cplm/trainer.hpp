#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cplm/attention_bias.hpp"
#include "cplm/corpus.hpp"
#include "cplm/model.hpp"
#include "cplm/tokenizer.hpp"

namespace cplm {

struct TrainConfig {
    double lr = 5e-6;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int batch_size = 512;
    int grad_accum_steps = 2;
    int total_epochs = 10;
    double warmup_fraction = 0.1;
    int n_restarts = 1;  ///< cosine cycles after warmup; 1 = plain cosine
    int early_stop_tolerance_epochs = 1;
    double eval_split_fraction = 0.05;
    std::vector<std::uint64_t> seeds{0, 1, 2};

    std::vector<std::string> validation_errors() const;
    void validate() const;
};

struct EpochRecord {
    int epoch = 0;  ///< 1-based completed-epoch count
    double train_loss = 0.0;
    double val_ppl = 0.0;
    double m = 0.0;  ///< schedule slope in effect during this epoch
    double w = 1.0;
    double lr = 0.0;  ///< learning rate at the epoch's last optimizer step
    std::string ckpt; ///< checkpoint path relative to the run directory
};

struct TrainRunRecord {
    std::vector<EpochRecord> epochs;
    bool stopped_early = false;
    std::uint64_t seed = 0;
    std::filesystem::path run_dir;
    std::filesystem::path records_path;  ///< JSON-lines file, one record per epoch
};

/// Learning rate at optimizer step `step` of `total_steps`: linear warmup from
/// 0 over the first ceil(warmup_fraction * total_steps) steps, then
/// cosine-with-restarts decay to 0 (n_restarts cycles).
double lr_at_step(const TrainConfig& config, long step, long total_steps);

/// exp(mean next-token cross-entropy) of the model over a held-out corpus,
/// natural base. Rows are BOS + sentence + EOS, truncated to max_seq_len.
double perplexity(const GptModel<float>& model, const std::vector<double>& slopes,
                  const Corpus& held_out, const Tokenizer& tokenizer);

/// Deterministic 5%-style split by sentence-text hash: returns (train, val).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_train_val(
    const Corpus& corpus, double val_fraction);

/// Runs one seeded training run: AdamW with decoupled weight decay, gradient
/// accumulation, per-epoch schedule updates (slopes recomputed before each
/// epoch), a checkpoint per epoch, and early stopping on validation
/// perplexity. Checkpoints and the record file are written under `run_dir`.
TrainRunRecord train_model(const ModelConfig& model_config, const ScheduleSpec& schedule,
                           const Corpus& corpus, const Tokenizer& tokenizer,
                           const TrainConfig& train_config, std::uint64_t seed,
                           const std::filesystem::path& run_dir);

/// AdamW with decoupled weight decay over a parameter set.
template <typename Scalar>
class AdamW {
public:
    AdamW(const ModelConfig& config, double beta1, double beta2, double eps, double weight_decay);

    /// One update with the given learning rate; `grads` must hold gradients of
    /// the mean loss in the same tensor layout as `params`.
    void step(ModelParams<Scalar>& params, const ModelParams<Scalar>& grads, double lr);

private:
    ModelParams<Scalar> m_, v_;
    double beta1_, beta2_, eps_, weight_decay_;
    long t_ = 0;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace cplm
