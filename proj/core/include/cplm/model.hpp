#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cplm/attention_bias.hpp"
#include "cplm/rng.hpp"
#include "cplm/scorer.hpp"

namespace cplm {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

enum class PositionalKind { learned, none };
enum class PoolKind { mean, last };

const char* to_string(PositionalKind kind);
PositionalKind positional_from_string(const std::string& name);
const char* to_string(PoolKind kind);
PoolKind pool_from_string(const std::string& name);

struct ModelConfig {
    int n_layers = 4;
    int n_heads = 4;
    int d_model = 256;
    int d_ff = 0;  ///< 0 means 4 * d_model
    int vocab_size = 0;
    int max_seq_len = 32;
    double dropout = 0.1;
    PositionalKind positional = PositionalKind::none;
    bool tied_embeddings = true;
    PoolKind pooling = PoolKind::mean;

    int resolved_d_ff() const { return d_ff > 0 ? d_ff : 4 * d_model; }
    int d_head() const { return d_model / n_heads; }

    std::vector<std::string> validation_errors() const;
    void validate() const;
};

template <typename Scalar>
struct TensorRef {
    std::string name;
    Scalar* data;
    Eigen::Index rows;
    Eigen::Index cols;
    Eigen::Index size() const { return rows * cols; }
};

template <typename Scalar>
struct LayerNormParams {
    Vec<Scalar> gamma, beta;
};

template <typename Scalar>
struct AttentionParams {
    Mat<Scalar> wq, wk, wv, wo;  // d x d
    Vec<Scalar> bq, bk, bv, bo;
};

template <typename Scalar>
struct MlpParams {
    Mat<Scalar> w1;  // d x d_ff
    Mat<Scalar> w2;  // d_ff x d
    Vec<Scalar> b1, b2;
};

template <typename Scalar>
struct BlockParams {
    LayerNormParams<Scalar> ln1;
    AttentionParams<Scalar> attn;
    LayerNormParams<Scalar> ln2;
    MlpParams<Scalar> mlp;
};

/// All trainable tensors. `tensor_refs` enumerates them in a fixed order that
/// doubles as the checkpoint manifest order and the optimizer update order.
template <typename Scalar>
struct ModelParams {
    Mat<Scalar> tok_emb;  // vocab x d
    Mat<Scalar> pos_emb;  // max_seq_len x d, 0x0 when positions are not learned
    std::vector<BlockParams<Scalar>> blocks;
    LayerNormParams<Scalar> ln_f;
    Mat<Scalar> lm_head;  // vocab x d, 0x0 when tied to tok_emb

    static ModelParams shaped(const ModelConfig& config);

    std::vector<TensorRef<Scalar>> tensor_refs();
    std::vector<TensorRef<const Scalar>> tensor_refs() const;
    void set_zero();
    Eigen::Index total_size() const;
    bool all_finite() const;
};

ModelParams<float> to_float(const ModelParams<double>& params);
ModelParams<double> to_double(const ModelParams<float>& params);

/// Decoder-only transformer with optional additive attention bias.
///
/// Pre-norm blocks, GELU MLP of width d_ff, scores scaled by 1/sqrt(d_head)
/// before the per-head slope * distance penalty is added, causal masking
/// throughout. `slopes` carries one effective slope per head; an empty vector
/// disables the bias term entirely (the learned-positions path).
///
/// Inference entry points are const and safe to call concurrently; training
/// (gradient accumulation, parameter updates) is single-writer.
template <typename Scalar>
class GptModel : public SequenceScorer {
public:
    GptModel(ModelConfig config, std::uint64_t seed);
    GptModel(ModelConfig config, ModelParams<Scalar> params);

    const ModelConfig& config() const { return config_; }
    ModelParams<Scalar>& params() { return params_; }
    const ModelParams<Scalar>& params() const { return params_; }

    /// Logits for every position, shape L x vocab. Inference mode.
    Mat<Scalar> forward(const std::vector<int>& ids, const std::vector<double>& slopes) const;

    /// Natural-log sequence probability, summed from position 1 (ids[0] is
    /// conditioned on, typically BOS). Requires 2 <= L <= max_seq_len; longer
    /// inputs raise rather than truncate.
    double sequence_log_prob(const std::vector<int>& ids,
                             const std::vector<double>& slopes) const;

    struct BatchStats {
        double ce_sum = 0.0;       ///< summed next-token cross-entropy
        std::size_t n_targets = 0; ///< target positions contributing to it
        double mean() const;
    };

    /// Mean next-token cross-entropy over the batch plus gradients of that
    /// mean for every trainable tensor (written into `grads`, which is
    /// zeroed first). Dropout is active iff `dropout_rng` is non-null.
    BatchStats loss_and_gradients(const std::vector<std::vector<int>>& batch,
                                  const std::vector<double>& slopes,
                                  ModelParams<Scalar>& grads, Rng* dropout_rng,
                                  int pad_id = -1, const std::string& batch_label = {}) const;

    /// Adds unnormalized (summed) gradients into `grads` without zeroing or
    /// scaling; building block for gradient accumulation across micro-batches.
    BatchStats accumulate_loss_gradients(const std::vector<std::vector<int>>& batch,
                                         const std::vector<double>& slopes,
                                         ModelParams<Scalar>& grads, Rng* dropout_rng,
                                         int pad_id = -1,
                                         const std::string& batch_label = {}) const;

    /// Summed cross-entropy without gradients (validation perplexity path).
    BatchStats evaluate_loss(const std::vector<std::vector<int>>& batch,
                             const std::vector<double>& slopes, int pad_id = -1) const;

    /// Pooled final-layer hidden state over content positions (ids >=
    /// n_reserved_ids). Pooling per config: mean (default) or last.
    Eigen::VectorXd sentence_embedding(const std::vector<int>& ids,
                                       const std::vector<double>& slopes,
                                       int n_reserved_ids) const;

    // SequenceScorer with the slopes fixed via bind_slopes().
    double sequence_log_prob(const std::vector<int>& ids) const override;
    int max_input_length() const override { return config_.max_seq_len; }
    void bind_slopes(std::vector<double> slopes) { bound_slopes_ = std::move(slopes); }
    const std::vector<double>& bound_slopes() const { return bound_slopes_; }

private:
    struct Workspace;

    void check_input(const std::vector<int>& ids, const std::vector<double>& slopes) const;
    Mat<Scalar> run_forward(const std::vector<int>& ids, const std::vector<double>& slopes,
                            Rng* dropout_rng, Workspace* cache) const;
    void run_backward(const std::vector<int>& ids, const Mat<Scalar>& dlogits,
                      const std::vector<double>& slopes, const Workspace& cache,
                      ModelParams<Scalar>& grads) const;

    ModelConfig config_;
    ModelParams<Scalar> params_;
    BiasMatrix bias_;
    std::vector<double> bound_slopes_;
};

extern template class GptModel<float>;
extern template class GptModel<double>;
extern template struct ModelParams<float>;
extern template struct ModelParams<double>;

// ---------------------------------------------------------------------------
// Checkpoints: "CPLM1" magic, little-endian uint32 header length, JSON header
// (config, epoch, slope, parameter manifest with shapes and byte offsets),
// then raw little-endian float32 payload in manifest order.
// ---------------------------------------------------------------------------

struct CheckpointMeta {
    ModelConfig config;
    int epoch = 0;              ///< completed epochs at save time
    double slope_at_save = 0.0; ///< schedule value at the save boundary
    bool bias_active = false;
    bool uniform_slope = false;
    std::string rng_state;      ///< opaque trainer RNG state
};

struct Checkpoint {
    CheckpointMeta meta;
    ModelParams<float> params;
};

void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta,
                     const ModelParams<float>& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Effective per-head slopes this checkpoint should be scored with
/// (empty when the bias was never active).
std::vector<double> checkpoint_slopes(const CheckpointMeta& meta);

}  // namespace cplm
