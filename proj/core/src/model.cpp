#include "cplm/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "cplm/errors.hpp"
#include "serialize.hpp"

namespace cplm {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;
constexpr double kInitStd = 0.02;

template <typename Scalar>
Scalar gelu(Scalar x) {
    const Scalar u = Scalar(kGeluC) * (x + Scalar(kGeluCubic) * x * x * x);
    return Scalar(0.5) * x * (Scalar(1) + std::tanh(u));
}

template <typename Scalar>
Scalar gelu_grad(Scalar x) {
    const Scalar u = Scalar(kGeluC) * (x + Scalar(kGeluCubic) * x * x * x);
    const Scalar t = std::tanh(u);
    const Scalar du = Scalar(kGeluC) * (Scalar(1) + Scalar(3) * Scalar(kGeluCubic) * x * x);
    return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x * (Scalar(1) - t * t) * du;
}

}  // namespace

const char* to_string(PositionalKind kind) {
    return kind == PositionalKind::learned ? "learned" : "none";
}

PositionalKind positional_from_string(const std::string& name) {
    if (name == "learned") return PositionalKind::learned;
    if (name == "none") return PositionalKind::none;
    throw ConfigError("unknown positional kind '" + name + "' (expected learned|none)");
}

const char* to_string(PoolKind kind) { return kind == PoolKind::mean ? "mean" : "last"; }

PoolKind pool_from_string(const std::string& name) {
    if (name == "mean") return PoolKind::mean;
    if (name == "last") return PoolKind::last;
    throw ConfigError("unknown pooling kind '" + name + "' (expected mean|last)");
}

std::vector<std::string> ModelConfig::validation_errors() const {
    std::vector<std::string> errors;
    if (n_layers < 1) errors.push_back("n_layers must be >= 1");
    if (n_heads < 1) errors.push_back("n_heads must be >= 1");
    if (d_model < 1) errors.push_back("d_model must be >= 1");
    if (n_heads >= 1 && d_model >= 1 && d_model % n_heads != 0) {
        errors.push_back("d_model must be divisible by n_heads");
    }
    if (d_ff < 0) errors.push_back("d_ff must be >= 0 (0 selects 4*d_model)");
    if (vocab_size < 1) errors.push_back("vocab_size must be >= 1");
    if (max_seq_len < 2) errors.push_back("max_seq_len must be >= 2");
    if (!(dropout >= 0.0 && dropout < 1.0)) errors.push_back("dropout must lie in [0,1)");
    return errors;
}

void ModelConfig::validate() const {
    const auto errors = validation_errors();
    if (errors.empty()) return;
    std::string joined = "invalid model config:";
    for (const auto& e : errors) joined += " " + e + ";";
    throw ConfigError(joined);
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename Scalar>
ModelParams<Scalar> ModelParams<Scalar>::shaped(const ModelConfig& config) {
    config.validate();
    const int d = config.d_model;
    const int f = config.resolved_d_ff();
    ModelParams<Scalar> p;
    p.tok_emb = Mat<Scalar>::Zero(config.vocab_size, d);
    if (config.positional == PositionalKind::learned) {
        p.pos_emb = Mat<Scalar>::Zero(config.max_seq_len, d);
    }
    p.blocks.resize(static_cast<std::size_t>(config.n_layers));
    for (auto& block : p.blocks) {
        block.ln1.gamma = Vec<Scalar>::Zero(d);
        block.ln1.beta = Vec<Scalar>::Zero(d);
        block.attn.wq = Mat<Scalar>::Zero(d, d);
        block.attn.wk = Mat<Scalar>::Zero(d, d);
        block.attn.wv = Mat<Scalar>::Zero(d, d);
        block.attn.wo = Mat<Scalar>::Zero(d, d);
        block.attn.bq = Vec<Scalar>::Zero(d);
        block.attn.bk = Vec<Scalar>::Zero(d);
        block.attn.bv = Vec<Scalar>::Zero(d);
        block.attn.bo = Vec<Scalar>::Zero(d);
        block.ln2.gamma = Vec<Scalar>::Zero(d);
        block.ln2.beta = Vec<Scalar>::Zero(d);
        block.mlp.w1 = Mat<Scalar>::Zero(d, f);
        block.mlp.w2 = Mat<Scalar>::Zero(f, d);
        block.mlp.b1 = Vec<Scalar>::Zero(f);
        block.mlp.b2 = Vec<Scalar>::Zero(d);
    }
    p.ln_f.gamma = Vec<Scalar>::Zero(d);
    p.ln_f.beta = Vec<Scalar>::Zero(d);
    if (!config.tied_embeddings) {
        p.lm_head = Mat<Scalar>::Zero(config.vocab_size, d);
    }
    return p;
}

namespace {
template <typename Scalar, typename Params, typename RefScalar>
std::vector<TensorRef<RefScalar>> make_refs(Params& p) {
    std::vector<TensorRef<RefScalar>> refs;
    auto add = [&refs](const std::string& name, auto& tensor) {
        if (tensor.size() == 0) return;
        refs.push_back({name, tensor.data(), tensor.rows(), tensor.cols()});
    };
    add("tok_emb", p.tok_emb);
    add("pos_emb", p.pos_emb);
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        const std::string prefix = "blocks." + std::to_string(i) + ".";
        auto& b = p.blocks[i];
        add(prefix + "ln1.gamma", b.ln1.gamma);
        add(prefix + "ln1.beta", b.ln1.beta);
        add(prefix + "attn.wq", b.attn.wq);
        add(prefix + "attn.bq", b.attn.bq);
        add(prefix + "attn.wk", b.attn.wk);
        add(prefix + "attn.bk", b.attn.bk);
        add(prefix + "attn.wv", b.attn.wv);
        add(prefix + "attn.bv", b.attn.bv);
        add(prefix + "attn.wo", b.attn.wo);
        add(prefix + "attn.bo", b.attn.bo);
        add(prefix + "ln2.gamma", b.ln2.gamma);
        add(prefix + "ln2.beta", b.ln2.beta);
        add(prefix + "mlp.w1", b.mlp.w1);
        add(prefix + "mlp.b1", b.mlp.b1);
        add(prefix + "mlp.w2", b.mlp.w2);
        add(prefix + "mlp.b2", b.mlp.b2);
    }
    add("ln_f.gamma", p.ln_f.gamma);
    add("ln_f.beta", p.ln_f.beta);
    add("lm_head", p.lm_head);
    return refs;
}
}  // namespace

template <typename Scalar>
std::vector<TensorRef<Scalar>> ModelParams<Scalar>::tensor_refs() {
    return make_refs<Scalar, ModelParams<Scalar>, Scalar>(*this);
}

template <typename Scalar>
std::vector<TensorRef<const Scalar>> ModelParams<Scalar>::tensor_refs() const {
    return make_refs<Scalar, const ModelParams<Scalar>, const Scalar>(*this);
}

template <typename Scalar>
void ModelParams<Scalar>::set_zero() {
    for (auto& ref : tensor_refs()) {
        std::fill(ref.data, ref.data + ref.size(), Scalar(0));
    }
}

template <typename Scalar>
Eigen::Index ModelParams<Scalar>::total_size() const {
    Eigen::Index total = 0;
    for (const auto& ref : tensor_refs()) total += ref.size();
    return total;
}

template <typename Scalar>
bool ModelParams<Scalar>::all_finite() const {
    for (const auto& ref : tensor_refs()) {
        for (Eigen::Index i = 0; i < ref.size(); ++i) {
            if (!std::isfinite(static_cast<double>(ref.data[i]))) return false;
        }
    }
    return true;
}

ModelParams<float> to_float(const ModelParams<double>& params) {
    ModelParams<float> out;
    out.tok_emb = params.tok_emb.cast<float>();
    out.pos_emb = params.pos_emb.cast<float>();
    out.blocks.resize(params.blocks.size());
    out.ln_f.gamma = params.ln_f.gamma.cast<float>();
    out.ln_f.beta = params.ln_f.beta.cast<float>();
    out.lm_head = params.lm_head.cast<float>();
    for (std::size_t i = 0; i < params.blocks.size(); ++i) {
        const auto& b = params.blocks[i];
        auto& o = out.blocks[i];
        o.ln1 = {b.ln1.gamma.cast<float>(), b.ln1.beta.cast<float>()};
        o.attn = {b.attn.wq.cast<float>(), b.attn.wk.cast<float>(), b.attn.wv.cast<float>(),
                  b.attn.wo.cast<float>(), b.attn.bq.cast<float>(), b.attn.bk.cast<float>(),
                  b.attn.bv.cast<float>(), b.attn.bo.cast<float>()};
        o.ln2 = {b.ln2.gamma.cast<float>(), b.ln2.beta.cast<float>()};
        o.mlp = {b.mlp.w1.cast<float>(), b.mlp.w2.cast<float>(), b.mlp.b1.cast<float>(),
                 b.mlp.b2.cast<float>()};
    }
    return out;
}

ModelParams<double> to_double(const ModelParams<float>& params) {
    ModelParams<double> out;
    out.tok_emb = params.tok_emb.cast<double>();
    out.pos_emb = params.pos_emb.cast<double>();
    out.blocks.resize(params.blocks.size());
    out.ln_f.gamma = params.ln_f.gamma.cast<double>();
    out.ln_f.beta = params.ln_f.beta.cast<double>();
    out.lm_head = params.lm_head.cast<double>();
    for (std::size_t i = 0; i < params.blocks.size(); ++i) {
        const auto& b = params.blocks[i];
        auto& o = out.blocks[i];
        o.ln1 = {b.ln1.gamma.cast<double>(), b.ln1.beta.cast<double>()};
        o.attn = {b.attn.wq.cast<double>(), b.attn.wk.cast<double>(), b.attn.wv.cast<double>(),
                  b.attn.wo.cast<double>(), b.attn.bq.cast<double>(), b.attn.bk.cast<double>(),
                  b.attn.bv.cast<double>(), b.attn.bo.cast<double>()};
        o.ln2 = {b.ln2.gamma.cast<double>(), b.ln2.beta.cast<double>()};
        o.mlp = {b.mlp.w1.cast<double>(), b.mlp.w2.cast<double>(), b.mlp.b1.cast<double>(),
                 b.mlp.b2.cast<double>()};
    }
    return out;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <typename Scalar>
struct GptModel<Scalar>::Workspace {
    struct Layer {
        Mat<Scalar> x_in, ln1_xhat;
        Vec<Scalar> ln1_inv_std;
        Mat<Scalar> q, k, v;
        std::vector<Mat<Scalar>> probs;      // per head, post-dropout scaling
        std::vector<Mat<Scalar>> attn_mask;  // dropout scale factors, empty in eval
        Mat<Scalar> heads;                   // concatenated head outputs
        Mat<Scalar> resid1_mask;
        Mat<Scalar> x_mid, ln2_xhat;
        Vec<Scalar> ln2_inv_std;
        Mat<Scalar> mlp_pre, mlp_act;
        Mat<Scalar> resid2_mask;
    };
    std::vector<Layer> layers;
    Mat<Scalar> lnf_xhat;
    Vec<Scalar> lnf_inv_std;
    Mat<Scalar> h_final;
};

namespace {

template <typename Scalar>
void layer_norm_forward(const Mat<Scalar>& x, const Vec<Scalar>& gamma, const Vec<Scalar>& beta,
                        Mat<Scalar>& xhat, Vec<Scalar>& inv_std, Mat<Scalar>& y) {
    const Eigen::Index rows = x.rows();
    const Eigen::Index d = x.cols();
    xhat.resize(rows, d);
    y.resize(rows, d);
    inv_std.resize(rows);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const Scalar mu = x.row(i).mean();
        Vec<Scalar> centered = (x.row(i).array() - mu).matrix().transpose();
        const Scalar var = centered.squaredNorm() / Scalar(d);
        const Scalar inv = Scalar(1) / std::sqrt(var + Scalar(kLayerNormEps));
        inv_std(i) = inv;
        xhat.row(i) = (centered * inv).transpose();
        y.row(i) = (xhat.row(i).transpose().array() * gamma.array() + beta.array()).transpose();
    }
}

template <typename Scalar>
void layer_norm_backward(const Mat<Scalar>& dy, const Mat<Scalar>& xhat,
                         const Vec<Scalar>& inv_std, const Vec<Scalar>& gamma, Mat<Scalar>& dx,
                         Vec<Scalar>& dgamma, Vec<Scalar>& dbeta) {
    const Eigen::Index rows = dy.rows();
    const Eigen::Index d = dy.cols();
    dx.resize(rows, d);
    for (Eigen::Index i = 0; i < rows; ++i) {
        dgamma.array() += dy.row(i).transpose().array() * xhat.row(i).transpose().array();
        dbeta += dy.row(i).transpose();
        Vec<Scalar> g = (dy.row(i).transpose().array() * gamma.array()).matrix();
        const Scalar mean_g = g.mean();
        const Scalar mean_gx = (g.array() * xhat.row(i).transpose().array()).mean();
        dx.row(i) = (inv_std(i) *
                     (g.array() - mean_g - xhat.row(i).transpose().array() * mean_gx))
                        .transpose();
    }
}

/// Inverted-dropout scale mask: entries are 0 or 1/(1-p).
template <typename Scalar>
Mat<Scalar> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
    Mat<Scalar> mask(rows, cols);
    const Scalar keep_scale = Scalar(1.0 / (1.0 - p));
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
            mask(i, j) = (rng.uniform() < p) ? Scalar(0) : keep_scale;
        }
    }
    return mask;
}

}  // namespace

template <typename Scalar>
GptModel<Scalar>::GptModel(ModelConfig config, std::uint64_t seed)
    : config_(config), params_(ModelParams<Scalar>::shaped(config)),
      bias_(bias_matrix(config.max_seq_len)) {
    Rng rng(seed);
    for (auto& ref : params_.tensor_refs()) {
        const bool is_gain = ref.name.find("gamma") != std::string::npos;
        const bool is_zero = ref.name.find("beta") != std::string::npos ||
                             ref.name.find("attn.b") != std::string::npos ||
                             ref.name.find("mlp.b") != std::string::npos;
        if (is_gain) {
            std::fill(ref.data, ref.data + ref.size(), Scalar(1));
        } else if (is_zero) {
            std::fill(ref.data, ref.data + ref.size(), Scalar(0));
        } else {
            for (Eigen::Index i = 0; i < ref.size(); ++i) {
                ref.data[i] = static_cast<Scalar>(rng.normal(0.0, kInitStd));
            }
        }
    }
}

template <typename Scalar>
GptModel<Scalar>::GptModel(ModelConfig config, ModelParams<Scalar> params)
    : config_(config), params_(std::move(params)), bias_(bias_matrix(config.max_seq_len)) {
    config_.validate();
}

template <typename Scalar>
void GptModel<Scalar>::check_input(const std::vector<int>& ids,
                                   const std::vector<double>& slopes) const {
    if (ids.empty()) {
        throw std::invalid_argument("input sequence is empty");
    }
    if (static_cast<int>(ids.size()) > config_.max_seq_len) {
        throw std::invalid_argument("input length " + std::to_string(ids.size()) +
                                    " exceeds max_seq_len " +
                                    std::to_string(config_.max_seq_len));
    }
    for (int id : ids) {
        if (id < 0 || id >= config_.vocab_size) {
            throw std::out_of_range("token id " + std::to_string(id) +
                                    " outside vocabulary of " +
                                    std::to_string(config_.vocab_size));
        }
    }
    if (!slopes.empty()) {
        if (static_cast<int>(slopes.size()) != config_.n_heads) {
            throw std::invalid_argument("expected " + std::to_string(config_.n_heads) +
                                        " per-head slopes, got " +
                                        std::to_string(slopes.size()));
        }
        if (config_.positional == PositionalKind::learned) {
            throw std::invalid_argument(
                "attention bias and learned positional embeddings are mutually exclusive");
        }
    }
}

template <typename Scalar>
Mat<Scalar> GptModel<Scalar>::run_forward(const std::vector<int>& ids,
                                          const std::vector<double>& slopes, Rng* dropout_rng,
                                          Workspace* cache) const {
    check_input(ids, slopes);
    const Eigen::Index L = static_cast<Eigen::Index>(ids.size());
    const int d = config_.d_model;
    const int n_heads = config_.n_heads;
    const int dh = config_.d_head();
    const Scalar scale = Scalar(1.0 / std::sqrt(static_cast<double>(dh)));
    const bool train = dropout_rng != nullptr && config_.dropout > 0.0;
    const bool use_bias = !slopes.empty();

    Mat<Scalar> x(L, d);
    for (Eigen::Index t = 0; t < L; ++t) {
        x.row(t) = params_.tok_emb.row(ids[static_cast<std::size_t>(t)]);
        if (config_.positional == PositionalKind::learned) {
            x.row(t) += params_.pos_emb.row(t);
        }
    }

    if (cache) {
        cache->layers.resize(params_.blocks.size());
    }

    Mat<Scalar> a, xhat;
    Vec<Scalar> inv_std;
    for (std::size_t li = 0; li < params_.blocks.size(); ++li) {
        const auto& block = params_.blocks[li];
        typename Workspace::Layer* lc = cache ? &cache->layers[li] : nullptr;
        if (lc) lc->x_in = x;

        layer_norm_forward(x, block.ln1.gamma, block.ln1.beta, xhat, inv_std, a);
        if (lc) {
            lc->ln1_xhat = xhat;
            lc->ln1_inv_std = inv_std;
        }

        Mat<Scalar> q = (a * block.attn.wq).rowwise() + block.attn.bq.transpose();
        Mat<Scalar> k = (a * block.attn.wk).rowwise() + block.attn.bk.transpose();
        Mat<Scalar> v = (a * block.attn.wv).rowwise() + block.attn.bv.transpose();

        Mat<Scalar> heads = Mat<Scalar>::Zero(L, d);
        std::vector<Mat<Scalar>> probs_store;
        std::vector<Mat<Scalar>> mask_store;
        if (lc) {
            probs_store.resize(static_cast<std::size_t>(n_heads));
            if (train) mask_store.resize(static_cast<std::size_t>(n_heads));
        }

        for (int h = 0; h < n_heads; ++h) {
            const auto qh = q.middleCols(h * dh, dh);
            const auto kh = k.middleCols(h * dh, dh);
            const auto vh = v.middleCols(h * dh, dh);
            const Scalar slope = use_bias ? Scalar(slopes[static_cast<std::size_t>(h)]) : Scalar(0);

            Mat<Scalar> probs = Mat<Scalar>::Zero(L, L);
            for (Eigen::Index i = 0; i < L; ++i) {
                // causal window only; later positions never enter row i
                Eigen::Matrix<Scalar, 1, Eigen::Dynamic> scores =
                    (qh.row(i) * kh.topRows(i + 1).transpose()) * scale;
                if (use_bias) {
                    for (Eigen::Index j = 0; j <= i; ++j) {
                        scores(j) += slope * Scalar(bias_.penalties(i, j));
                    }
                }
                const Scalar max_score = scores.maxCoeff();
                Eigen::Matrix<Scalar, 1, Eigen::Dynamic> expd =
                    (scores.array() - max_score).exp();
                probs.row(i).head(i + 1) = expd / expd.sum();
            }

            Mat<Scalar> effective = probs;
            if (train) {
                Mat<Scalar> mask = Mat<Scalar>::Zero(L, L);
                for (Eigen::Index i = 0; i < L; ++i) {
                    for (Eigen::Index j = 0; j <= i; ++j) {
                        mask(i, j) = (dropout_rng->uniform() < config_.dropout)
                                         ? Scalar(0)
                                         : Scalar(1.0 / (1.0 - config_.dropout));
                    }
                }
                effective = probs.cwiseProduct(mask);
                if (lc) mask_store[static_cast<std::size_t>(h)] = std::move(mask);
            }
            heads.middleCols(h * dh, dh) = effective * vh;
            if (lc) probs_store[static_cast<std::size_t>(h)] = std::move(probs);
        }

        Mat<Scalar> proj = (heads * block.attn.wo).rowwise() + block.attn.bo.transpose();
        Mat<Scalar> resid1_mask;
        if (train) {
            resid1_mask = dropout_mask<Scalar>(L, d, config_.dropout, *dropout_rng);
            proj = proj.cwiseProduct(resid1_mask);
        }
        Mat<Scalar> x_mid = x + proj;

        if (lc) {
            lc->q = std::move(q);
            lc->k = std::move(k);
            lc->v = std::move(v);
            lc->probs = std::move(probs_store);
            lc->attn_mask = std::move(mask_store);
            lc->heads = std::move(heads);
            lc->resid1_mask = std::move(resid1_mask);
            lc->x_mid = x_mid;
        }

        Mat<Scalar> b_norm;
        layer_norm_forward(x_mid, block.ln2.gamma, block.ln2.beta, xhat, inv_std, b_norm);
        if (lc) {
            lc->ln2_xhat = xhat;
            lc->ln2_inv_std = inv_std;
        }

        Mat<Scalar> pre = (b_norm * block.mlp.w1).rowwise() + block.mlp.b1.transpose();
        Mat<Scalar> act = pre.unaryExpr([](Scalar t) { return gelu(t); });
        Mat<Scalar> out = (act * block.mlp.w2).rowwise() + block.mlp.b2.transpose();
        Mat<Scalar> resid2_mask;
        if (train) {
            resid2_mask = dropout_mask<Scalar>(L, d, config_.dropout, *dropout_rng);
            out = out.cwiseProduct(resid2_mask);
        }
        if (lc) {
            lc->mlp_pre = std::move(pre);
            lc->mlp_act = std::move(act);
            lc->resid2_mask = std::move(resid2_mask);
        }
        x = x_mid + out;
    }

    Mat<Scalar> h_final;
    layer_norm_forward(x, params_.ln_f.gamma, params_.ln_f.beta, xhat, inv_std, h_final);
    if (cache) {
        cache->lnf_xhat = xhat;
        cache->lnf_inv_std = inv_std;
        cache->h_final = h_final;
    }

    const Mat<Scalar>& output_emb = config_.tied_embeddings ? params_.tok_emb : params_.lm_head;
    return h_final * output_emb.transpose();
}

template <typename Scalar>
void GptModel<Scalar>::run_backward(const std::vector<int>& ids, const Mat<Scalar>& dlogits,
                                    const std::vector<double>& slopes, const Workspace& cache,
                                    ModelParams<Scalar>& grads) const {
    const Eigen::Index L = static_cast<Eigen::Index>(ids.size());
    const int d = config_.d_model;
    const int n_heads = config_.n_heads;
    const int dh = config_.d_head();
    const Scalar scale = Scalar(1.0 / std::sqrt(static_cast<double>(dh)));
    const bool train = !cache.layers.empty() && cache.layers[0].resid1_mask.size() > 0;
    const bool use_bias = !slopes.empty();
    (void)use_bias;  // bias term has no trainable parameters

    const Mat<Scalar>& output_emb = config_.tied_embeddings ? params_.tok_emb : params_.lm_head;
    Mat<Scalar>& d_output_emb = config_.tied_embeddings ? grads.tok_emb : grads.lm_head;

    Mat<Scalar> dh_final = dlogits * output_emb;
    d_output_emb.noalias() += dlogits.transpose() * cache.h_final;

    Mat<Scalar> dx;
    layer_norm_backward(dh_final, cache.lnf_xhat, cache.lnf_inv_std, params_.ln_f.gamma, dx,
                        grads.ln_f.gamma, grads.ln_f.beta);

    for (std::size_t li = params_.blocks.size(); li-- > 0;) {
        const auto& block = params_.blocks[li];
        auto& gblock = grads.blocks[li];
        const auto& lc = cache.layers[li];

        // MLP branch: x_out = x_mid + drop(act * w2 + b2)
        Mat<Scalar> dout = dx;
        if (train) dout = dout.cwiseProduct(lc.resid2_mask);
        gblock.mlp.b2 += dout.colwise().sum().transpose();
        gblock.mlp.w2.noalias() += lc.mlp_act.transpose() * dout;
        Mat<Scalar> dact = dout * block.mlp.w2.transpose();
        Mat<Scalar> dpre =
            dact.cwiseProduct(lc.mlp_pre.unaryExpr([](Scalar t) { return gelu_grad(t); }));
        gblock.mlp.b1 += dpre.colwise().sum().transpose();

        // ln2 output feeding the MLP
        Mat<Scalar> ln2_out(L, d);
        for (Eigen::Index i = 0; i < L; ++i) {
            ln2_out.row(i) = (lc.ln2_xhat.row(i).transpose().array() * block.ln2.gamma.array() +
                              block.ln2.beta.array())
                                 .transpose();
        }
        gblock.mlp.w1.noalias() += ln2_out.transpose() * dpre;
        Mat<Scalar> dln2_out = dpre * block.mlp.w1.transpose();

        Mat<Scalar> dx_mid;
        layer_norm_backward(dln2_out, lc.ln2_xhat, lc.ln2_inv_std, block.ln2.gamma, dx_mid,
                            gblock.ln2.gamma, gblock.ln2.beta);
        dx_mid += dx;  // residual carry

        // Attention branch: x_mid = x_in + drop(heads * wo + bo)
        Mat<Scalar> dproj = dx_mid;
        if (train) dproj = dproj.cwiseProduct(lc.resid1_mask);
        gblock.attn.bo += dproj.colwise().sum().transpose();
        gblock.attn.wo.noalias() += lc.heads.transpose() * dproj;
        Mat<Scalar> dheads = dproj * block.attn.wo.transpose();

        Mat<Scalar> dq = Mat<Scalar>::Zero(L, d);
        Mat<Scalar> dk = Mat<Scalar>::Zero(L, d);
        Mat<Scalar> dv = Mat<Scalar>::Zero(L, d);

        for (int h = 0; h < n_heads; ++h) {
            const auto qh = lc.q.middleCols(h * dh, dh);
            const auto kh = lc.k.middleCols(h * dh, dh);
            const auto vh = lc.v.middleCols(h * dh, dh);
            const auto& probs = lc.probs[static_cast<std::size_t>(h)];
            const auto dOh = dheads.middleCols(h * dh, dh);

            Mat<Scalar> effective = probs;
            if (train) {
                effective = probs.cwiseProduct(lc.attn_mask[static_cast<std::size_t>(h)]);
            }
            dv.middleCols(h * dh, dh).noalias() += effective.transpose() * dOh;

            Mat<Scalar> dP = dOh * vh.transpose();  // L x L, upper part unused
            if (train) {
                dP = dP.cwiseProduct(lc.attn_mask[static_cast<std::size_t>(h)]);
            }

            Mat<Scalar> dS = Mat<Scalar>::Zero(L, L);
            for (Eigen::Index i = 0; i < L; ++i) {
                const auto p_row = probs.row(i).head(i + 1);
                const auto dp_row = dP.row(i).head(i + 1);
                const Scalar dot = (p_row.array() * dp_row.array()).sum();
                dS.row(i).head(i + 1) =
                    (p_row.array() * (dp_row.array() - dot)).matrix();
            }
            dq.middleCols(h * dh, dh).noalias() += dS * kh * scale;
            dk.middleCols(h * dh, dh).noalias() += dS.transpose() * qh * scale;
        }

        // ln1 output feeding q/k/v
        Mat<Scalar> ln1_out(L, d);
        for (Eigen::Index i = 0; i < L; ++i) {
            ln1_out.row(i) = (lc.ln1_xhat.row(i).transpose().array() * block.ln1.gamma.array() +
                              block.ln1.beta.array())
                                 .transpose();
        }
        gblock.attn.bq += dq.colwise().sum().transpose();
        gblock.attn.wq.noalias() += ln1_out.transpose() * dq;
        gblock.attn.bk += dk.colwise().sum().transpose();
        gblock.attn.wk.noalias() += ln1_out.transpose() * dk;
        gblock.attn.bv += dv.colwise().sum().transpose();
        gblock.attn.wv.noalias() += ln1_out.transpose() * dv;

        Mat<Scalar> da = dq * block.attn.wq.transpose();
        da.noalias() += dk * block.attn.wk.transpose();
        da.noalias() += dv * block.attn.wv.transpose();

        Mat<Scalar> dx_in;
        layer_norm_backward(da, lc.ln1_xhat, lc.ln1_inv_std, block.ln1.gamma, dx_in,
                            gblock.ln1.gamma, gblock.ln1.beta);
        dx = dx_mid + dx_in;
    }

    for (Eigen::Index t = 0; t < L; ++t) {
        grads.tok_emb.row(ids[static_cast<std::size_t>(t)]) += dx.row(t);
        if (config_.positional == PositionalKind::learned) {
            grads.pos_emb.row(t) += dx.row(t);
        }
    }
}

template <typename Scalar>
Mat<Scalar> GptModel<Scalar>::forward(const std::vector<int>& ids,
                                      const std::vector<double>& slopes) const {
    return run_forward(ids, slopes, nullptr, nullptr);
}

template <typename Scalar>
double GptModel<Scalar>::sequence_log_prob(const std::vector<int>& ids,
                                           const std::vector<double>& slopes) const {
    if (ids.size() < 2) {
        throw std::invalid_argument("sequence log-probability needs at least 2 tokens");
    }
    const Mat<Scalar> logits = run_forward(ids, slopes, nullptr, nullptr);
    double total = 0.0;
    for (Eigen::Index t = 0; t + 1 < static_cast<Eigen::Index>(ids.size()); ++t) {
        const Eigen::VectorXd row = logits.row(t).transpose().template cast<double>();
        const double max_logit = row.maxCoeff();
        const double lse = std::log((row.array() - max_logit).exp().sum()) + max_logit;
        total += row(ids[static_cast<std::size_t>(t) + 1]) - lse;
    }
    return total;
}

template <typename Scalar>
double GptModel<Scalar>::sequence_log_prob(const std::vector<int>& ids) const {
    return sequence_log_prob(ids, bound_slopes_);
}

template <typename Scalar>
double GptModel<Scalar>::BatchStats::mean() const {
    if (n_targets == 0) {
        throw std::logic_error("no target positions in batch");
    }
    return ce_sum / static_cast<double>(n_targets);
}

namespace {
/// Row length up to the first pad token (pads are only legal as right padding).
std::size_t content_length(const std::vector<int>& ids, int pad_id) {
    if (pad_id < 0) return ids.size();
    std::size_t n = 0;
    while (n < ids.size() && ids[n] != pad_id) ++n;
    return n;
}
}  // namespace

template <typename Scalar>
typename GptModel<Scalar>::BatchStats GptModel<Scalar>::accumulate_loss_gradients(
    const std::vector<std::vector<int>>& batch, const std::vector<double>& slopes,
    ModelParams<Scalar>& grads, Rng* dropout_rng, int pad_id,
    const std::string& batch_label) const {
    if (batch.empty()) {
        throw std::invalid_argument("empty batch");
    }
    BatchStats stats;
    Workspace cache;
    for (const auto& row : batch) {
        const std::size_t len = content_length(row, pad_id);
        if (len < 2) continue;
        std::vector<int> ids(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(len));
        cache.layers.clear();
        const Mat<Scalar> logits = run_forward(ids, slopes, dropout_rng, &cache);

        const Eigen::Index L = static_cast<Eigen::Index>(ids.size());
        Mat<Scalar> dlogits = Mat<Scalar>::Zero(L, config_.vocab_size);
        for (Eigen::Index t = 0; t + 1 < L; ++t) {
            const Eigen::VectorXd row_logits = logits.row(t).transpose().template cast<double>();
            const double max_logit = row_logits.maxCoeff();
            const Eigen::VectorXd expd = (row_logits.array() - max_logit).exp();
            const double denom = expd.sum();
            const int target = ids[static_cast<std::size_t>(t) + 1];
            stats.ce_sum += -(row_logits(target) - max_logit - std::log(denom));
            ++stats.n_targets;
            dlogits.row(t) = (expd / denom).transpose().template cast<Scalar>();
            dlogits(t, target) -= Scalar(1);
        }
        run_backward(ids, dlogits, slopes, cache, grads);
    }
    if (stats.n_targets == 0) {
        throw std::invalid_argument("batch contains no target positions" +
                                    (batch_label.empty() ? "" : " (" + batch_label + ")"));
    }
    if (!std::isfinite(stats.ce_sum)) {
        throw NumericError("non-finite loss" +
                           (batch_label.empty() ? "" : " in batch " + batch_label));
    }
    return stats;
}

template <typename Scalar>
typename GptModel<Scalar>::BatchStats GptModel<Scalar>::loss_and_gradients(
    const std::vector<std::vector<int>>& batch, const std::vector<double>& slopes,
    ModelParams<Scalar>& grads, Rng* dropout_rng, int pad_id,
    const std::string& batch_label) const {
    grads.set_zero();
    BatchStats stats =
        accumulate_loss_gradients(batch, slopes, grads, dropout_rng, pad_id, batch_label);
    const Scalar inv = Scalar(1.0 / static_cast<double>(stats.n_targets));
    for (auto& ref : grads.tensor_refs()) {
        for (Eigen::Index i = 0; i < ref.size(); ++i) {
            ref.data[i] *= inv;
        }
    }
    return stats;
}

template <typename Scalar>
typename GptModel<Scalar>::BatchStats GptModel<Scalar>::evaluate_loss(
    const std::vector<std::vector<int>>& batch, const std::vector<double>& slopes,
    int pad_id) const {
    BatchStats stats;
    for (const auto& row : batch) {
        const std::size_t len = content_length(row, pad_id);
        if (len < 2) continue;
        std::vector<int> ids(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(len));
        const Mat<Scalar> logits = run_forward(ids, slopes, nullptr, nullptr);
        for (Eigen::Index t = 0; t + 1 < static_cast<Eigen::Index>(ids.size()); ++t) {
            const Eigen::VectorXd row_logits = logits.row(t).transpose().template cast<double>();
            const double max_logit = row_logits.maxCoeff();
            const double lse = std::log((row_logits.array() - max_logit).exp().sum()) + max_logit;
            stats.ce_sum += -(row_logits(ids[static_cast<std::size_t>(t) + 1]) - lse);
            ++stats.n_targets;
        }
    }
    return stats;
}

template <typename Scalar>
Eigen::VectorXd GptModel<Scalar>::sentence_embedding(const std::vector<int>& ids,
                                                     const std::vector<double>& slopes,
                                                     int n_reserved_ids) const {
    Workspace cache;
    run_forward(ids, slopes, nullptr, &cache);
    std::vector<Eigen::Index> content;
    for (Eigen::Index t = 0; t < static_cast<Eigen::Index>(ids.size()); ++t) {
        if (ids[static_cast<std::size_t>(t)] >= n_reserved_ids) {
            content.push_back(t);
        }
    }
    if (content.empty()) {
        throw std::invalid_argument("sentence embedding requires at least one content token");
    }
    if (config_.pooling == PoolKind::last) {
        return cache.h_final.row(content.back()).transpose().template cast<double>();
    }
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(config_.d_model);
    for (Eigen::Index t : content) {
        mean += cache.h_final.row(t).transpose().template cast<double>();
    }
    return mean / static_cast<double>(content.size());
}

template class GptModel<float>;
template class GptModel<double>;
template struct ModelParams<float>;
template struct ModelParams<double>;

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian float32; big-endian hosts unsupported");

constexpr char kMagic[5] = {'C', 'P', 'L', 'M', '1'};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta,
                     const ModelParams<float>& params) {
    if (!params.all_finite()) {
        throw NumericError("refusing to save checkpoint with non-finite parameters: " +
                           path.string());
    }
    auto refs = params.tensor_refs();
    nlohmann::json manifest = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& ref : refs) {
        manifest.push_back({{"name", ref.name},
                            {"shape", {ref.rows, ref.cols}},
                            {"offset", offset},
                            {"count", ref.size()}});
        offset += static_cast<std::uint64_t>(ref.size()) * sizeof(float);
    }
    nlohmann::json header{{"format_version", 1},
                          {"config", detail::model_config_to_json(meta.config)},
                          {"epoch", meta.epoch},
                          {"slope_at_save", meta.slope_at_save},
                          {"bias_active", meta.bias_active},
                          {"uniform_slope", meta.uniform_slope},
                          {"rng_state", meta.rng_state},
                          {"params", manifest}};
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open checkpoint for writing: " + path.string());
    }
    out.write(kMagic, sizeof(kMagic));
    const auto header_len = static_cast<std::uint32_t>(header_text.size());
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& ref : refs) {
        out.write(reinterpret_cast<const char*>(ref.data),
                  static_cast<std::streamsize>(ref.size() * sizeof(float)));
    }
    if (!out) {
        throw IoError("checkpoint write failure: " + path.string());
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open checkpoint: " + path.string());
    }
    char magic[sizeof(kMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw DataError("not a CPLM1 checkpoint: " + path.string());
    }
    std::uint32_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    std::string header_text(header_len, '\0');
    in.read(header_text.data(), header_len);
    if (!in) {
        throw DataError("truncated checkpoint header: " + path.string());
    }

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint header parse error in " + path.string() + ": " + e.what());
    }

    Checkpoint ckpt;
    try {
        ckpt.meta.config = detail::model_config_from_json(header.at("config"));
        ckpt.meta.epoch = header.at("epoch").get<int>();
        ckpt.meta.slope_at_save = header.at("slope_at_save").get<double>();
        ckpt.meta.bias_active = header.at("bias_active").get<bool>();
        ckpt.meta.uniform_slope = header.at("uniform_slope").get<bool>();
        ckpt.meta.rng_state = header.at("rng_state").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint header fields in " + path.string() + ": " + e.what());
    }

    ckpt.params = ModelParams<float>::shaped(ckpt.meta.config);
    auto refs = ckpt.params.tensor_refs();
    const auto& manifest = header.at("params");
    if (manifest.size() != refs.size()) {
        throw DataError("checkpoint manifest lists " + std::to_string(manifest.size()) +
                        " tensors, expected " + std::to_string(refs.size()));
    }
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const auto& entry = manifest[i];
        if (entry.at("name").get<std::string>() != refs[i].name ||
            entry.at("count").get<Eigen::Index>() != refs[i].size()) {
            throw DataError("checkpoint manifest mismatch at tensor '" + refs[i].name + "'");
        }
        in.read(reinterpret_cast<char*>(refs[i].data),
                static_cast<std::streamsize>(refs[i].size() * sizeof(float)));
        if (!in) {
            throw DataError("truncated checkpoint payload at tensor '" + refs[i].name + "'");
        }
    }
    if (!ckpt.params.all_finite()) {
        throw NumericError("checkpoint contains non-finite parameters: " + path.string());
    }
    return ckpt;
}

std::vector<double> checkpoint_slopes(const CheckpointMeta& meta) {
    if (!meta.bias_active) {
        return {};
    }
    return effective_slopes(head_slopes(meta.config.n_heads), meta.slope_at_save,
                            meta.uniform_slope);
}

}  // namespace cplm
