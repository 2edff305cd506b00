#include "cplm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "cplm/errors.hpp"
#include "cplm/text.hpp"

namespace cplm {

std::vector<std::string> TrainConfig::validation_errors() const {
    std::vector<std::string> errors;
    if (!(lr > 0.0)) errors.push_back("lr must be > 0");
    if (!(weight_decay >= 0.0)) errors.push_back("weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) errors.push_back("beta1 must lie in [0,1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) errors.push_back("beta2 must lie in [0,1)");
    if (!(eps > 0.0)) errors.push_back("eps must be > 0");
    if (batch_size < 1) errors.push_back("batch_size must be >= 1");
    if (grad_accum_steps < 1) errors.push_back("grad_accum_steps must be >= 1");
    if (total_epochs < 1) errors.push_back("total_epochs must be >= 1");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
        errors.push_back("warmup_fraction must lie in [0,1)");
    }
    if (n_restarts < 1) errors.push_back("n_restarts must be >= 1");
    if (early_stop_tolerance_epochs < 1) errors.push_back("early_stop_tolerance_epochs must be >= 1");
    if (!(eval_split_fraction > 0.0 && eval_split_fraction < 0.5)) {
        errors.push_back("eval_split_fraction must lie in (0,0.5)");
    }
    if (seeds.empty()) errors.push_back("at least one seed is required");
    return errors;
}

void TrainConfig::validate() const {
    const auto errors = validation_errors();
    if (errors.empty()) return;
    std::string joined = "invalid train config:";
    for (const auto& e : errors) joined += " " + e + ";";
    throw ConfigError(joined);
}

double lr_at_step(const TrainConfig& config, long step, long total_steps) {
    if (step < 0 || step > total_steps) {
        throw std::invalid_argument("step outside [0, total_steps]");
    }
    if (total_steps == 0) {
        return 0.0;
    }
    const long warmup = static_cast<long>(
        std::ceil(config.warmup_fraction * static_cast<double>(total_steps)));
    if (step < warmup) {
        return config.lr * static_cast<double>(step) / static_cast<double>(warmup);
    }
    if (warmup >= total_steps) {
        return config.lr;
    }
    const double u =
        static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    const double position = u * static_cast<double>(config.n_restarts);
    double progress = position - std::floor(position);
    if (u >= 1.0) {
        progress = 1.0;  // end of the final cycle, not the start of a new one
    }
    constexpr double pi = 3.14159265358979323846;
    return config.lr * 0.5 * (1.0 + std::cos(pi * progress));
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_train_val(
    const Corpus& corpus, double val_fraction) {
    std::vector<std::size_t> train_idx, val_idx;
    const auto threshold = static_cast<std::uint64_t>(val_fraction * 1e6);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (fnv1a64(corpus.sentence_text(i)) % 1000000u < threshold) {
            val_idx.push_back(i);
        } else {
            train_idx.push_back(i);
        }
    }
    // Tiny corpora can hash everything to one side; keep both non-empty.
    if (val_idx.empty() && train_idx.size() > 1) {
        std::size_t pick = 0;
        std::uint64_t best = std::numeric_limits<std::uint64_t>::max();
        for (std::size_t pos = 0; pos < train_idx.size(); ++pos) {
            const auto h = fnv1a64(corpus.sentence_text(train_idx[pos]));
            if (h < best) {
                best = h;
                pick = pos;
            }
        }
        val_idx.push_back(train_idx[pick]);
        train_idx.erase(train_idx.begin() + static_cast<std::ptrdiff_t>(pick));
    }
    if (train_idx.empty()) {
        throw DataError("training split is empty");
    }
    return {std::move(train_idx), std::move(val_idx)};
}

namespace {

std::vector<int> encode_row(const Tokenizer& tokenizer, const std::string& text, int max_len) {
    auto ids = tokenizer.encode(text, /*add_bos=*/true, /*add_eos=*/true);
    if (static_cast<int>(ids.size()) > max_len) {
        ids.resize(static_cast<std::size_t>(max_len));  // training-time right truncation
    }
    return ids;
}

double mean_ce(const GptModel<float>& model, const std::vector<double>& slopes,
               const std::vector<std::vector<int>>& rows) {
    const auto stats = model.evaluate_loss(rows, slopes);
    if (stats.n_targets == 0) {
        throw DataError("held-out set has no scorable positions");
    }
    return stats.ce_sum / static_cast<double>(stats.n_targets);
}

}  // namespace

double perplexity(const GptModel<float>& model, const std::vector<double>& slopes,
                  const Corpus& held_out, const Tokenizer& tokenizer) {
    if (held_out.empty()) {
        throw std::invalid_argument("held-out corpus is empty");
    }
    std::vector<std::vector<int>> rows;
    rows.reserve(held_out.size());
    for (std::size_t i = 0; i < held_out.size(); ++i) {
        rows.push_back(encode_row(tokenizer, held_out.sentence_text(i), model.config().max_seq_len));
    }
    return std::exp(mean_ce(model, slopes, rows));
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

template <typename Scalar>
AdamW<Scalar>::AdamW(const ModelConfig& config, double beta1, double beta2, double eps,
                     double weight_decay)
    : m_(ModelParams<Scalar>::shaped(config)), v_(ModelParams<Scalar>::shaped(config)),
      beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

template <typename Scalar>
void AdamW<Scalar>::step(ModelParams<Scalar>& params, const ModelParams<Scalar>& grads,
                         double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    auto p_refs = params.tensor_refs();
    auto g_refs = grads.tensor_refs();
    auto m_refs = m_.tensor_refs();
    auto v_refs = v_.tensor_refs();
    for (std::size_t i = 0; i < p_refs.size(); ++i) {
        // weight decay on matrices only; biases and layer-norm vectors are exempt
        const bool decay = p_refs[i].cols > 1;
        Scalar* p = p_refs[i].data;
        const Scalar* g = g_refs[i].data;
        Scalar* m = m_refs[i].data;
        Scalar* v = v_refs[i].data;
        for (Eigen::Index k = 0; k < p_refs[i].size(); ++k) {
            const double gk = static_cast<double>(g[k]);
            const double mk = beta1_ * static_cast<double>(m[k]) + (1.0 - beta1_) * gk;
            const double vk = beta2_ * static_cast<double>(v[k]) + (1.0 - beta2_) * gk * gk;
            m[k] = static_cast<Scalar>(mk);
            v[k] = static_cast<Scalar>(vk);
            double update = (mk / bc1) / (std::sqrt(vk / bc2) + eps_);
            if (decay) {
                update += weight_decay_ * static_cast<double>(p[k]);
            }
            p[k] = static_cast<Scalar>(static_cast<double>(p[k]) - lr * update);
        }
    }
}

template class AdamW<float>;
template class AdamW<double>;

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TrainRunRecord train_model(const ModelConfig& model_config, const ScheduleSpec& schedule,
                           const Corpus& corpus, const Tokenizer& tokenizer,
                           const TrainConfig& train_config, std::uint64_t seed,
                           const std::filesystem::path& run_dir) {
    model_config.validate();
    schedule.validate();
    train_config.validate();
    if (schedule.kind != ScheduleKind::none && model_config.positional == PositionalKind::learned) {
        throw ConfigError("bias schedules require positional=none");
    }
    if (schedule.kind == ScheduleKind::none && model_config.positional == PositionalKind::none) {
        throw ConfigError("the unbiased variant uses learned positional embeddings");
    }

    std::filesystem::create_directories(run_dir / "checkpoints");

    const auto [train_idx, val_idx] = split_train_val(corpus, train_config.eval_split_fraction);
    std::vector<std::vector<int>> train_rows, val_rows;
    train_rows.reserve(train_idx.size());
    for (auto i : train_idx) {
        train_rows.push_back(encode_row(tokenizer, corpus.sentence_text(i), model_config.max_seq_len));
    }
    val_rows.reserve(val_idx.size());
    for (auto i : val_idx) {
        val_rows.push_back(encode_row(tokenizer, corpus.sentence_text(i), model_config.max_seq_len));
    }

    GptModel<float> model(model_config, seed);
    AdamW<float> optimizer(model_config, train_config.beta1, train_config.beta2, train_config.eps,
                           train_config.weight_decay);
    ModelParams<float> grads = ModelParams<float>::shaped(model_config);
    Rng shuffle_rng(seed ^ 0x53484643u);
    Rng dropout_rng(seed ^ 0x44524F50u);

    const bool biased = schedule.kind != ScheduleKind::none;
    const HeadSlopes base_slopes = head_slopes(model_config.n_heads);

    const long rows_per_step =
        static_cast<long>(train_config.batch_size) * train_config.grad_accum_steps;
    const long steps_per_epoch =
        (static_cast<long>(train_rows.size()) + rows_per_step - 1) / rows_per_step;
    const long total_steps = steps_per_epoch * train_config.total_epochs;

    TrainRunRecord record;
    record.seed = seed;
    record.run_dir = run_dir;
    record.records_path = run_dir / "train_records.jsonl";

    std::ofstream records_out(record.records_path);
    if (!records_out) {
        throw IoError("cannot open " + record.records_path.string());
    }

    std::vector<std::size_t> order(train_rows.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    double best_ppl = std::numeric_limits<double>::infinity();
    int epochs_without_improvement = 0;
    long global_step = 0;

    for (int epoch = 0; epoch < train_config.total_epochs; ++epoch) {
        const double m_t = biased ? schedule_slope(schedule, epoch) : 0.0;
        const double w_t = working_memory(m_t);
        const std::vector<double> slopes =
            biased ? effective_slopes(base_slopes, m_t, schedule.uniform_slope)
                   : std::vector<double>{};

        shuffle_rng.shuffle(order);

        double epoch_ce = 0.0;
        std::size_t epoch_targets = 0;
        double last_lr = 0.0;
        std::size_t pos = 0;
        while (pos < order.size()) {
            grads.set_zero();
            double step_ce = 0.0;
            std::size_t step_targets = 0;
            for (int micro = 0; micro < train_config.grad_accum_steps && pos < order.size();
                 ++micro) {
                std::vector<std::vector<int>> batch;
                batch.reserve(static_cast<std::size_t>(train_config.batch_size));
                for (int b = 0; b < train_config.batch_size && pos < order.size(); ++b, ++pos) {
                    batch.push_back(train_rows[order[pos]]);
                }
                const auto stats = model.accumulate_loss_gradients(
                    batch, slopes, grads, &dropout_rng, -1,
                    "epoch " + std::to_string(epoch + 1) + ", step " +
                        std::to_string(global_step));
                step_ce += stats.ce_sum;
                step_targets += stats.n_targets;
            }
            const float inv = static_cast<float>(1.0 / static_cast<double>(step_targets));
            for (auto& ref : grads.tensor_refs()) {
                for (Eigen::Index k = 0; k < ref.size(); ++k) {
                    ref.data[k] *= inv;
                }
            }
            last_lr = lr_at_step(train_config, global_step, total_steps);
            optimizer.step(model.params(), grads, last_lr);
            ++global_step;
            epoch_ce += step_ce;
            epoch_targets += step_targets;
        }

        const double train_loss = epoch_ce / static_cast<double>(epoch_targets);
        const double val_ppl = val_rows.empty() ? std::exp(mean_ce(model, slopes, train_rows))
                                                : std::exp(mean_ce(model, slopes, val_rows));
        if (!std::isfinite(val_ppl)) {
            throw NumericError("non-finite validation perplexity after epoch " +
                               std::to_string(epoch + 1));
        }

        const int completed = epoch + 1;
        const double slope_at_save = biased ? schedule_slope(schedule, completed) : 0.0;
        char name[48];
        std::snprintf(name, sizeof(name), "checkpoints/epoch_%03d.ckpt", completed);
        const std::string ckpt_rel = name;
        CheckpointMeta meta;
        meta.config = model_config;
        meta.epoch = completed;
        meta.slope_at_save = slope_at_save;
        meta.bias_active = biased;
        meta.uniform_slope = schedule.uniform_slope;
        meta.rng_state = dropout_rng.state();
        save_checkpoint(run_dir / ckpt_rel, meta, model.params());

        EpochRecord entry{completed, train_loss, val_ppl, m_t, w_t, last_lr, ckpt_rel};
        record.epochs.push_back(entry);
        records_out << nlohmann::json{{"epoch", entry.epoch},
                                      {"train_loss", entry.train_loss},
                                      {"val_ppl", entry.val_ppl},
                                      {"m", entry.m},
                                      {"w", entry.w},
                                      {"lr", entry.lr},
                                      {"ckpt", entry.ckpt}}
                            .dump()
                    << "\n";
        records_out.flush();
        if (!records_out) {
            throw IoError("write failure on " + record.records_path.string());
        }

        if (val_ppl < best_ppl) {
            best_ppl = val_ppl;
            epochs_without_improvement = 0;
        } else {
            ++epochs_without_improvement;
            if (epochs_without_improvement >= train_config.early_stop_tolerance_epochs) {
                record.stopped_early = true;
                break;
            }
        }
    }
    return record;
}

}  // namespace cplm
