#include "cplm/analysis.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "cplm/errors.hpp"
#include "cplm/rng.hpp"
#include "cplm/text.hpp"

namespace cplm {

const char* to_string(ProjectionMethod method) {
    return method == ProjectionMethod::pca ? "pca" : "tsne";
}

ProjectionMethod projection_method_from_string(const std::string& name) {
    if (name == "pca") return ProjectionMethod::pca;
    if (name == "tsne") return ProjectionMethod::tsne;
    throw ConfigError("unknown projection method '" + name + "' (expected pca|tsne)");
}

namespace {

Eigen::MatrixXd pca_2d(const Eigen::MatrixXd& vectors) {
    const Eigen::Index n = vectors.rows();
    const Eigen::Index d = vectors.cols();
    const Eigen::RowVectorXd mean = vectors.colwise().mean();
    const Eigen::MatrixXd centered = vectors.rowwise() - mean;
    const Eigen::MatrixXd cov =
        centered.transpose() * centered / static_cast<double>(n - 1);
    if (cov.norm() == 0.0) {
        std::cerr << "warning: zero-variance data, PCA projection collapsed to the origin\n";
        return Eigen::MatrixXd::Zero(n, 2);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success) {
        throw NumericError("PCA eigendecomposition failed");
    }
    Eigen::MatrixXd components(d, 2);
    for (int c = 0; c < 2; ++c) {
        Eigen::VectorXd axis = solver.eigenvectors().col(d - 1 - c);  // eigenvalues ascend
        Eigen::Index peak = 0;
        axis.cwiseAbs().maxCoeff(&peak);
        if (axis(peak) < 0.0) {
            axis = -axis;
        }
        components.col(c) = axis;
    }
    return centered * components;
}

Eigen::MatrixXd tsne_2d(const Eigen::MatrixXd& vectors, std::uint64_t seed) {
    const Eigen::Index n = vectors.rows();
    const double perplexity =
        std::min(30.0, static_cast<double>(n - 1) / 3.0);
    const double target_entropy = std::log(std::max(perplexity, 1e-3));

    Eigen::MatrixXd sq_dist(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            sq_dist(i, j) = (vectors.row(i) - vectors.row(j)).squaredNorm();
        }
    }

    // Per-point precision via binary search on the conditional entropy.
    Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double beta = 1.0, beta_lo = 0.0, beta_hi = std::numeric_limits<double>::infinity();
        Eigen::VectorXd row(n);
        for (int iter = 0; iter < 100; ++iter) {
            double sum = 0.0;
            for (Eigen::Index j = 0; j < n; ++j) {
                row(j) = (j == i) ? 0.0 : std::exp(-beta * sq_dist(i, j));
                sum += row(j);
            }
            if (sum <= 0.0) {
                sum = 1e-300;
            }
            double entropy = 0.0;
            for (Eigen::Index j = 0; j < n; ++j) {
                const double q = row(j) / sum;
                if (q > 1e-300) {
                    entropy -= q * std::log(q);
                }
            }
            row /= sum;
            const double diff = entropy - target_entropy;
            if (std::abs(diff) < 1e-5) {
                break;
            }
            if (diff > 0.0) {
                beta_lo = beta;
                beta = std::isinf(beta_hi) ? beta * 2.0 : 0.5 * (beta + beta_hi);
            } else {
                beta_hi = beta;
                beta = beta_lo == 0.0 ? beta / 2.0 : 0.5 * (beta + beta_lo);
            }
        }
        p.row(i) = row.transpose();
    }

    Eigen::MatrixXd joint = (p + p.transpose()) / (2.0 * static_cast<double>(n));
    joint = joint.cwiseMax(1e-12);

    Rng rng(seed);
    Eigen::MatrixXd y(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (int c = 0; c < 2; ++c) {
            y(i, c) = rng.normal(0.0, 1e-4);
        }
    }
    Eigen::MatrixXd velocity = Eigen::MatrixXd::Zero(n, 2);

    const int total_iters = 500;
    const int exaggeration_iters = 100;
    const double eta = 100.0;
    for (int iter = 0; iter < total_iters; ++iter) {
        const double exaggeration = iter < exaggeration_iters ? 4.0 : 1.0;
        const double momentum = iter < 250 ? 0.5 : 0.8;

        Eigen::MatrixXd weight(n, n);
        double q_sum = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            weight(i, i) = 0.0;
            for (Eigen::Index j = 0; j < i; ++j) {
                const double w = 1.0 / (1.0 + (y.row(i) - y.row(j)).squaredNorm());
                weight(i, j) = w;
                weight(j, i) = w;
                q_sum += 2.0 * w;
            }
        }
        q_sum = std::max(q_sum, 1e-300);

        Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(n, 2);
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < n; ++j) {
                if (i == j) continue;
                const double coeff =
                    4.0 * (exaggeration * joint(i, j) - weight(i, j) / q_sum) * weight(i, j);
                grad.row(i) += coeff * (y.row(i) - y.row(j));
            }
        }
        velocity = momentum * velocity - eta * grad;
        y += velocity;
        y.rowwise() -= y.colwise().mean();
    }
    return y;
}

}  // namespace

Eigen::MatrixXd project_2d(const Eigen::MatrixXd& vectors, ProjectionMethod method,
                           std::uint64_t seed) {
    if (vectors.rows() < 2) {
        throw std::invalid_argument("projection needs at least 2 points");
    }
    if (vectors.cols() < 2) {
        throw std::invalid_argument("projection needs dimensionality >= 2");
    }
    if (!vectors.allFinite()) {
        throw NumericError("projection input contains non-finite values");
    }
    return method == ProjectionMethod::pca ? pca_2d(vectors) : tsne_2d(vectors, seed);
}

double histogram_entropy(const Eigen::MatrixXd& points, int bins_per_axis) {
    if (points.rows() < 1 || points.cols() != 2) {
        throw std::invalid_argument("histogram entropy expects an N x 2 point matrix, N >= 1");
    }
    if (bins_per_axis < 1) {
        throw std::invalid_argument("bins_per_axis must be >= 1");
    }
    const Eigen::Index n = points.rows();
    const int bins = bins_per_axis;
    const double min_x = points.col(0).minCoeff();
    const double max_x = points.col(0).maxCoeff();
    const double min_y = points.col(1).minCoeff();
    const double max_y = points.col(1).maxCoeff();
    const double span_x = max_x - min_x;
    const double span_y = max_y - min_y;

    auto bin_index = [bins](double value, double lo, double span) {
        if (span <= 0.0) {
            return 0;
        }
        const int idx = static_cast<int>((value - lo) / span * bins);
        return std::clamp(idx, 0, bins - 1);  // max-coordinate points land in the last bin
    };

    std::vector<std::size_t> counts(static_cast<std::size_t>(bins) * bins, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int bx = bin_index(points(i, 0), min_x, span_x);
        const int by = bin_index(points(i, 1), min_y, span_y);
        ++counts[static_cast<std::size_t>(bx) * bins + by];
    }
    double entropy = 0.0;
    for (std::size_t count : counts) {
        if (count == 0) continue;
        const double prob = static_cast<double>(count) / static_cast<double>(n);
        entropy -= prob * std::log(prob);
    }
    return entropy;
}

double epoch_mean_distance(const EmbeddingSnapshot& a, const EmbeddingSnapshot& b) {
    if (a.projection.rows() == 0 || b.projection.rows() == 0) {
        throw std::invalid_argument("snapshots must be projected before measuring distance");
    }
    if (a.projection_space < 0 || a.projection_space != b.projection_space) {
        throw std::invalid_argument("snapshots live in different projection spaces");
    }
    const Eigen::RowVector2d mean_a = a.projection.colwise().mean();
    const Eigen::RowVector2d mean_b = b.projection.colwise().mean();
    return (mean_a - mean_b).norm();
}

TrajectoryReport track_trajectory(const std::vector<std::filesystem::path>& checkpoint_paths,
                                  const std::vector<MinimalPair>& pairs,
                                  const std::vector<std::string>& category_filter,
                                  const Tokenizer& tokenizer, ProjectionMethod method,
                                  std::uint64_t seed, int bins_per_axis) {
    if (checkpoint_paths.size() < 2) {
        throw std::invalid_argument("trajectory tracking needs at least 2 checkpoints");
    }

    std::vector<MinimalPair> selected;
    if (category_filter.empty()) {
        selected = pairs;
    } else {
        const std::set<std::string> wanted(category_filter.begin(), category_filter.end());
        for (const auto& pair : pairs) {
            if (wanted.count(pair.category)) {
                selected.push_back(pair);
            }
        }
    }
    if (selected.empty()) {
        throw std::invalid_argument("no benchmark pairs match the category filter");
    }

    TrajectoryReport report;
    std::vector<Eigen::MatrixXd> epoch_vectors;

    for (const auto& path : checkpoint_paths) {
        Checkpoint ckpt = load_checkpoint(path);
        if (ckpt.meta.config.vocab_size != tokenizer.vocab_size()) {
            throw ConfigError("checkpoint " + path.string() + " expects vocab of " +
                              std::to_string(ckpt.meta.config.vocab_size) +
                              ", tokenizer provides " + std::to_string(tokenizer.vocab_size()));
        }
        GptModel<float> model(ckpt.meta.config, std::move(ckpt.params));
        const auto slopes = checkpoint_slopes(ckpt.meta);
        model.bind_slopes(slopes);

        // Embeddings: both members of every encodable pair.
        std::vector<Eigen::VectorXd> rows;
        std::vector<std::string> labels;
        const auto limit = static_cast<std::size_t>(model.config().max_seq_len);
        for (const auto& pair : selected) {
            const auto good_ids = tokenizer.encode(ascii_lower(pair.good), true, true);
            const auto bad_ids = tokenizer.encode(ascii_lower(pair.bad), true, true);
            if (good_ids.size() > limit || bad_ids.size() > limit) {
                continue;
            }
            rows.push_back(model.sentence_embedding(good_ids, slopes, Tokenizer::n_special));
            labels.push_back("good");
            rows.push_back(model.sentence_embedding(bad_ids, slopes, Tokenizer::n_special));
            labels.push_back("bad");
        }
        if (rows.size() < 2) {
            throw DataError("checkpoint " + path.string() +
                            ": fewer than 2 embeddable sentences in the selection");
        }
        Eigen::MatrixXd vectors(static_cast<Eigen::Index>(rows.size()), rows[0].size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            vectors.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
        }

        EmbeddingSnapshot snapshot;
        snapshot.epoch = ckpt.meta.epoch;
        snapshot.labels = std::move(labels);
        snapshot.vectors = std::move(vectors);
        report.snapshots.push_back(std::move(snapshot));
        epoch_vectors.push_back(report.snapshots.back().vectors);

        const auto scored = score_pairs(model, tokenizer, selected);
        const auto eval = build_report(scored, "epoch " + std::to_string(ckpt.meta.epoch));
        TrajectoryEpoch epoch_entry;
        epoch_entry.epoch = ckpt.meta.epoch;
        epoch_entry.category_scores = eval.per_category;
        epoch_entry.overall_accuracy = eval.overall;
        report.epochs.push_back(std::move(epoch_entry));
    }

    // One joint projection keeps epoch means comparable.
    Eigen::Index total_rows = 0;
    for (const auto& m : epoch_vectors) total_rows += m.rows();
    Eigen::MatrixXd all(total_rows, epoch_vectors[0].cols());
    Eigen::Index cursor = 0;
    for (const auto& m : epoch_vectors) {
        all.middleRows(cursor, m.rows()) = m;
        cursor += m.rows();
    }
    const Eigen::MatrixXd projected = project_2d(all, method, seed);

    static std::atomic<int> next_space{0};
    const int space = next_space++;
    cursor = 0;
    for (std::size_t e = 0; e < report.snapshots.size(); ++e) {
        auto& snapshot = report.snapshots[e];
        snapshot.projection = projected.middleRows(cursor, snapshot.vectors.rows());
        snapshot.projection_space = space;
        cursor += snapshot.vectors.rows();
        report.epochs[e].entropy = histogram_entropy(snapshot.projection, bins_per_axis);
    }

    for (std::size_t e = 0; e + 1 < report.snapshots.size(); ++e) {
        report.distances.push_back(
            {report.snapshots[e].epoch, report.snapshots[e + 1].epoch,
             epoch_mean_distance(report.snapshots[e], report.snapshots[e + 1])});
    }
    if (report.snapshots.size() > 2) {
        report.distances.push_back(
            {report.snapshots.front().epoch, report.snapshots.back().epoch,
             epoch_mean_distance(report.snapshots.front(), report.snapshots.back())});
    }
    return report;
}

std::string trajectory_stats_csv(const std::string& label, const TrajectoryReport& report) {
    std::ostringstream out;
    out << "model";
    for (const auto& epoch : report.epochs) {
        out << ",entropy@" << epoch.epoch;
    }
    for (const auto& dist : report.distances) {
        out << ",dist@" << dist.epoch_a << "-" << dist.epoch_b;
    }
    out << "\n" << label;
    for (const auto& epoch : report.epochs) {
        out << ',' << format_fixed(epoch.entropy, 6);
    }
    for (const auto& dist : report.distances) {
        out << ',' << format_fixed(dist.distance, 6);
    }
    out << "\n";
    return out.str();
}

std::string projection_csv(const std::vector<EmbeddingSnapshot>& snapshots) {
    std::ostringstream out;
    out << "x,y,label,epoch\n";
    for (const auto& snapshot : snapshots) {
        for (Eigen::Index i = 0; i < snapshot.projection.rows(); ++i) {
            out << format_fixed(snapshot.projection(i, 0), 6) << ','
                << format_fixed(snapshot.projection(i, 1), 6) << ','
                << snapshot.labels[static_cast<std::size_t>(i)] << ',' << snapshot.epoch << "\n";
        }
    }
    return out.str();
}

std::string projection_svg(const EmbeddingSnapshot& snapshot, int size_px) {
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                    "#ff7f0e", "#8c564b"};
    std::vector<std::string> distinct;
    for (const auto& label : snapshot.labels) {
        if (std::find(distinct.begin(), distinct.end(), label) == distinct.end()) {
            distinct.push_back(label);
        }
    }
    std::sort(distinct.begin(), distinct.end());

    const double min_x = snapshot.projection.col(0).minCoeff();
    const double max_x = snapshot.projection.col(0).maxCoeff();
    const double min_y = snapshot.projection.col(1).minCoeff();
    const double max_y = snapshot.projection.col(1).maxCoeff();
    const double span_x = std::max(max_x - min_x, 1e-12);
    const double span_y = std::max(max_y - min_y, 1e-12);
    const double margin = 20.0;
    const double inner = size_px - 2.0 * margin;

    std::ostringstream out;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size_px << "\" height=\""
        << size_px << "\">\n";
    out << "<text x=\"8\" y=\"14\" font-size=\"12\">epoch " << snapshot.epoch << "</text>\n";
    for (Eigen::Index i = 0; i < snapshot.projection.rows(); ++i) {
        const double px = margin + (snapshot.projection(i, 0) - min_x) / span_x * inner;
        const double py = margin + (1.0 - (snapshot.projection(i, 1) - min_y) / span_y) * inner;
        const auto& label = snapshot.labels[static_cast<std::size_t>(i)];
        const auto color_idx = static_cast<std::size_t>(
            std::find(distinct.begin(), distinct.end(), label) - distinct.begin());
        out << "<circle cx=\"" << format_fixed(px, 2) << "\" cy=\"" << format_fixed(py, 2)
            << "\" r=\"3\" fill=\"" << palette[color_idx % 6] << "\" opacity=\"0.7\"><title>"
            << label << "</title></circle>\n";
    }
    out << "</svg>\n";
    return out.str();
}

}  // namespace cplm
