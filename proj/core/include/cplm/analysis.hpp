#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cplm/eval.hpp"
#include "cplm/model.hpp"
#include "cplm/tokenizer.hpp"

namespace cplm {

enum class ProjectionMethod { pca, tsne };

const char* to_string(ProjectionMethod method);
ProjectionMethod projection_method_from_string(const std::string& name);

/// Per-epoch sentence embeddings plus their shared-space 2D projection.
/// `projection_space` tags snapshots projected jointly; distances are only
/// defined between snapshots carrying the same tag.
struct EmbeddingSnapshot {
    int epoch = 0;
    std::vector<std::string> labels;
    Eigen::MatrixXd vectors;     // N x d
    Eigen::MatrixXd projection;  // N x 2 once projected
    int projection_space = -1;
};

/// 2D projection of N x d vectors.
///   pca  - top-2 principal components, mean-centered, sign fixed so the
///          largest-magnitude loading of each component is positive;
///          bit-for-bit reproducible given identical input order.
///   tsne - seeded stochastic neighbor embedding (exact pairwise affinities,
///          perplexity min(30, (N-1)/3)); deterministic for a fixed seed.
Eigen::MatrixXd project_2d(const Eigen::MatrixXd& vectors, ProjectionMethod method,
                           std::uint64_t seed);

/// Entropy (nats) of the 2D histogram over a bins x bins grid spanning the
/// points' bounding box; empty bins contribute zero. Scale-invariant because
/// binning is relative to the bounding box.
double histogram_entropy(const Eigen::MatrixXd& points, int bins_per_axis = 50);

/// Euclidean distance between the two snapshots' mean projected vectors.
/// Both snapshots must carry the same projection space tag.
double epoch_mean_distance(const EmbeddingSnapshot& a, const EmbeddingSnapshot& b);

struct TrajectoryEpoch {
    int epoch = 0;
    double entropy = 0.0;
    std::map<std::string, CategoryScore> category_scores;
    double overall_accuracy = 0.0;
};

struct EpochPairDistance {
    int epoch_a = 0;
    int epoch_b = 0;
    double distance = 0.0;
};

struct TrajectoryReport {
    std::vector<TrajectoryEpoch> epochs;
    std::vector<EpochPairDistance> distances;  ///< consecutive pairs plus (first, last)
    std::vector<EmbeddingSnapshot> snapshots;  ///< jointly projected, one per epoch
};

/// Tracks representation dynamics and accuracy across checkpoints: embeds
/// both members of every pair in the selected categories (labels "good"/
/// "bad"), projects all epochs jointly into one 2D space, and reports
/// per-epoch histogram entropy, mean-projection distances between epochs,
/// and per-epoch minimal-pair accuracy. An empty `category_filter` keeps all
/// categories.
TrajectoryReport track_trajectory(const std::vector<std::filesystem::path>& checkpoint_paths,
                                  const std::vector<MinimalPair>& pairs,
                                  const std::vector<std::string>& category_filter,
                                  const Tokenizer& tokenizer, ProjectionMethod method,
                                  std::uint64_t seed, int bins_per_axis = 50);

/// CSV in the layout: label column, entropy per epoch, then the epoch-pair
/// mean distances.
std::string trajectory_stats_csv(const std::string& label, const TrajectoryReport& report);

/// CSV "x,y,label,epoch" of all projected points for external plotting.
std::string projection_csv(const std::vector<EmbeddingSnapshot>& snapshots);

/// Minimal SVG scatter of one snapshot (points colored by label).
std::string projection_svg(const EmbeddingSnapshot& snapshot, int size_px = 480);

}  // namespace cplm
