#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

namespace cplm {

/// Which working-memory schedule drives the attention bias over training.
///   none                  - no bias term at all (vanilla model, learned positions)
///   static_limit          - fixed slope m0 for the whole run
///   linear                - slope decays linearly from m0 to 0 over the horizon
///   exponential           - slope follows m0 * r^t (r < 1: capacity grows)
///   reversed_exponential  - same formula with r > 1 (capacity shrinks)
enum class ScheduleKind { none, static_limit, linear, exponential, reversed_exponential };

const char* to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& name);

struct ScheduleSpec {
    ScheduleKind kind = ScheduleKind::none;
    double m0 = 1.0;          ///< initial slope, in [0, 1]
    double r = 0.6;           ///< decay/growth rate (exponential kinds only)
    int horizon_epochs = 10;  ///< epochs the schedule spans; later epochs hold the final value
    bool snap_final_to_zero = false;  ///< force slope 0 at and beyond the horizon
    bool uniform_slope = false;       ///< apply m_t identically to all heads (ablation)

    /// Returns all constraint violations, empty when valid.
    std::vector<std::string> validation_errors() const;
    /// Throws ConfigError listing every violation.
    void validate() const;
};

/// Causal distance-penalty matrix: penalties(i, j) = -(i - j) for j <= i,
/// -inf markers above the diagonal.
struct BiasMatrix {
    int seq_len = 0;
    Eigen::MatrixXd penalties;

    double penalty(int query_pos, int key_pos) const { return penalties(query_pos, key_pos); }
};

struct HeadSlopes {
    int n_heads = 0;
    std::vector<double> slopes;  ///< slopes[0] = 1, geometric ratio 2^(-8/n_heads)
};

/// Geometric per-head slopes. For 8 heads: 1, 1/2, 1/4, ..., 1/128.
HeadSlopes head_slopes(int n_heads);

BiasMatrix bias_matrix(int seq_len);

/// Slope m_t for epoch t (t >= 0; t beyond the horizon clamps to the horizon value).
/// Always clamped into [0, 1]. Must not be called for ScheduleKind::none.
double schedule_slope(const ScheduleSpec& spec, int epoch);

/// Working-memory capacity w_t = 1 - m_t. m_t must already lie in [0, 1].
double working_memory(double m_t);

struct CapacityPoint {
    int epoch;
    double m;
    double w;
};

/// Capacity trajectory for t = 0..horizon_epochs. For kind none the bias is
/// absent and the curve is the constant (m = 0, w = 1).
std::vector<CapacityPoint> capacity_curve(const ScheduleSpec& spec);

/// Per-head slopes in effect at schedule value m_t: the geometric base slopes
/// scaled by m_t, or m_t for every head when `uniform` is set. With m_t = m0 = 1
/// the non-uniform form reduces to the standard fixed-bias assignment.
std::vector<double> effective_slopes(const HeadSlopes& base, double m_t, bool uniform);

std::string capacity_curve_csv(const ScheduleSpec& spec);

}  // namespace cplm
