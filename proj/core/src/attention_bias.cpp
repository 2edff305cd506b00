#include "cplm/attention_bias.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "cplm/errors.hpp"

namespace cplm {

const char* to_string(ScheduleKind kind) {
    switch (kind) {
        case ScheduleKind::none: return "none";
        case ScheduleKind::static_limit: return "static";
        case ScheduleKind::linear: return "linear";
        case ScheduleKind::exponential: return "exponential";
        case ScheduleKind::reversed_exponential: return "reversed_exponential";
    }
    return "unknown";
}

ScheduleKind schedule_kind_from_string(const std::string& name) {
    if (name == "none") return ScheduleKind::none;
    if (name == "static") return ScheduleKind::static_limit;
    if (name == "linear") return ScheduleKind::linear;
    if (name == "exponential") return ScheduleKind::exponential;
    if (name == "reversed_exponential") return ScheduleKind::reversed_exponential;
    throw ConfigError("unknown schedule kind '" + name +
                      "' (expected none|static|linear|exponential|reversed_exponential)");
}

std::vector<std::string> ScheduleSpec::validation_errors() const {
    std::vector<std::string> errors;
    if (!(m0 >= 0.0 && m0 <= 1.0)) {
        errors.push_back("m0 out of [0,1]");
    }
    if (horizon_epochs < 1) {
        errors.push_back("horizon_epochs must be >= 1");
    }
    if (!(r > 0.0)) {
        errors.push_back("r must be > 0");
    }
    return errors;
}

void ScheduleSpec::validate() const {
    const auto errors = validation_errors();
    if (errors.empty()) {
        return;
    }
    std::string joined = "invalid schedule:";
    for (const auto& e : errors) {
        joined += " " + e + ";";
    }
    throw ConfigError(joined);
}

HeadSlopes head_slopes(int n_heads) {
    if (n_heads <= 0) {
        throw ConfigError("n_heads must be >= 1");
    }
    // 2^(-8/n) is exact in binary floating point whenever 8/n is integral,
    // so the 8-head values are exactly 1, 1/2, ..., 1/128.
    const double ratio = std::exp2(-8.0 / static_cast<double>(n_heads));
    HeadSlopes result;
    result.n_heads = n_heads;
    result.slopes.resize(static_cast<std::size_t>(n_heads));
    double value = 1.0;
    for (int h = 0; h < n_heads; ++h) {
        result.slopes[static_cast<std::size_t>(h)] = value;
        value *= ratio;
    }
    return result;
}

BiasMatrix bias_matrix(int seq_len) {
    if (seq_len <= 0) {
        throw ConfigError("seq_len must be >= 1");
    }
    BiasMatrix bias;
    bias.seq_len = seq_len;
    bias.penalties.resize(seq_len, seq_len);
    const double masked = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < seq_len; ++i) {
        for (int j = 0; j < seq_len; ++j) {
            bias.penalties(i, j) = (j <= i) ? -static_cast<double>(i - j) : masked;
        }
    }
    return bias;
}

double schedule_slope(const ScheduleSpec& spec, int epoch) {
    if (epoch < 0) {
        throw std::invalid_argument("schedule epoch must be >= 0");
    }
    if (spec.kind == ScheduleKind::none) {
        throw std::logic_error("schedule_slope is undefined for kind 'none' (bias absent)");
    }
    const int t = std::min(epoch, spec.horizon_epochs);
    if (spec.snap_final_to_zero && t >= spec.horizon_epochs &&
        spec.kind != ScheduleKind::static_limit) {
        return 0.0;
    }
    double m = 0.0;
    switch (spec.kind) {
        case ScheduleKind::static_limit:
            m = spec.m0;
            break;
        case ScheduleKind::linear:
            m = spec.m0 * (1.0 - static_cast<double>(t) / static_cast<double>(spec.horizon_epochs));
            break;
        case ScheduleKind::exponential:
        case ScheduleKind::reversed_exponential:
            m = spec.m0 * std::pow(spec.r, static_cast<double>(t));
            break;
        case ScheduleKind::none:
            break;  // unreachable
    }
    return std::clamp(m, 0.0, 1.0);
}

double working_memory(double m_t) {
    if (!(m_t >= 0.0 && m_t <= 1.0)) {
        throw std::invalid_argument("slope outside [0,1]");
    }
    return 1.0 - m_t;
}

std::vector<CapacityPoint> capacity_curve(const ScheduleSpec& spec) {
    spec.validate();
    std::vector<CapacityPoint> curve;
    curve.reserve(static_cast<std::size_t>(spec.horizon_epochs) + 1);
    for (int t = 0; t <= spec.horizon_epochs; ++t) {
        const double m = (spec.kind == ScheduleKind::none) ? 0.0 : schedule_slope(spec, t);
        curve.push_back({t, m, working_memory(m)});
    }
    return curve;
}

std::vector<double> effective_slopes(const HeadSlopes& base, double m_t, bool uniform) {
    if (!(m_t >= 0.0 && m_t <= 1.0)) {
        throw std::invalid_argument("slope outside [0,1]");
    }
    std::vector<double> slopes(base.slopes.size());
    for (std::size_t h = 0; h < base.slopes.size(); ++h) {
        slopes[h] = uniform ? m_t : base.slopes[h] * m_t;
    }
    return slopes;
}

std::string capacity_curve_csv(const ScheduleSpec& spec) {
    std::ostringstream out;
    out << "epoch,m,w\n";
    out.precision(17);
    for (const auto& point : capacity_curve(spec)) {
        out << point.epoch << ',' << point.m << ',' << point.w << '\n';
    }
    return out.str();
}

}  // namespace cplm
