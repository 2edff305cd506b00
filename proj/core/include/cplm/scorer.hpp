#pragma once

#include <vector>

namespace cplm {

/// Anything that can assign a log-probability to a token-id sequence
/// (BOS prepended, natural log). Lets evaluation code run against both the
/// transformer and small enumerable reference models.
class SequenceScorer {
public:
    virtual ~SequenceScorer() = default;

    /// Sum over t >= 1 of log P(ids[t] | ids[0..t-1]).
    /// Throws std::invalid_argument for sequences longer than max_input_length().
    virtual double sequence_log_prob(const std::vector<int>& ids) const = 0;

    virtual int max_input_length() const = 0;
};

}  // namespace cplm
