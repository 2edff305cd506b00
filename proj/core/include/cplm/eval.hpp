#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cplm/scorer.hpp"
#include "cplm/tokenizer.hpp"

namespace cplm {

/// One acceptable/unacceptable sentence pair. Category labels are normalized
/// to upper case on load.
struct MinimalPair {
    std::string category;
    std::string subcategory;
    std::string good;
    std::string bad;
};

enum class PairOutcome { correct, incorrect, skipped };

struct ScoredPair {
    MinimalPair pair;
    double log_prob_good = 0.0;
    double log_prob_bad = 0.0;
    PairOutcome outcome = PairOutcome::skipped;
};

struct CategoryScore {
    std::size_t n_pairs = 0;  ///< scored pairs (skipped ones excluded)
    std::size_t n_correct = 0;
    std::size_t n_skipped = 0;
    double accuracy() const {
        return n_pairs == 0 ? 0.0 : static_cast<double>(n_correct) / static_cast<double>(n_pairs);
    }
};

struct EvalReport {
    std::map<std::string, CategoryScore> per_category;
    double overall = 0.0;  ///< unweighted mean of per-category accuracies
    std::string model_label;
    std::vector<std::uint64_t> seed_set;
};

struct ZTestResult {
    double z = 0.0;
    double p_two_sided = 1.0;
    bool significant_at_05 = false;
    bool degenerate = false;  ///< pooled proportion 0 or 1, z undefined
};

/// JSON-lines benchmark: one {"category","subcategory","good","bad"} object
/// per line. Malformed records raise DataError with the line number;
/// duplicates warn to stderr but are kept; an empty file is an error.
std::vector<MinimalPair> load_benchmark(const std::filesystem::path& path);

void save_benchmark(const std::vector<MinimalPair>& pairs, const std::filesystem::path& path);

/// Converter for the alternating-line plain-text layout used by public
/// minimal-pair suites: lines alternate between the two members of each pair,
/// `bad_first` selecting which comes first.
std::vector<MinimalPair> load_paired_text(const std::filesystem::path& path,
                                          const std::string& category,
                                          const std::string& subcategory, bool bad_first);

/// Scores one pair: correct iff logP(good) > logP(bad); ties are incorrect.
/// Sentences are lowercased (training-consistent preprocessing) and encoded
/// as BOS + words + EOS; pairs that exceed the scorer's input limit are
/// marked skipped rather than truncated.
ScoredPair score_pair(const SequenceScorer& scorer, const Tokenizer& tokenizer,
                      const MinimalPair& pair);

std::vector<ScoredPair> score_pairs(const SequenceScorer& scorer, const Tokenizer& tokenizer,
                                    const std::vector<MinimalPair>& pairs);

/// Aggregates scored pairs into per-category accuracy plus the macro average.
EvalReport build_report(const std::vector<ScoredPair>& results, const std::string& model_label);

/// Pooled two-proportion z-test with two-sided normal p-value.
ZTestResult z_test_proportions(std::size_t n_correct_a, std::size_t n_a, std::size_t n_correct_b,
                               std::size_t n_b);

/// Category column order used in report output: the standard minimal-pair
/// suite's thirteen mid-level categories first, anything else alphabetically.
std::vector<std::string> canonical_category_order(const std::vector<std::string>& categories);

}  // namespace cplm
