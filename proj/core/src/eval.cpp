#include "cplm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "cplm/errors.hpp"
#include "cplm/text.hpp"

namespace cplm {

namespace {

std::string ascii_upper(std::string_view text) {
    std::string out(text);
    for (char& c : out) {
        if (c >= 'a' && c <= 'z') {
            c = static_cast<char>(c - 'a' + 'A');
        }
    }
    return out;
}

std::string category_key(const std::string& category) {
    std::string key;
    for (char c : ascii_upper(category)) {
        if (c != ' ') {
            key += c;
        }
    }
    return key;
}

void check_pair_fields(const MinimalPair& pair, std::size_t line_no) {
    if (pair.good.empty() || pair.bad.empty()) {
        throw DataError("benchmark line " + std::to_string(line_no) +
                        ": pair sentences must be non-empty");
    }
    if (pair.good == pair.bad) {
        throw DataError("benchmark line " + std::to_string(line_no) +
                        ": good and bad sentences are identical");
    }
}

}  // namespace

std::vector<MinimalPair> load_benchmark(const std::filesystem::path& path) {
    const auto lines = read_lines(path);
    std::vector<MinimalPair> pairs;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (lines[i].empty()) {
            continue;
        }
        nlohmann::json record;
        try {
            record = nlohmann::json::parse(lines[i]);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("benchmark line " + std::to_string(i + 1) + ": " + e.what());
        }
        MinimalPair pair;
        try {
            pair.category = ascii_upper(record.at("category").get<std::string>());
            pair.subcategory = record.at("subcategory").get<std::string>();
            pair.good = record.at("good").get<std::string>();
            pair.bad = record.at("bad").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw DataError("benchmark line " + std::to_string(i + 1) + ": " + e.what());
        }
        check_pair_fields(pair, i + 1);
        const std::string fingerprint = pair.category + "\x01" + pair.good + "\x01" + pair.bad;
        if (!seen.insert(fingerprint).second) {
            std::cerr << "warning: duplicate pair at " << path.string() << ":" << (i + 1)
                      << " (kept)\n";
        }
        pairs.push_back(std::move(pair));
    }
    if (pairs.empty()) {
        throw DataError("empty benchmark: " + path.string());
    }
    return pairs;
}

void save_benchmark(const std::vector<MinimalPair>& pairs, const std::filesystem::path& path) {
    std::string content;
    for (const auto& pair : pairs) {
        content += nlohmann::json{{"category", pair.category},
                                  {"subcategory", pair.subcategory},
                                  {"good", pair.good},
                                  {"bad", pair.bad}}
                       .dump();
        content += '\n';
    }
    write_text_file(path, content);
}

std::vector<MinimalPair> load_paired_text(const std::filesystem::path& path,
                                          const std::string& category,
                                          const std::string& subcategory, bool bad_first) {
    std::vector<std::string> sentences;
    for (const auto& line : read_lines(path)) {
        if (!split_whitespace(line).empty()) {
            sentences.push_back(line);
        }
    }
    if (sentences.empty()) {
        throw DataError("empty benchmark: " + path.string());
    }
    if (sentences.size() % 2 != 0) {
        throw DataError("paired-text benchmark " + path.string() +
                        " has an odd number of sentences");
    }
    std::vector<MinimalPair> pairs;
    for (std::size_t i = 0; i < sentences.size(); i += 2) {
        MinimalPair pair;
        pair.category = ascii_upper(category);
        pair.subcategory = subcategory;
        pair.good = bad_first ? sentences[i + 1] : sentences[i];
        pair.bad = bad_first ? sentences[i] : sentences[i + 1];
        check_pair_fields(pair, i + 1);
        pairs.push_back(std::move(pair));
    }
    return pairs;
}

ScoredPair score_pair(const SequenceScorer& scorer, const Tokenizer& tokenizer,
                      const MinimalPair& pair) {
    ScoredPair result;
    result.pair = pair;
    const auto good_ids = tokenizer.encode(ascii_lower(pair.good), true, true);
    const auto bad_ids = tokenizer.encode(ascii_lower(pair.bad), true, true);
    const auto limit = static_cast<std::size_t>(scorer.max_input_length());
    if (good_ids.size() > limit || bad_ids.size() > limit) {
        result.outcome = PairOutcome::skipped;  // no silent truncation
        return result;
    }
    result.log_prob_good = scorer.sequence_log_prob(good_ids);
    result.log_prob_bad = scorer.sequence_log_prob(bad_ids);
    result.outcome = result.log_prob_good > result.log_prob_bad ? PairOutcome::correct
                                                                : PairOutcome::incorrect;
    return result;
}

std::vector<ScoredPair> score_pairs(const SequenceScorer& scorer, const Tokenizer& tokenizer,
                                    const std::vector<MinimalPair>& pairs) {
    std::vector<ScoredPair> results;
    results.reserve(pairs.size());
    for (const auto& pair : pairs) {
        results.push_back(score_pair(scorer, tokenizer, pair));
    }
    return results;
}

EvalReport build_report(const std::vector<ScoredPair>& results, const std::string& model_label) {
    if (results.empty()) {
        throw std::invalid_argument("no scored pairs to report on");
    }
    EvalReport report;
    report.model_label = model_label;
    for (const auto& scored : results) {
        auto& entry = report.per_category[scored.pair.category];
        switch (scored.outcome) {
            case PairOutcome::correct:
                ++entry.n_pairs;
                ++entry.n_correct;
                break;
            case PairOutcome::incorrect:
                ++entry.n_pairs;
                break;
            case PairOutcome::skipped:
                ++entry.n_skipped;
                break;
        }
    }
    double sum = 0.0;
    std::size_t scored_categories = 0;
    for (const auto& [category, score] : report.per_category) {
        if (score.n_pairs > 0) {
            sum += score.accuracy();
            ++scored_categories;
        }
    }
    report.overall = scored_categories == 0 ? 0.0 : sum / static_cast<double>(scored_categories);
    return report;
}

ZTestResult z_test_proportions(std::size_t n_correct_a, std::size_t n_a, std::size_t n_correct_b,
                               std::size_t n_b) {
    if (n_a < 1 || n_b < 1) {
        throw std::invalid_argument("z-test requires at least one trial per group");
    }
    if (n_correct_a > n_a || n_correct_b > n_b) {
        throw std::invalid_argument("correct counts cannot exceed totals");
    }
    ZTestResult result;
    const double pa = static_cast<double>(n_correct_a) / static_cast<double>(n_a);
    const double pb = static_cast<double>(n_correct_b) / static_cast<double>(n_b);
    const double pooled = static_cast<double>(n_correct_a + n_correct_b) /
                          static_cast<double>(n_a + n_b);
    if (pooled == 0.0 || pooled == 1.0) {
        result.z = std::numeric_limits<double>::quiet_NaN();
        result.p_two_sided = 1.0;
        result.significant_at_05 = false;
        result.degenerate = true;
        return result;
    }
    const double se = std::sqrt(pooled * (1.0 - pooled) *
                                (1.0 / static_cast<double>(n_a) + 1.0 / static_cast<double>(n_b)));
    result.z = (pa - pb) / se;
    result.p_two_sided = std::erfc(std::abs(result.z) / std::sqrt(2.0));
    result.significant_at_05 = result.p_two_sided < 0.05;
    return result;
}

std::vector<std::string> canonical_category_order(const std::vector<std::string>& categories) {
    static const std::vector<std::string> canonical = {
        "D-N AGR", "S-V AGR",    "ANA. AGR", "ARG. STR",   "BINDING",     "CASE", "ELLIPSIS",
        "FILLER. GAP", "IRREGULAR", "ISLAND", "LOCAL. ATR", "QUANTIFIERS", "NPI"};
    std::vector<std::string> ordered;
    std::vector<std::string> rest;
    for (const auto& wanted : canonical) {
        for (const auto& category : categories) {
            if (category_key(category) == category_key(wanted)) {
                ordered.push_back(category);
            }
        }
    }
    for (const auto& category : categories) {
        bool placed = false;
        for (const auto& wanted : canonical) {
            if (category_key(category) == category_key(wanted)) {
                placed = true;
                break;
            }
        }
        if (!placed) {
            rest.push_back(category);
        }
    }
    std::sort(rest.begin(), rest.end());
    ordered.insert(ordered.end(), rest.begin(), rest.end());
    return ordered;
}

}  // namespace cplm
