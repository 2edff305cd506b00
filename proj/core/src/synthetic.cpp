#include "cplm/synthetic.hpp"

#include <set>

#include "cplm/rng.hpp"
#include "cplm/text.hpp"

namespace cplm {

namespace {

const std::vector<std::string> kNounStems = {"blick", "dax",   "wug",  "fep",  "toma", "gorp",
                                             "zav",   "mipen", "kiki", "lund", "pim",  "vash"};
const std::vector<std::string> kVerbStems = {"pilk", "narf", "zib",  "glim", "trop",
                                             "snib", "quen", "vorn", "dree", "mork"};
const std::vector<std::string> kDetSg = {"a", "this", "every", "one"};
const std::vector<std::string> kDetPl = {"these", "some", "many", "two"};
const std::vector<std::string> kAdjectives = {"red",   "blue", "tall", "small",
                                              "round", "soft", "warm", "old"};
const std::vector<std::string> kAdverbs = {"quickly", "slowly", "gently", "twice"};

const std::string& pick(Rng& rng, const std::vector<std::string>& pool) {
    return pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(pool.size()) - 1))];
}

std::string noun_form(const std::string& stem, bool plural) { return plural ? stem + "s" : stem; }
std::string verb_form(const std::string& stem, bool plural) { return plural ? stem : stem + "s"; }

struct Clause {
    std::vector<std::string> tokens;
    std::size_t verb_pos = 0;  // index of the agreeing verb, npos-like 0 when absent
    bool has_verb = false;
    bool subject_plural = false;
};

void append_noun_phrase(Rng& rng, std::vector<std::string>& tokens, bool plural, bool allow_adj) {
    tokens.push_back(plural ? pick(rng, kDetPl) : pick(rng, kDetSg));
    if (allow_adj && rng.uniform() < 0.5) {
        tokens.push_back(pick(rng, kAdjectives));
    }
    tokens.push_back(noun_form(pick(rng, kNounStems), plural));
}

/// Templates: intransitive, transitive, and a number-neutral imperative frame.
Clause make_clause(Rng& rng) {
    Clause clause;
    const double which = rng.uniform();
    if (which < 0.2) {
        // "look at DET (ADJ) NOUN ."
        clause.tokens = {"look", "at"};
        append_noun_phrase(rng, clause.tokens, rng.uniform() < 0.5, true);
    } else {
        clause.subject_plural = rng.uniform() < 0.5;
        append_noun_phrase(rng, clause.tokens, clause.subject_plural, true);
        clause.verb_pos = clause.tokens.size();
        clause.has_verb = true;
        clause.tokens.push_back(verb_form(pick(rng, kVerbStems), clause.subject_plural));
        if (which < 0.6) {
            append_noun_phrase(rng, clause.tokens, rng.uniform() < 0.5, true);
        } else if (rng.uniform() < 0.4) {
            clause.tokens.push_back(pick(rng, kAdverbs));
        }
    }
    clause.tokens.push_back(".");
    return clause;
}

}  // namespace

Corpus synthetic_corpus(std::uint64_t seed, std::size_t n_sentences) {
    Rng rng(seed);
    Corpus corpus;
    corpus.source_name = "synthetic(seed=" + std::to_string(seed) + ")";
    corpus.sentences.reserve(n_sentences);
    for (std::size_t i = 0; i < n_sentences; ++i) {
        corpus.sentences.push_back(make_clause(rng).tokens);
    }
    corpus.preprocessing_log.push_back({"synthetic_generation", n_sentences, n_sentences, 0, 0});
    return corpus;
}

std::vector<MinimalPair> synthetic_benchmark(std::uint64_t seed, std::size_t n_pairs) {
    Rng rng(seed ^ 0x424E4348u);
    std::vector<MinimalPair> pairs;
    std::set<std::string> seen;
    const std::size_t n_sv = n_pairs / 2;
    while (pairs.size() < n_pairs) {
        MinimalPair pair;
        if (pairs.size() < n_sv) {
            // Verb flipped against the subject's number.
            Clause clause;
            do {
                clause = make_clause(rng);
            } while (!clause.has_verb);
            pair.category = "S-V AGR";
            pair.subcategory = "verb_number";
            pair.good = join_tokens(clause.tokens);
            auto bad_tokens = clause.tokens;
            const std::string& good_verb = clause.tokens[clause.verb_pos];
            const std::string stem =
                clause.subject_plural ? good_verb : good_verb.substr(0, good_verb.size() - 1);
            bad_tokens[clause.verb_pos] = verb_form(stem, !clause.subject_plural);
            pair.bad = join_tokens(bad_tokens);
        } else {
            // Noun flipped after its determiner, in a frame without a verb to
            // keep the determiner the only cue.
            const bool plural = rng.uniform() < 0.5;
            std::vector<std::string> tokens = {"look", "at"};
            append_noun_phrase(rng, tokens, plural, true);
            tokens.push_back(".");
            pair.category = "D-N AGR";
            pair.subcategory = "noun_after_determiner";
            pair.good = join_tokens(tokens);
            auto bad_tokens = tokens;
            const std::size_t noun_pos = tokens.size() - 2;
            const std::string& good_noun = tokens[noun_pos];
            const std::string stem =
                plural ? good_noun.substr(0, good_noun.size() - 1) : good_noun;
            bad_tokens[noun_pos] = noun_form(stem, !plural);
            pair.bad = join_tokens(bad_tokens);
        }
        if (seen.insert(pair.good + "\x01" + pair.bad).second) {
            pairs.push_back(std::move(pair));
        }
    }
    return pairs;
}

}  // namespace cplm
