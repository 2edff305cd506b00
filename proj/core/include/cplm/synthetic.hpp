#pragma once

#include <cstdint>

#include "cplm/corpus.hpp"
#include "cplm/eval.hpp"

namespace cplm {

/// Deterministic artificial language with two agreement rules: determiners
/// agree in number with their noun, and verbs agree with their subject.
/// Invented open-class stems, real function words, sentence-final " .".
/// Useful as a training fixture whose grammar a small model can actually
/// learn in minutes.
Corpus synthetic_corpus(std::uint64_t seed, std::size_t n_sentences);

/// Minimal pairs over the same lexicon, split evenly between subject-verb
/// agreement ("S-V AGR", verb form flipped) and determiner-noun agreement
/// ("D-N AGR", noun form flipped in a number-neutral frame). Pairs are
/// distinct within one call.
std::vector<MinimalPair> synthetic_benchmark(std::uint64_t seed, std::size_t n_pairs);

}  // namespace cplm
