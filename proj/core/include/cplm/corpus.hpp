#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace cplm {

/// One applied preprocessing transform with its bookkeeping counts.
/// Invariant: kept + dropped == input.
struct PreprocessStep {
    std::string name;
    std::size_t input = 0;
    std::size_t kept = 0;
    std::size_t dropped = 0;
    std::size_t modified = 0;  ///< sentences rewritten in place (e.g. lowercased)
};

/// Immutable after construction; safe to share across threads.
struct Corpus {
    std::vector<std::vector<std::string>> sentences;  ///< whitespace tokens, in input order
    std::string source_name;
    std::vector<PreprocessStep> preprocessing_log;

    std::size_t size() const { return sentences.size(); }
    bool empty() const { return sentences.empty(); }
    std::string sentence_text(std::size_t index) const;
};

/// Inclusive word-count bounds.
struct LengthBand {
    int min_words = 1;
    int max_words = 1;

    void validate() const;
};

/// Loads a one-sentence-per-line UTF-8 text file and applies the fixed
/// preprocessing order: lowercase, then drop sentences shorter than
/// `min_words` whitespace tokens. Punctuation attached to a word counts as
/// part of that word; a free-standing "." is its own word.
///
/// Errors: missing file -> IoError; invalid UTF-8 -> DataError naming the
/// line; everything filtered away -> DataError("empty corpus ...").
Corpus load_corpus(const std::filesystem::path& path, bool lowercase = true, int min_words = 3);

/// Same pipeline over in-memory lines (used by loaders and tests).
Corpus preprocess_lines(const std::vector<std::string>& lines, const std::string& source_name,
                        bool lowercase, int min_words);

/// Keeps exactly the sentences whose word count lies in the band; order is
/// preserved, and the step is appended to the log. An empty result is legal.
Corpus filter_by_length(const Corpus& corpus, LengthBand band);

/// word count -> number of sentences. Sum of counts equals corpus size.
std::map<int, std::size_t> length_histogram(const Corpus& corpus);

/// CSV with header "length,count", rows sorted by length.
std::string length_histogram_csv(const std::map<int, std::size_t>& histogram);

/// One sentence per line, tokens joined with single spaces, LF endings.
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);

}  // namespace cplm
