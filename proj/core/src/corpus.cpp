#include "cplm/corpus.hpp"

#include <sstream>

#include "cplm/errors.hpp"
#include "cplm/text.hpp"

namespace cplm {

std::string Corpus::sentence_text(std::size_t index) const {
    return join_tokens(sentences.at(index));
}

void LengthBand::validate() const {
    if (min_words < 1) {
        throw ConfigError("length band: min_words must be >= 1");
    }
    if (min_words > max_words) {
        throw ConfigError("length band: min_words must be <= max_words");
    }
}

Corpus preprocess_lines(const std::vector<std::string>& lines, const std::string& source_name,
                        bool lowercase, int min_words) {
    Corpus corpus;
    corpus.source_name = source_name;

    std::size_t lowercased = 0;
    std::size_t dropped = 0;
    std::size_t non_empty = 0;

    for (std::size_t i = 0; i < lines.size(); ++i) {
        const std::string& raw = lines[i];
        if (find_invalid_utf8(raw) != std::string::npos) {
            throw DataError("invalid UTF-8 on line " + std::to_string(i + 1) + " of " + source_name);
        }
        std::string line = raw;
        if (lowercase && has_ascii_upper(line)) {
            line = ascii_lower(line);
            ++lowercased;
        }
        auto tokens = split_whitespace(line);
        if (tokens.empty()) {
            continue;  // blank lines are not sentences
        }
        ++non_empty;
        if (static_cast<int>(tokens.size()) < min_words) {
            ++dropped;
            continue;
        }
        corpus.sentences.push_back(std::move(tokens));
    }

    if (lowercase) {
        corpus.preprocessing_log.push_back(
            {"lowercase", non_empty, non_empty, 0, lowercased});
    }
    corpus.preprocessing_log.push_back(
        {"min_words_filter", non_empty, corpus.sentences.size(), dropped, 0});

    if (corpus.sentences.empty()) {
        throw DataError("empty corpus after preprocessing: " + source_name);
    }
    return corpus;
}

Corpus load_corpus(const std::filesystem::path& path, bool lowercase, int min_words) {
    if (!std::filesystem::exists(path)) {
        throw IoError("corpus file not found: " + path.string());
    }
    return preprocess_lines(read_lines(path), path.string(), lowercase, min_words);
}

Corpus filter_by_length(const Corpus& corpus, LengthBand band) {
    band.validate();
    Corpus result;
    result.source_name = corpus.source_name;
    result.preprocessing_log = corpus.preprocessing_log;
    for (const auto& sentence : corpus.sentences) {
        const int words = static_cast<int>(sentence.size());
        if (words >= band.min_words && words <= band.max_words) {
            result.sentences.push_back(sentence);
        }
    }
    result.preprocessing_log.push_back({"length_band[" + std::to_string(band.min_words) + "," +
                                            std::to_string(band.max_words) + "]",
                                        corpus.size(), result.size(),
                                        corpus.size() - result.size(), 0});
    return result;
}

std::map<int, std::size_t> length_histogram(const Corpus& corpus) {
    std::map<int, std::size_t> histogram;
    for (const auto& sentence : corpus.sentences) {
        ++histogram[static_cast<int>(sentence.size())];
    }
    return histogram;
}

std::string length_histogram_csv(const std::map<int, std::size_t>& histogram) {
    std::ostringstream out;
    out << "length,count\n";
    for (const auto& [length, count] : histogram) {
        out << length << ',' << count << '\n';
    }
    return out.str();
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
    std::string content;
    for (const auto& sentence : corpus.sentences) {
        content += join_tokens(sentence);
        content += '\n';
    }
    write_text_file(path, content);
}

}  // namespace cplm
