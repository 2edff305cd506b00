#pragma once

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "cplm/corpus.hpp"

namespace cplm {

enum class TokenizerMode { word, byte_pair };

struct SpecialIds {
    int pad = 0;
    int unk = 1;
    int bos = 2;
    int eos = 3;
};

/// Reversible vocabulary trained on a corpus. Immutable after training;
/// encode/decode are pure and safe to call concurrently.
///
/// Word mode keeps the most frequent whitespace tokens (lexicographic
/// tie-break), everything else maps to unk. Byte-pair mode learns greedy
/// merges over an end-of-word-marked character alphabet; spacing is restored
/// from the markers, so in-alphabet text round-trips exactly.
class Tokenizer {
public:
    static constexpr int n_special = 4;

    static Tokenizer train(const Corpus& corpus, int vocab_budget, TokenizerMode mode);

    std::vector<int> encode(const std::string& text, bool add_bos = false,
                            bool add_eos = false) const;

    /// Special tokens are omitted from the output. Out-of-range ids -> DataError.
    std::string decode(const std::vector<int>& ids) const;

    int vocab_size() const { return static_cast<int>(id_to_token_.size()); }
    TokenizerMode mode() const { return mode_; }
    const SpecialIds& specials() const { return specials_; }
    bool is_special(int id) const { return id >= 0 && id < n_special; }
    const std::string& token(int id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }

    void save(const std::filesystem::path& path) const;
    static Tokenizer load(const std::filesystem::path& path);

private:
    Tokenizer() = default;

    std::vector<std::string> word_to_pieces(const std::string& word) const;

    TokenizerMode mode_ = TokenizerMode::word;
    SpecialIds specials_;
    std::unordered_map<std::string, int> token_to_id_;
    std::vector<std::string> id_to_token_;
    std::vector<std::pair<std::string, std::string>> merges_;  // byte-pair only, in priority order
    std::unordered_map<std::string, int> merge_rank_;
};

const char* to_string(TokenizerMode mode);
TokenizerMode tokenizer_mode_from_string(const std::string& name);

}  // namespace cplm
