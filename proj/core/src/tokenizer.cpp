#include "cplm/tokenizer.hpp"

#include <algorithm>
#include <map>

#include <nlohmann/json.hpp>

#include "cplm/errors.hpp"
#include "cplm/text.hpp"

namespace cplm {

namespace {

constexpr const char* kEndOfWord = "</w>";
const char* kSpecialNames[Tokenizer::n_special] = {"<pad>", "<unk>", "<bos>", "<eos>"};

/// Splits a word into UTF-8 code point strings, the last one carrying the
/// end-of-word marker.
std::vector<std::string> word_symbols(const std::string& word) {
    std::vector<std::string> symbols;
    std::size_t i = 0;
    while (i < word.size()) {
        const auto byte = static_cast<unsigned char>(word[i]);
        std::size_t len = 1;
        if ((byte & 0xE0) == 0xC0) len = 2;
        else if ((byte & 0xF0) == 0xE0) len = 3;
        else if ((byte & 0xF8) == 0xF0) len = 4;
        len = std::min(len, word.size() - i);
        symbols.push_back(word.substr(i, len));
        i += len;
    }
    if (!symbols.empty()) {
        symbols.back() += kEndOfWord;
    }
    return symbols;
}

std::map<std::string, std::size_t> word_frequencies(const Corpus& corpus) {
    std::map<std::string, std::size_t> freq;
    for (const auto& sentence : corpus.sentences) {
        for (const auto& word : sentence) {
            ++freq[word];
        }
    }
    return freq;
}

}  // namespace

const char* to_string(TokenizerMode mode) {
    return mode == TokenizerMode::word ? "word" : "byte_pair";
}

TokenizerMode tokenizer_mode_from_string(const std::string& name) {
    if (name == "word") return TokenizerMode::word;
    if (name == "byte_pair") return TokenizerMode::byte_pair;
    throw ConfigError("unknown tokenizer mode '" + name + "' (expected word|byte_pair)");
}

Tokenizer Tokenizer::train(const Corpus& corpus, int vocab_budget, TokenizerMode mode) {
    if (corpus.empty()) {
        throw ConfigError("tokenizer training requires a non-empty corpus");
    }
    if (vocab_budget <= n_special) {
        throw ConfigError("vocab budget must exceed the " + std::to_string(n_special) +
                          " special tokens");
    }

    Tokenizer tok;
    tok.mode_ = mode;
    for (int id = 0; id < n_special; ++id) {
        tok.id_to_token_.emplace_back(kSpecialNames[id]);
        tok.token_to_id_.emplace(kSpecialNames[id], id);
    }

    const auto freq = word_frequencies(corpus);
    const std::size_t budget = static_cast<std::size_t>(vocab_budget) - n_special;

    if (mode == TokenizerMode::word) {
        std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
        std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        if (ranked.size() > budget) {
            ranked.resize(budget);
        }
        for (const auto& [word, count] : ranked) {
            const int id = static_cast<int>(tok.id_to_token_.size());
            tok.id_to_token_.push_back(word);
            tok.token_to_id_.emplace(word, id);
        }
        return tok;
    }

    // Byte-pair: alphabet of marked code points first, then learned merges.
    std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
    words.reserve(freq.size());
    std::map<std::string, std::size_t> symbol_freq;
    for (const auto& [word, count] : freq) {
        auto symbols = word_symbols(word);
        for (const auto& s : symbols) {
            symbol_freq[s] += count;
        }
        words.emplace_back(std::move(symbols), count);
    }

    std::vector<std::pair<std::string, std::size_t>> alphabet(symbol_freq.begin(),
                                                              symbol_freq.end());
    std::stable_sort(alphabet.begin(), alphabet.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (alphabet.size() > budget) {
        alphabet.resize(budget);  // rare symbols fall back to unk
    }
    for (const auto& [symbol, count] : alphabet) {
        const int id = static_cast<int>(tok.id_to_token_.size());
        tok.id_to_token_.push_back(symbol);
        tok.token_to_id_.emplace(symbol, id);
    }

    while (tok.id_to_token_.size() < static_cast<std::size_t>(vocab_budget)) {
        std::map<std::pair<std::string, std::string>, std::size_t> pair_freq;
        for (const auto& [symbols, count] : words) {
            for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
                pair_freq[{symbols[i], symbols[i + 1]}] += count;
            }
        }
        if (pair_freq.empty()) {
            break;
        }
        auto best = pair_freq.begin();
        for (auto it = pair_freq.begin(); it != pair_freq.end(); ++it) {
            if (it->second > best->second) {
                best = it;  // ties resolve to the lexicographically first pair
            }
        }
        if (best->second < 2) {
            break;
        }
        const auto [left, right] = best->first;
        const std::string merged = left + right;
        tok.merge_rank_.emplace(left + "\x01" + right, static_cast<int>(tok.merges_.size()));
        tok.merges_.emplace_back(left, right);
        // distinct merges can yield the same surface string; keep one id
        if (!tok.token_to_id_.count(merged)) {
            const int id = static_cast<int>(tok.id_to_token_.size());
            tok.id_to_token_.push_back(merged);
            tok.token_to_id_.emplace(merged, id);
        }

        for (auto& [symbols, count] : words) {
            for (std::size_t i = 0; i + 1 < symbols.size();) {
                if (symbols[i] == left && symbols[i + 1] == right) {
                    symbols[i] = merged;
                    symbols.erase(symbols.begin() + static_cast<std::ptrdiff_t>(i) + 1);
                } else {
                    ++i;
                }
            }
        }
    }
    return tok;
}

std::vector<std::string> Tokenizer::word_to_pieces(const std::string& word) const {
    auto symbols = word_symbols(word);
    while (symbols.size() > 1) {
        int best_rank = -1;
        std::size_t best_pos = 0;
        for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
            const auto it = merge_rank_.find(symbols[i] + "\x01" + symbols[i + 1]);
            if (it != merge_rank_.end() && (best_rank < 0 || it->second < best_rank)) {
                best_rank = it->second;
                best_pos = i;
            }
        }
        if (best_rank < 0) {
            break;
        }
        symbols[best_pos] += symbols[best_pos + 1];
        symbols.erase(symbols.begin() + static_cast<std::ptrdiff_t>(best_pos) + 1);
    }
    return symbols;
}

std::vector<int> Tokenizer::encode(const std::string& text, bool add_bos, bool add_eos) const {
    std::vector<int> ids;
    if (add_bos) {
        ids.push_back(specials_.bos);
    }
    for (const auto& word : split_whitespace(text)) {
        if (mode_ == TokenizerMode::word) {
            const auto it = token_to_id_.find(word);
            ids.push_back(it != token_to_id_.end() ? it->second : specials_.unk);
        } else {
            for (const auto& piece : word_to_pieces(word)) {
                const auto it = token_to_id_.find(piece);
                ids.push_back(it != token_to_id_.end() ? it->second : specials_.unk);
            }
        }
    }
    if (add_eos) {
        ids.push_back(specials_.eos);
    }
    return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id < 0 || id >= vocab_size()) {
            throw DataError("decoding error: id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(vocab_size()));
        }
        if (is_special(id)) {
            continue;
        }
        const std::string& tokstr = id_to_token_[static_cast<std::size_t>(id)];
        if (mode_ == TokenizerMode::word) {
            if (!out.empty()) {
                out += ' ';
            }
            out += tokstr;
        } else {
            const std::size_t marker_len = std::string(kEndOfWord).size();
            if (tokstr.size() >= marker_len &&
                tokstr.compare(tokstr.size() - marker_len, marker_len, kEndOfWord) == 0) {
                out += tokstr.substr(0, tokstr.size() - marker_len);
                out += ' ';
            } else {
                out += tokstr;
            }
        }
    }
    while (!out.empty() && out.back() == ' ') {
        out.pop_back();
    }
    return out;
}

void Tokenizer::save(const std::filesystem::path& path) const {
    nlohmann::json doc;
    doc["mode"] = to_string(mode_);
    doc["specials"] = {{"pad", specials_.pad},
                       {"unk", specials_.unk},
                       {"bos", specials_.bos},
                       {"eos", specials_.eos}};
    doc["tokens"] = id_to_token_;
    if (mode_ == TokenizerMode::byte_pair) {
        auto merges = nlohmann::json::array();
        for (const auto& [left, right] : merges_) {
            merges.push_back({left, right});
        }
        doc["merges"] = merges;
    }
    write_text_file(path, doc.dump(2) + "\n");
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("vocabulary file " + path.string() + ": " + e.what());
    }
    Tokenizer tok;
    try {
        tok.mode_ = tokenizer_mode_from_string(doc.at("mode").get<std::string>());
        tok.specials_.pad = doc.at("specials").at("pad").get<int>();
        tok.specials_.unk = doc.at("specials").at("unk").get<int>();
        tok.specials_.bos = doc.at("specials").at("bos").get<int>();
        tok.specials_.eos = doc.at("specials").at("eos").get<int>();
        tok.id_to_token_ = doc.at("tokens").get<std::vector<std::string>>();
        if (doc.contains("merges")) {
            for (const auto& pair : doc.at("merges")) {
                tok.merge_rank_.emplace(pair.at(0).get<std::string>() + "\x01" +
                                            pair.at(1).get<std::string>(),
                                        static_cast<int>(tok.merges_.size()));
                tok.merges_.emplace_back(pair.at(0).get<std::string>(),
                                         pair.at(1).get<std::string>());
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("vocabulary file " + path.string() + ": " + e.what());
    }
    for (std::size_t id = 0; id < tok.id_to_token_.size(); ++id) {
        tok.token_to_id_.emplace(tok.id_to_token_[id], static_cast<int>(id));
    }
    return tok;
}

}  // namespace cplm
