#include <set>

#include "doctest.h"

#include "cplm/errors.hpp"
#include "cplm/rng.hpp"
#include "cplm/text.hpp"
#include "cplm/tokenizer.hpp"
#include "test_util.hpp"

using namespace cplm;
using cplm_test::TempDir;

namespace {

Corpus make_corpus(const std::vector<std::string>& sentences) {
    Corpus corpus;
    for (const auto& text : sentences) {
        corpus.sentences.push_back(split_whitespace(text));
    }
    return corpus;
}

}  // namespace

TEST_SUITE("tokenizer") {

TEST_CASE("word-level training covers the corpus when the budget allows") {
    const auto corpus = make_corpus({"the cat", "the dog"});
    const auto tok = Tokenizer::train(corpus, 10, TokenizerMode::word);
    CHECK(tok.vocab_size() == 7);  // 4 specials + the, cat, dog
    const auto ids = tok.encode("the cat dog");
    for (int id : ids) {
        CHECK(id >= Tokenizer::n_special);
    }
}

TEST_CASE("budget keeps the most frequent words, rest map to unk") {
    // frequencies: e:5 d:4 c:3 b:2 a:1
    std::vector<std::string> sentences;
    const char* words[] = {"a", "b", "c", "d", "e"};
    for (int w = 0; w < 5; ++w) {
        for (int n = 0; n <= w; ++n) {
            sentences.push_back(words[w]);
        }
    }
    const auto corpus = make_corpus(sentences);
    const auto tok = Tokenizer::train(corpus, Tokenizer::n_special + 3, TokenizerMode::word);
    CHECK(tok.vocab_size() == 7);
    CHECK(tok.encode("e")[0] >= Tokenizer::n_special);
    CHECK(tok.encode("d")[0] >= Tokenizer::n_special);
    CHECK(tok.encode("c")[0] >= Tokenizer::n_special);
    CHECK(tok.encode("b")[0] == tok.specials().unk);
    CHECK(tok.encode("a")[0] == tok.specials().unk);
}

TEST_CASE("frequency ties break lexicographically") {
    const auto corpus = make_corpus({"zeta alpha", "zeta alpha", "beta gamma"});
    const auto tok = Tokenizer::train(corpus, Tokenizer::n_special + 3, TokenizerMode::word);
    // alpha and zeta have count 2; beta wins the remaining slot over gamma
    CHECK(tok.encode("beta")[0] >= Tokenizer::n_special);
    CHECK(tok.encode("gamma")[0] == tok.specials().unk);
}

TEST_CASE("training rejects degenerate inputs") {
    CHECK_THROWS_AS(Tokenizer::train(Corpus{}, 100, TokenizerMode::word), ConfigError);
    const auto corpus = make_corpus({"a b c"});
    CHECK_THROWS_AS(Tokenizer::train(corpus, Tokenizer::n_special, TokenizerMode::word),
                    ConfigError);
}

TEST_CASE("encode handles bos flag and unknown words") {
    const auto corpus = make_corpus({"the cat sat"});
    const auto tok = Tokenizer::train(corpus, 10, TokenizerMode::word);
    const auto plain = tok.encode("the cat sat");
    REQUIRE(plain.size() == 3);

    const auto with_bos = tok.encode("the cat sat", true);
    REQUIRE(with_bos.size() == 4);
    CHECK(with_bos[0] == tok.specials().bos);
    CHECK(std::vector<int>(with_bos.begin() + 1, with_bos.end()) == plain);

    const auto with_unk = tok.encode("the zebra");
    REQUIRE(with_unk.size() == 2);
    CHECK(with_unk[0] == plain[0]);
    CHECK(with_unk[1] == tok.specials().unk);
}

TEST_CASE("decode inverts encode and strips specials") {
    const auto corpus = make_corpus({"the cat sat"});
    const auto tok = Tokenizer::train(corpus, 10, TokenizerMode::word);
    CHECK(tok.decode(tok.encode("the cat sat")) == "the cat sat");
    CHECK(tok.decode(tok.encode("the cat sat", true, true)) == "the cat sat");
    CHECK_THROWS_AS(tok.decode({9999}), DataError);
    CHECK_THROWS_AS(tok.decode({-1}), DataError);
}

TEST_CASE("roundtrip property: 1000 random in-vocabulary sentences") {
    const auto corpus = make_corpus(
        {"the quick brown fox jumps over the lazy dog",
         "pack my box with five dozen liquor jugs", "how vexingly quick daft zebras jump"});
    const auto tok = Tokenizer::train(corpus, 64, TokenizerMode::word);
    std::vector<std::string> vocab_words;
    for (int id = Tokenizer::n_special; id < tok.vocab_size(); ++id) {
        vocab_words.push_back(tok.token(id));
    }
    Rng rng(99);
    for (int trial = 0; trial < 1000; ++trial) {
        std::string sentence;
        const auto len = rng.uniform_int(1, 12);
        for (long w = 0; w < len; ++w) {
            if (w > 0) sentence += ' ';
            sentence += vocab_words[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<long>(vocab_words.size()) - 1))];
        }
        REQUIRE(tok.decode(tok.encode(sentence)) == sentence);
    }
}

TEST_CASE("training is deterministic") {
    const auto corpus = make_corpus({"some words occur often", "some words occur rarely",
                                     "often often some"});
    const auto a = Tokenizer::train(corpus, 12, TokenizerMode::word);
    const auto b = Tokenizer::train(corpus, 12, TokenizerMode::word);
    REQUIRE(a.vocab_size() == b.vocab_size());
    for (int id = 0; id < a.vocab_size(); ++id) {
        CHECK(a.token(id) == b.token(id));
    }
}

TEST_CASE("byte-pair mode learns merges and round-trips in-alphabet text") {
    const auto corpus = make_corpus({"low lower lowest", "new newer newest", "low low new"});
    const auto tok = Tokenizer::train(corpus, 40, TokenizerMode::byte_pair);
    CHECK(tok.mode() == TokenizerMode::byte_pair);
    CHECK(tok.vocab_size() <= 40);
    for (const std::string text : {"low lower newest", "new lowest low"}) {
        CHECK(tok.decode(tok.encode(text)) == text);
    }
    // an unseen word whose marked symbols all exist in the alphabet
    CHECK(tok.decode(tok.encode("wet")) == "wet");
}

TEST_CASE("byte-pair mode covers every corpus word without unk") {
    const auto corpus = make_corpus({"banana band bandana", "ban nab and sandban",
                                     "a banal bandana brand"});
    const auto tok = Tokenizer::train(corpus, 64, TokenizerMode::byte_pair);
    for (const auto& sentence : corpus.sentences) {
        for (const auto& word : sentence) {
            for (int id : tok.encode(word)) {
                REQUIRE(id != tok.specials().unk);
            }
            CHECK(tok.decode(tok.encode(word)) == word);
        }
    }
}

TEST_CASE("vocabulary JSON round-trips through save/load") {
    TempDir dir("tok");
    const auto corpus = make_corpus({"alpha beta gamma", "alpha beta", "gamma gamma"});
    for (auto mode : {TokenizerMode::word, TokenizerMode::byte_pair}) {
        const auto tok = Tokenizer::train(corpus, 24, mode);
        const auto path = dir.path / "vocab.json";
        tok.save(path);
        const auto loaded = Tokenizer::load(path);
        REQUIRE(loaded.vocab_size() == tok.vocab_size());
        CHECK(loaded.mode() == tok.mode());
        for (int id = 0; id < tok.vocab_size(); ++id) {
            CHECK(loaded.token(id) == tok.token(id));
        }
        CHECK(loaded.encode("alpha gamma") == tok.encode("alpha gamma"));
    }
}

TEST_CASE("special ids are distinct and below learned ids") {
    const auto corpus = make_corpus({"x y z"});
    const auto tok = Tokenizer::train(corpus, 10, TokenizerMode::word);
    const auto& s = tok.specials();
    const std::set<int> ids{s.pad, s.unk, s.bos, s.eos};
    CHECK(ids.size() == 4);
    for (int id : ids) {
        CHECK(id < Tokenizer::n_special);
    }
}

}  // TEST_SUITE
