#include <doctest.h>

#include <cmath>
#include <set>

#include "textsettr/rng.hpp"
#include "textsettr/tokenizer.hpp"

using namespace textsettr;

TEST_SUITE("rng_tokenizer") {
  TEST_CASE("same seed gives the same stream") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  }

  TEST_CASE("split children are addressable and distinct") {
    Rng parent(7);
    const Rng child = parent.split(3);
    parent.next_u64();
    parent.next_u64();
    Rng again = parent.split(3);
    Rng c1 = child;
    CHECK(c1.next_u64() == again.next_u64());
    Rng other = Rng(7).split(4);
    Rng c2 = Rng(7).split(3);
    CHECK(other.next_u64() != c2.next_u64());
  }

  TEST_CASE("uniform and below stay in range, normal has unit moments") {
    Rng rng(1);
    double sum = 0, sq = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
      const double u = rng.uniform();
      CHECK_UNARY(u >= 0.0);
      CHECK_UNARY(u < 1.0);
      CHECK(rng.below(7) < 7u);
      const double z = rng.normal();
      sum += z;
      sq += z * z;
    }
    CHECK(std::abs(sum / n) < 0.01);
    CHECK(std::abs(sq / n - 1.0) < 0.02);
  }

  TEST_CASE("bernoulli edges") {
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
      CHECK_FALSE(rng.bernoulli(0.0));
      CHECK(rng.bernoulli(1.0));
    }
  }

  TEST_CASE("split_words and normalize_spaces") {
    CHECK(split_words("  a  b\tc\n") == std::vector<std::string>{"a", "b", "c"});
    CHECK(normalize_spaces("  a  b\tc\n") == "a b c");
    CHECK(split_words("").empty());
  }

  TEST_CASE("vocabulary orders by frequency then lexicographically") {
    const std::vector<std::string> texts{"b a c", "a b", "a d"};
    const Vocabulary v = Vocabulary::build(texts, 100);
    REQUIRE(v.size() == 7);
    CHECK(v.token(Vocabulary::kUnk) == "<unk>");
    CHECK(v.token(Vocabulary::kBos) == "<s>");
    CHECK(v.token(Vocabulary::kEos) == "</s>");
    CHECK(v.token(3) == "a");
    CHECK(v.token(4) == "b");
    CHECK(v.token(5) == "c");
    CHECK(v.token(6) == "d");
  }

  TEST_CASE("vocabulary cap counts the specials") {
    const std::vector<std::string> texts{"a a a b b c"};
    const Vocabulary v = Vocabulary::build(texts, 5);
    CHECK(v.size() == 5);
    CHECK(v.id("c") == Vocabulary::kUnk);
  }

  TEST_CASE("encode/decode round trip and unknown words") {
    const std::vector<std::string> texts{"the cat sat"};
    const Vocabulary v = Vocabulary::build(texts, 100);
    const auto ids = v.encode("the  cat sat");
    CHECK(v.decode(ids) == "the cat sat");
    CHECK(v.encode("dog").front() == Vocabulary::kUnk);
    CHECK_THROWS_AS(v.decode(std::vector<TokenId>{999}), TokenizerError);
  }

  TEST_CASE("from_tokens rebuilds and rejects duplicates") {
    const std::vector<std::string> texts{"x y z"};
    const Vocabulary v = Vocabulary::build(texts, 100);
    const Vocabulary w = Vocabulary::from_tokens(v.tokens());
    CHECK(w.tokens() == v.tokens());
    CHECK_THROWS_AS(Vocabulary::from_tokens({"<unk>", "<s>", "</s>", "a", "a"}), TokenizerError);
  }
}
