#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "test_support.hpp"
#include "textsettr/corruption.hpp"

using namespace textsettr;
using textsettr::testing::brute_force_rates;
using textsettr::testing::random_seq;

TEST_SUITE("corruption") {
  TEST_CASE("drop keeps order and p=0/p=1 edges") {
    Rng rng(1);
    const TokenSeq s{1, 2, 3, 4, 5, 6, 7, 8};
    CHECK(drop_noise(s, 0.0, rng) == s);
    CHECK(drop_noise(s, 1.0, rng).empty());
    const auto out = drop_noise(s, 0.5, rng);
    CHECK(std::is_sorted(out.begin(), out.end()));
  }

  TEST_CASE("replace only touches positions the other sentence covers") {
    Rng rng(2);
    const TokenSeq s{1, 2, 3, 4, 5, 6};
    const TokenSeq other{10, 11, 12};
    const auto out = replace_noise(s, other, 1.0, rng);
    CHECK(out == TokenSeq{10, 11, 12, 4, 5, 6});
    CHECK(replace_noise(s, other, 0.0, rng) == s);
  }

  TEST_CASE("shuffle is a permutation of the input") {
    Rng rng(3);
    TokenSeq s(30);
    std::iota(s.begin(), s.end(), 0);
    for (int t = 0; t < 100; ++t) {
      auto out = shuffle_noise(s, 0.5, rng);
      std::sort(out.begin(), out.end());
      CHECK(out == s);
    }
    CHECK(shuffle_noise(s, 0.0, rng) == s);
  }

  TEST_CASE("disabled sub-types consume no randomness") {
    const TokenSeq s{1, 2, 3, 4, 5};
    Rng a(9), b(9);
    NoiseSpec spec;
    spec.p_drop = 0.3;
    apply_noise(s, spec, s, a);
    drop_noise(s, 0.3, b);
    CHECK(a.next_u64() == b.next_u64());
  }

  TEST_CASE("rates match the brute-force multiset oracle") {
    Rng rng(11);
    for (int i = 0; i < 2000; ++i) {
      const TokenSeq a = random_seq(rng, 12, 6);
      const TokenSeq b = random_seq(rng, 12, 6);
      const RateStats got = compute_rates(a, b);
      const RateStats want = brute_force_rates(a, b);
      CHECK(got.add_rate == want.add_rate);
      CHECK(got.delete_rate == want.delete_rate);
    }
  }

  TEST_CASE("three tokens in, five out: add rate 0.4") {
    const TokenSeq in{1, 2, 3};
    const TokenSeq out{1, 2, 3, 4, 5};
    const RateStats r = compute_rates(in, out);
    CHECK(r.add_rate == doctest::Approx(0.4));
    CHECK(r.delete_rate == 0.0);
    CHECK(compute_rates(TokenSeq{}, TokenSeq{}).add_rate == 0.0);
  }

  TEST_CASE("noise probabilities are drawn per enabled sub-type") {
    Rng rng(5);
    NoiseSubtypes only_shuffle{false, false, true};
    for (int i = 0; i < 100; ++i) {
      const NoiseSpec s = sample_noise_probs(rng, only_shuffle);
      CHECK(s.p_drop == 0.0);
      CHECK(s.p_replace == 0.0);
      CHECK(s.p_shuffle >= 0.2);
      CHECK(s.p_shuffle <= 0.6);
    }
  }

  TEST_CASE("range_around contains the rate and clips") {
    auto [lo, hi] = range_around(0.5, 0.2, 0.5);
    CHECK(lo == doctest::Approx(0.4));
    CHECK(hi == doctest::Approx(0.6));
    std::tie(lo, hi) = range_around(0.95, 0.3, 0.0);
    CHECK(lo == doctest::Approx(0.95));
    CHECK(hi == 1.0);
    std::tie(lo, hi) = range_around(0.3, 0.0, 0.7);
    CHECK(lo == 0.3);
    CHECK(hi == 0.3);
  }

  TEST_CASE("sampled ranges are valid and contain the true rates") {
    Rng rng(8);
    for (int i = 0; i < 5000; ++i) {
      RateStats r{rng.uniform(), rng.uniform()};
      const TuningRanges t = sample_tuning_ranges(r, rng);
      CHECK(t.valid());
      CHECK(t.add_low <= r.add_rate);
      CHECK(r.add_rate <= t.add_high);
      CHECK(t.del_low <= r.delete_rate);
      CHECK(r.delete_rate <= t.del_high);
    }
  }

  TEST_CASE("TuningRanges validity") {
    CHECK(TuningRanges{0.1, 0.3, 0.0, 0.0}.valid());
    CHECK_FALSE(TuningRanges{0.3, 0.1, 0.0, 0.0}.valid());
    CHECK_FALSE(TuningRanges{-0.1, 0.1, 0.0, 0.0}.valid());
    CHECK_FALSE(TuningRanges{0.0, 1.1, 0.0, 0.0}.valid());
  }
}
