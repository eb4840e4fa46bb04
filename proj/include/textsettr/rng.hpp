#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>

namespace textsettr {

/// Splittable pseudo-random stream (xoshiro256** seeded through SplitMix64).
///
/// A stream is identified by its seed. `split(key)` derives a child stream from
/// that identity alone, so substreams are addressable: the child for a given
/// key is the same no matter how many values were already drawn from the
/// parent. All randomness in the library flows through explicit `Rng` values.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() { return next_u64(); }

  std::uint64_t next_u64();

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  std::size_t below(std::size_t n);

  /// True with probability p; p <= 0 never fires and p >= 1 always fires.
  bool bernoulli(double p) { return uniform() < p; }

  double normal(double mean = 0.0, double stddev = 1.0);

  Rng split(std::uint64_t key) const;

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
};

/// SplitMix64 finalizer; also used to derive stable digests.
std::uint64_t mix64(std::uint64_t x);

}  // namespace textsettr
