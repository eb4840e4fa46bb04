#pragma once

#include <array>
#include <span>
#include <utility>

#include "textsettr/rng.hpp"
#include "textsettr/tokenizer.hpp"

namespace textsettr {

/// Per-example noise probabilities for the three corruption sub-types.
/// A zero probability disables its sub-type.
struct NoiseSpec {
  double p_drop = 0.0;
  double p_replace = 0.0;
  double p_shuffle = 0.0;
};

/// Which noise sub-types a task configuration enables.
struct NoiseSubtypes {
  bool drop = true;
  bool replace = true;
  bool shuffle = false;
};

/// Bounds of the per-example Uniform draw for each enabled sub-type.
struct NoiseBounds {
  double low = 0.2;
  double high = 0.6;
};

struct RateStats {
  double add_rate = 0.0;
  double delete_rate = 0.0;
};

/// Conditioning ranges fed to the encoder; always within [0, 1].
struct TuningRanges {
  double add_low = 0.0;
  double add_high = 0.0;
  double del_low = 0.0;
  double del_high = 0.0;

  std::array<double, 4> as_array() const { return {add_low, add_high, del_low, del_high}; }
  bool valid() const;
  static TuningRanges uniform(double low, double high) { return {low, high, low, high}; }
};

/// Each token removed independently with probability p; order preserved.
TokenSeq drop_noise(std::span<const TokenId> s, double p, Rng& rng);

/// Position k of `s` becomes other[k] with probability p; positions past the
/// end of `other` are never replaced. Output length equals input length.
TokenSeq replace_noise(std::span<const TokenId> s, std::span<const TokenId> other, double p, Rng& rng);

/// Chooses positions by independent coin flips with probability p and
/// permutes the chosen tokens uniformly among the chosen positions.
TokenSeq shuffle_noise(std::span<const TokenId> s, double p, Rng& rng);

/// drop, then replace, then shuffle; sub-types with probability 0 are skipped
/// and consume no randomness.
TokenSeq apply_noise(std::span<const TokenId> s, const NoiseSpec& spec, std::span<const TokenId> other, Rng& rng);

/// Independent Uniform[low, high] draw for every enabled sub-type.
NoiseSpec sample_noise_probs(Rng& rng, const NoiseSubtypes& enabled = {}, const NoiseBounds& bounds = {});

/// Multiset add/delete rates between an input and an output sequence.
/// A rate whose denominator is empty is 0.
RateStats compute_rates(std::span<const TokenId> input, std::span<const TokenId> output);

/// Range of the given width containing `rate` at relative position
/// `alignment` (0 puts the rate at the bottom of the range, 1 at the top),
/// clipped to [0, 1].
std::pair<double, double> range_around(double rate, double width, double alignment);

/// Width ~ U[0,1] and alignment ~ U[0,1] for each rate, then range_around.
TuningRanges sample_tuning_ranges(const RateStats& rates, Rng& rng);

}  // namespace textsettr
