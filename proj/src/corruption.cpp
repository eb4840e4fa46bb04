#include "textsettr/corruption.hpp"

#include <algorithm>
#include <tuple>
#include <unordered_map>

namespace textsettr {

bool TuningRanges::valid() const {
  auto in01 = [](double x) { return x >= 0.0 && x <= 1.0; };
  return in01(add_low) && in01(add_high) && in01(del_low) && in01(del_high) && add_low <= add_high &&
         del_low <= del_high;
}

TokenSeq drop_noise(std::span<const TokenId> s, double p, Rng& rng) {
  TokenSeq out;
  out.reserve(s.size());
  for (TokenId t : s)
    if (!rng.bernoulli(p)) out.push_back(t);
  return out;
}

TokenSeq replace_noise(std::span<const TokenId> s, std::span<const TokenId> other, double p, Rng& rng) {
  TokenSeq out(s.begin(), s.end());
  for (std::size_t k = 0; k < out.size(); ++k) {
    const bool hit = rng.bernoulli(p);
    if (hit && k < other.size()) out[k] = other[k];
  }
  return out;
}

TokenSeq shuffle_noise(std::span<const TokenId> s, double p, Rng& rng) {
  TokenSeq out(s.begin(), s.end());
  std::vector<std::size_t> chosen;
  for (std::size_t k = 0; k < out.size(); ++k)
    if (rng.bernoulli(p)) chosen.push_back(k);
  if (chosen.size() < 2) return out;

  // Fisher-Yates over the chosen index list.
  std::vector<std::size_t> perm = chosen;
  for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  for (std::size_t i = 0; i < chosen.size(); ++i) out[chosen[i]] = s[perm[i]];
  return out;
}

TokenSeq apply_noise(std::span<const TokenId> s, const NoiseSpec& spec, std::span<const TokenId> other, Rng& rng) {
  TokenSeq out(s.begin(), s.end());
  if (spec.p_drop > 0.0) out = drop_noise(out, spec.p_drop, rng);
  if (spec.p_replace > 0.0) out = replace_noise(out, other, spec.p_replace, rng);
  if (spec.p_shuffle > 0.0) out = shuffle_noise(out, spec.p_shuffle, rng);
  return out;
}

NoiseSpec sample_noise_probs(Rng& rng, const NoiseSubtypes& enabled, const NoiseBounds& bounds) {
  NoiseSpec spec;
  if (enabled.drop) spec.p_drop = rng.uniform(bounds.low, bounds.high);
  if (enabled.replace) spec.p_replace = rng.uniform(bounds.low, bounds.high);
  if (enabled.shuffle) spec.p_shuffle = rng.uniform(bounds.low, bounds.high);
  return spec;
}

RateStats compute_rates(std::span<const TokenId> input, std::span<const TokenId> output) {
  std::unordered_map<TokenId, long> balance;  // count_out - count_in
  for (TokenId t : input) --balance[t];
  for (TokenId t : output) ++balance[t];
  long added = 0;
  long deleted = 0;
  for (const auto& [token, diff] : balance) {
    if (diff > 0) added += diff;
    if (diff < 0) deleted -= diff;
  }
  RateStats r;
  if (!output.empty()) r.add_rate = static_cast<double>(added) / static_cast<double>(output.size());
  if (!input.empty()) r.delete_rate = static_cast<double>(deleted) / static_cast<double>(input.size());
  return r;
}

std::pair<double, double> range_around(double rate, double width, double alignment) {
  // high = low + width, written so rounding can never push it below rate.
  const double low = rate - alignment * width;
  const double high = rate + (1.0 - alignment) * width;
  return {std::clamp(low, 0.0, 1.0), std::clamp(high, 0.0, 1.0)};
}

TuningRanges sample_tuning_ranges(const RateStats& rates, Rng& rng) {
  TuningRanges out;
  const double add_w = rng.uniform();
  const double add_a = rng.uniform();
  std::tie(out.add_low, out.add_high) = range_around(rates.add_rate, add_w, add_a);
  const double del_w = rng.uniform();
  const double del_a = rng.uniform();
  std::tie(out.del_low, out.del_high) = range_around(rates.delete_rate, del_w, del_a);
  return out;
}

}  // namespace textsettr
