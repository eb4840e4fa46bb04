#pragma once

// Central-difference check of the full reconstruction loss (style extractor,
// encoder with range token, decoder) in double precision.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "textsettr/model.hpp"

namespace textsettr::testing {

struct GradSample {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;

  double rel_error() const { return std::abs(analytic - numeric) / std::max(std::abs(numeric), std::abs(analytic)); }
};

struct GradBatch {
  std::vector<TokenSeq> inputs{{3, 4, 5, 6}, {7, 8}, {9, 10, 11, 12, 13}};
  std::vector<TokenSeq> contexts{{5, 6, 7}, {11, 12, 13, 14}, {15, 16}};
  std::vector<TokenSeq> targets{{3, 4, 6}, {7, 8, 19}, {9, 10, 12, 13}};
  std::vector<TuningRanges> ranges{{0.1, 0.3, 0.0, 0.2}, {0.0, 0.5, 0.4, 0.6}, {0.2, 0.2, 0.7, 0.9}};
};

template <class T>
double batch_loss(const Model<T>& model, const GradBatch& b, Tape<T>& tape) {
  const auto styles = style_vectors(tape, model, std::span<const TokenSeq>(b.contexts));
  const auto loss = reconstruction_loss(tape, model, std::span<const TokenSeq>(b.inputs), styles,
                                        std::span<const TuningRanges>(b.ranges), std::span<const TokenSeq>(b.targets));
  return static_cast<double>(tape.scalar(loss));
}

/// `per_param` samples from each of twelve parameters spread over the encoder,
/// style extractor, decoder and range projection. Entries with a vanishing
/// gradient (unused embedding rows) are skipped.
inline std::vector<GradSample> model_gradcheck(const ModelConfig& config, std::uint64_t seed, int per_param = 2) {
  Model<double> model = Model<float>::initialized(config, seed).cast<double>();
  const GradBatch b;
  Tape<double> tape;
  {
    const auto styles = style_vectors(tape, model, std::span<const TokenSeq>(b.contexts));
    const auto loss = reconstruction_loss(tape, model, std::span<const TokenSeq>(b.inputs), styles,
                                          std::span<const TuningRanges>(b.ranges), std::span<const TokenSeq>(b.targets));
    tape.backward(loss);
  }
  auto eval = [&] {
    Tape<double> t(false);
    return batch_loss(model, b, t);
  };

  const std::vector<Parameter<double>*> picks{&model.encoder.tok_emb,
                                              &model.encoder.layers.front().qkv.w,
                                              &model.encoder.layers.back().ff_out.w,
                                              &model.style_extractor.layers.front().qkv.w,
                                              &model.style_extractor.layers.back().ff_in.w,
                                              &model.style_extractor.final_ln.gamma,
                                              &model.decoder.layers.front().cross_kv.w,
                                              &model.decoder.layers.back().self_qkv.w,
                                              &model.decoder.logits.w,
                                              &model.decoder.pos_emb,
                                              &model.range_proj.w,
                                              &model.range_proj.b};
  Rng rng(seed ^ 0x9e37u);
  std::vector<GradSample> out;
  for (Parameter<double>* p : picks) {
    const auto* grad = tape.grad(*p);
    if (!grad) continue;
    std::vector<std::size_t> live;
    for (std::size_t i = 0; i < grad->size(); ++i)
      if (std::abs((*grad)[i]) > 1e-7) live.push_back(i);
    for (int rep = 0; rep < per_param && !live.empty(); ++rep) {
      const std::size_t i = live[rng.below(live.size())];
      const double orig = p->value[i];
      const double h = 1e-5;
      p->value[i] = orig + h;
      const double lp = eval();
      p->value[i] = orig - h;
      const double lm = eval();
      p->value[i] = orig;
      out.push_back({p->name, i, (*grad)[i], (lp - lm) / (2 * h)});
    }
  }
  return out;
}

}  // namespace textsettr::testing
