#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "textsettr/autograd.hpp"
#include "textsettr/corruption.hpp"
#include "textsettr/rng.hpp"
#include "textsettr/tokenizer.hpp"

namespace textsettr {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int d_model = 128;
  int num_layers = 2;
  int num_heads = 4;
  int ffn_dim = 256;
  int vocab_size = 2000;
  int max_seq_len = 64;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

using StyleVector = std::vector<float>;

struct DecodeOptions {
  enum class Mode { Greedy, Sample };
  Mode mode = Mode::Greedy;
  double temperature = 1.0;
  int max_len = 64;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <class T>
struct LinearParams {
  Parameter<T> w;  // [in x out]
  Parameter<T> b;  // [1 x out]
};

template <class T>
struct NormParams {
  Parameter<T> gamma;
  Parameter<T> beta;
};

template <class T>
struct EncoderLayerParams {
  NormParams<T> ln_attn;
  LinearParams<T> qkv;
  LinearParams<T> attn_out;
  NormParams<T> ln_ffn;
  LinearParams<T> ff_in;
  LinearParams<T> ff_out;
};

template <class T>
struct DecoderLayerParams {
  NormParams<T> ln_self;
  LinearParams<T> self_qkv;
  LinearParams<T> self_out;
  NormParams<T> ln_cross;
  LinearParams<T> cross_q;
  LinearParams<T> cross_kv;
  LinearParams<T> cross_out;
  NormParams<T> ln_ffn;
  LinearParams<T> ff_in;
  LinearParams<T> ff_out;
};

/// Token + learned absolute position embeddings, pre-LN layers, final LN.
/// Used for both the encoder and the style extractor.
template <class T>
struct EncoderStackParams {
  Parameter<T> tok_emb;
  Parameter<T> pos_emb;
  std::vector<EncoderLayerParams<T>> layers;
  NormParams<T> final_ln;
};

template <class T>
struct DecoderStackParams {
  Parameter<T> tok_emb;
  Parameter<T> pos_emb;  // max_seq_len + 1 rows: the start marker takes position 0
  std::vector<DecoderLayerParams<T>> layers;
  NormParams<T> final_ln;
  LinearParams<T> logits;
};

template <class T>
class Model {
 public:
  explicit Model(const ModelConfig& config);

  /// Random initialization; the style extractor starts as an exact copy of
  /// the encoder.
  static Model initialized(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  EncoderStackParams<T> encoder;
  EncoderStackParams<T> style_extractor;
  DecoderStackParams<T> decoder;
  LinearParams<T> range_proj;  // [4 x d_model]

  /// Calls f(Parameter<T>&) on every parameter in a fixed order.
  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t num_parameters() const;

  template <class U>
  Model<U> cast() const;

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f);

  ModelConfig config_;
};

template <class T>
template <class Self, class F>
void Model<T>::visit_impl(Self& self, F& f) {
  auto linear = [&](auto& l) {
    f(l.w);
    f(l.b);
  };
  auto norm = [&](auto& n) {
    f(n.gamma);
    f(n.beta);
  };
  auto enc_stack = [&](auto& s) {
    f(s.tok_emb);
    f(s.pos_emb);
    for (auto& l : s.layers) {
      norm(l.ln_attn);
      linear(l.qkv);
      linear(l.attn_out);
      norm(l.ln_ffn);
      linear(l.ff_in);
      linear(l.ff_out);
    }
    norm(s.final_ln);
  };
  enc_stack(self.encoder);
  enc_stack(self.style_extractor);
  f(self.decoder.tok_emb);
  f(self.decoder.pos_emb);
  for (auto& l : self.decoder.layers) {
    norm(l.ln_self);
    linear(l.self_qkv);
    linear(l.self_out);
    norm(l.ln_cross);
    linear(l.cross_q);
    linear(l.cross_kv);
    linear(l.cross_out);
    norm(l.ln_ffn);
    linear(l.ff_in);
    linear(l.ff_out);
  }
  norm(self.decoder.final_ln);
  linear(self.decoder.logits);
  linear(self.range_proj);
}

template <class T>
template <class U>
Model<U> Model<T>::cast() const {
  Model<U> out(config_);
  std::vector<Parameter<U>*> dst;
  out.visit([&](Parameter<U>& p) { dst.push_back(&p); });
  std::size_t i = 0;
  visit([&](const Parameter<T>& p) {
    Parameter<U>& d = *dst[i++];
    for (std::size_t k = 0; k < p.value.size(); ++k) d.value[k] = static_cast<U>(p.value[k]);
  });
  return out;
}

/// Stable digest of a model's config and parameter bits.
std::uint64_t model_digest(const Model<float>& model);

// ---------------------------------------------------------------------------
// Differentiable graph builders. Sequences are packed without padding; each
// batch element is an independent segment.
// ---------------------------------------------------------------------------

/// [num_sentences x d_model]: mean of the style extractor's final states.
template <class T>
typename Tape<T>::Var style_vectors(Tape<T>& tape, const Model<T>& model, std::span<const TokenSeq> sentences);

template <class T>
struct EncodedBatch {
  typename Tape<T>::Var states;  // per sequence: range row, then token rows
  Segments seg;
};

/// Encoder final states with styles[i] added to every token row of input i
/// and the projected ranges prepended as row 0 of each sequence.
template <class T>
EncodedBatch<T> encode_batch(Tape<T>& tape, const Model<T>& model, std::span<const TokenSeq> inputs,
                             typename Tape<T>::Var styles, std::span<const TuningRanges> ranges);

/// Teacher-forced decoder logits for [<s>, target...]; one row per predicted
/// token, targets + </s>.
template <class T>
typename Tape<T>::Var decoder_logits(Tape<T>& tape, const Model<T>& model, const EncodedBatch<T>& memory,
                                     std::span<const TokenSeq> targets);

/// Mean token cross-entropy of reconstructing targets (with </s>) from the
/// corrupted inputs under the given styles and ranges.
template <class T>
typename Tape<T>::Var reconstruction_loss(Tape<T>& tape, const Model<T>& model, std::span<const TokenSeq> inputs,
                                          typename Tape<T>::Var styles, std::span<const TuningRanges> ranges,
                                          std::span<const TokenSeq> targets);

/// Decoder target ids for a batch: each target followed by </s>.
std::vector<int> decoder_targets(std::span<const TokenSeq> targets);

// ---------------------------------------------------------------------------
// Inference (no gradients)
// ---------------------------------------------------------------------------

std::vector<StyleVector> extract_styles(const Model<float>& model, std::span<const TokenSeq> sentences);
StyleVector extract_style(const Model<float>& model, const TokenSeq& sentence);

struct HiddenStates {
  int rows = 0;
  int cols = 0;
  std::vector<float> values;  // row 0 is the range position
};

HiddenStates encode(const Model<float>& model, const TokenSeq& input, const StyleVector& style,
                    const TuningRanges& ranges);

/// Batched encode: one HiddenStates per input.
std::vector<HiddenStates> encode_many(const Model<float>& model, std::span<const TokenSeq> inputs,
                                      std::span<const StyleVector> styles, std::span<const TuningRanges> ranges);

/// Key/value-cached autoregressive decoder over a batch of encoder memories.
class IncrementalDecoder {
 public:
  /// memories[i] is the encoder output of sequence i.
  IncrementalDecoder(const Model<float>& model, std::span<const HiddenStates> memories);

  /// Feeds one token to each listed sequence (at its next position) and
  /// writes logits rows [seqs.size() x vocab] into `logits`.
  void step(std::span<const int> seqs, std::span<const TokenId> tokens, std::vector<float>& logits);

  int position(int seq) const { return positions_[static_cast<std::size_t>(seq)]; }

 private:
  const Model<float>& model_;
  std::vector<int> mem_offsets_;
  std::vector<std::vector<float>> cross_kv_;           // per layer [mem_rows x 2d]
  std::vector<std::vector<std::vector<float>>> self_kv_;  // [layer][seq] rows of 2d
  std::vector<int> positions_;
};

/// Decodes every memory; rngs[i] drives sampling for sequence i (unused when
/// greedy). max_lens, when non-empty, caps each sequence below options.max_len.
std::vector<TokenSeq> decode_batch(const Model<float>& model, std::span<const HiddenStates> memories,
                                   const DecodeOptions& options, std::span<Rng> rngs,
                                   std::span<const int> max_lens = {});

TokenSeq decode(const Model<float>& model, const HiddenStates& states, const DecodeOptions& options, Rng& rng);

/// Generation budget for back-translating a sentence.
int back_translation_max_len(const ModelConfig& config, std::size_t input_len);

/// Back-translation corruption for a batch: style from contexts[i], ranges of
/// zeros (or ranges[i] when given), temperature-scaled sampling.
std::vector<TokenSeq> back_translate(const Model<float>& model, std::span<const TokenSeq> inputs,
                                     std::span<const TokenSeq> contexts, std::span<Rng> rngs,
                                     double temperature = 1.0, std::span<const TuningRanges> ranges = {});

TokenSeq bt_corrupt(const Model<float>& model, const TokenSeq& s_i, const TokenSeq& s_j, Rng& rng,
                    double temperature = 1.0);

/// apply_noise(s_i, spec, replace_source) followed by bt_corrupt with context s_j.
TokenSeq nbt_corrupt(const Model<float>& model, const TokenSeq& s_i, const TokenSeq& s_j, const NoiseSpec& spec,
                     const TokenSeq& replace_source, Rng& rng, double temperature = 1.0);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
  ModelConfig config;
  Vocabulary vocab;
  Model<float> model;
  nlohmann::json metadata;  // optimizer, training config, step, ...
};

/// Binary container: "TSTR", u32 header length, JSON header (version, config,
/// vocabulary, position scheme, metadata, tensor table), raw little-endian
/// float32 tensors. Written to a temporary file and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Model<float>& model, const Vocabulary& vocab,
                     const nlohmann::json& metadata);
Checkpoint load_checkpoint(const std::filesystem::path& path);

inline constexpr int kCheckpointVersion = 1;

}  // namespace textsettr
