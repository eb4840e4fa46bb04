#include "textsettr/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unistd.h>

#include "textsettr/kernels.hpp"

namespace textsettr {

namespace k = kernels;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (d_model <= 0 || num_layers <= 0 || num_heads <= 0 || ffn_dim <= 0 || max_seq_len <= 0)
    throw ModelError("model config: all dimensions must be positive");
  if (vocab_size <= Vocabulary::kNumSpecial) throw ModelError("model config: vocab_size too small");
  if (d_model % num_heads != 0) throw ModelError("model config: d_model must be divisible by num_heads");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"d_model", d_model}, {"num_layers", num_layers}, {"num_heads", num_heads},
          {"ffn_dim", ffn_dim}, {"vocab_size", vocab_size}, {"max_seq_len", max_seq_len}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ModelError("model config must be a JSON object");
  ModelConfig c;
  for (const auto& [key, value] : j.items()) {
    if (!value.is_number_integer()) throw ModelError("model config: '" + key + "' must be an integer");
    const int v = value.get<int>();
    if (key == "d_model") c.d_model = v;
    else if (key == "num_layers") c.num_layers = v;
    else if (key == "num_heads") c.num_heads = v;
    else if (key == "ffn_dim") c.ffn_dim = v;
    else if (key == "vocab_size") c.vocab_size = v;
    else if (key == "max_seq_len") c.max_seq_len = v;
    else throw ModelError("model config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

void DecodeOptions::validate() const {
  if (max_len < 0) throw ModelError("decode: max_len must be non-negative");
  if (mode == Mode::Sample && !(temperature > 0.0)) throw ModelError("decode: temperature must be positive");
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

namespace {

template <class T>
LinearParams<T> make_linear(const std::string& name, int in, int out) {
  return {Parameter<T>(name + ".w", in, out), Parameter<T>(name + ".b", 1, out)};
}

template <class T>
NormParams<T> make_norm(const std::string& name, int d) {
  NormParams<T> n{Parameter<T>(name + ".gamma", 1, d), Parameter<T>(name + ".beta", 1, d)};
  std::fill(n.gamma.value.begin(), n.gamma.value.end(), T(1));
  return n;
}

template <class T>
EncoderStackParams<T> make_encoder_stack(const std::string& prefix, const ModelConfig& c) {
  EncoderStackParams<T> s;
  s.tok_emb = Parameter<T>(prefix + ".tok_emb", c.vocab_size, c.d_model);
  s.pos_emb = Parameter<T>(prefix + ".pos_emb", c.max_seq_len, c.d_model);
  for (int i = 0; i < c.num_layers; ++i) {
    const std::string p = prefix + ".layers." + std::to_string(i);
    s.layers.push_back({make_norm<T>(p + ".ln_attn", c.d_model), make_linear<T>(p + ".qkv", c.d_model, 3 * c.d_model),
                        make_linear<T>(p + ".attn_out", c.d_model, c.d_model), make_norm<T>(p + ".ln_ffn", c.d_model),
                        make_linear<T>(p + ".ff_in", c.d_model, c.ffn_dim),
                        make_linear<T>(p + ".ff_out", c.ffn_dim, c.d_model)});
  }
  s.final_ln = make_norm<T>(prefix + ".final_ln", c.d_model);
  return s;
}

std::uint64_t name_key(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char ch : name) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

template <class T>
Model<T>::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  const ModelConfig& c = config_;
  encoder = make_encoder_stack<T>("encoder", c);
  style_extractor = make_encoder_stack<T>("style_extractor", c);
  decoder.tok_emb = Parameter<T>("decoder.tok_emb", c.vocab_size, c.d_model);
  decoder.pos_emb = Parameter<T>("decoder.pos_emb", c.max_seq_len + 1, c.d_model);
  for (int i = 0; i < c.num_layers; ++i) {
    const std::string p = "decoder.layers." + std::to_string(i);
    decoder.layers.push_back(
        {make_norm<T>(p + ".ln_self", c.d_model), make_linear<T>(p + ".self_qkv", c.d_model, 3 * c.d_model),
         make_linear<T>(p + ".self_out", c.d_model, c.d_model), make_norm<T>(p + ".ln_cross", c.d_model),
         make_linear<T>(p + ".cross_q", c.d_model, c.d_model), make_linear<T>(p + ".cross_kv", c.d_model, 2 * c.d_model),
         make_linear<T>(p + ".cross_out", c.d_model, c.d_model), make_norm<T>(p + ".ln_ffn", c.d_model),
         make_linear<T>(p + ".ff_in", c.d_model, c.ffn_dim), make_linear<T>(p + ".ff_out", c.ffn_dim, c.d_model)});
  }
  decoder.final_ln = make_norm<T>("decoder.final_ln", c.d_model);
  decoder.logits = make_linear<T>("decoder.logits", c.d_model, c.vocab_size);
  range_proj = make_linear<T>("range_proj", 4, c.d_model);
}

template <class T>
Model<T> Model<T>::initialized(const ModelConfig& config, std::uint64_t seed) {
  Model m(config);
  const Rng root(seed);
  const double d = config.d_model;
  const double layers = config.num_layers;
  auto normal = [&](Parameter<T>& p, double std) {
    Rng r = root.split(name_key(p.name));
    for (T& v : p.value) v = static_cast<T>(r.normal(0.0, std));
  };
  auto encoder_stack = [&](EncoderStackParams<T>& s) {
    normal(s.tok_emb, 0.5);
    normal(s.pos_emb, 0.1);
    for (auto& l : s.layers) {
      normal(l.qkv.w, 1.0 / std::sqrt(d));
      normal(l.attn_out.w, 1.0 / std::sqrt(d * 2.0 * layers));
      normal(l.ff_in.w, 1.0 / std::sqrt(d));
      normal(l.ff_out.w, 1.0 / std::sqrt(config.ffn_dim * 2.0 * layers));
    }
  };
  encoder_stack(m.encoder);

  normal(m.decoder.tok_emb, 0.5);
  normal(m.decoder.pos_emb, 0.1);
  for (auto& l : m.decoder.layers) {
    normal(l.self_qkv.w, 1.0 / std::sqrt(d));
    normal(l.self_out.w, 1.0 / std::sqrt(d * 3.0 * layers));
    normal(l.cross_q.w, 1.0 / std::sqrt(d));
    normal(l.cross_kv.w, 1.0 / std::sqrt(d));
    normal(l.cross_out.w, 1.0 / std::sqrt(d * 3.0 * layers));
    normal(l.ff_in.w, 1.0 / std::sqrt(d));
    normal(l.ff_out.w, 1.0 / std::sqrt(config.ffn_dim * 3.0 * layers));
  }
  normal(m.decoder.logits.w, 0.5 / std::sqrt(d));
  normal(m.range_proj.w, 0.5);

  // Style extractor: same initial weights as the encoder.
  std::vector<Parameter<T>*> enc_params, style_params;
  auto collect = [](EncoderStackParams<T>& s, std::vector<Parameter<T>*>& out) {
    out.push_back(&s.tok_emb);
    out.push_back(&s.pos_emb);
    for (auto& l : s.layers)
      for (Parameter<T>* p : {&l.ln_attn.gamma, &l.ln_attn.beta, &l.qkv.w, &l.qkv.b, &l.attn_out.w, &l.attn_out.b,
                              &l.ln_ffn.gamma, &l.ln_ffn.beta, &l.ff_in.w, &l.ff_in.b, &l.ff_out.w, &l.ff_out.b})
        out.push_back(p);
    out.push_back(&s.final_ln.gamma);
    out.push_back(&s.final_ln.beta);
  };
  collect(m.encoder, enc_params);
  collect(m.style_extractor, style_params);
  for (std::size_t i = 0; i < enc_params.size(); ++i) style_params[i]->value = enc_params[i]->value;
  return m;
}

template <class T>
std::size_t Model<T>::num_parameters() const {
  std::size_t n = 0;
  visit([&](const Parameter<T>& p) { n += p.size(); });
  return n;
}

std::uint64_t model_digest(const Model<float>& model) {
  std::uint64_t h = mix64(0x7465787473657474ULL);
  const ModelConfig& c = model.config();
  for (int v : {c.d_model, c.num_layers, c.num_heads, c.ffn_dim, c.vocab_size, c.max_seq_len})
    h = mix64(h ^ static_cast<std::uint64_t>(v));
  model.visit([&](const Parameter<float>& p) {
    h = mix64(h ^ name_key(p.name));
    for (float v : p.value) h = mix64(h ^ std::bit_cast<std::uint32_t>(v));
  });
  return h;
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

namespace {

struct Packed {
  std::vector<int> ids;
  std::vector<int> positions;
  Segments seg;
};

Packed pack(std::span<const TokenSeq> seqs, const ModelConfig& c, bool with_bos, const char* what) {
  Packed p;
  p.seg.offsets.reserve(seqs.size() + 1);
  for (const TokenSeq& s : seqs) {
    if (static_cast<int>(s.size()) > c.max_seq_len)
      throw ModelError(std::string(what) + " of " + std::to_string(s.size()) + " tokens exceeds max_seq_len " +
                       std::to_string(c.max_seq_len));
    int pos = 0;
    if (with_bos) {
      p.ids.push_back(Vocabulary::kBos);
      p.positions.push_back(pos++);
    }
    for (TokenId t : s) {
      if (t < 0 || t >= c.vocab_size) throw ModelError(std::string(what) + " contains token id out of range");
      p.ids.push_back(t);
      p.positions.push_back(pos++);
    }
    p.seg.offsets.push_back(p.seg.offsets.back() + pos);
  }
  return p;
}

template <class T>
typename Tape<T>::Var lin(Tape<T>& t, typename Tape<T>::Var x, const LinearParams<T>& l) {
  return t.linear(x, t.param(l.w), t.param(l.b));
}

template <class T>
typename Tape<T>::Var norm(Tape<T>& t, typename Tape<T>::Var x, const NormParams<T>& n) {
  return t.layer_norm(x, t.param(n.gamma), t.param(n.beta));
}

template <class T>
typename Tape<T>::Var encoder_stack(Tape<T>& t, const EncoderStackParams<T>& p, const ModelConfig& c,
                                    const Packed& in) {
  const int d = c.d_model;
  auto x = t.add(t.gather_rows(t.param(p.tok_emb), in.ids), t.gather_rows(t.param(p.pos_emb), in.positions));
  for (const auto& l : p.layers) {
    auto qkv = lin(t, norm(t, x, l.ln_attn), l.qkv);
    auto a = t.attention(qkv, 0, qkv, d, qkv, 2 * d, d, c.num_heads, in.seg, in.seg, false);
    x = t.add(x, lin(t, a, l.attn_out));
    auto f = t.gelu(lin(t, norm(t, x, l.ln_ffn), l.ff_in));
    x = t.add(x, lin(t, f, l.ff_out));
  }
  return norm(t, x, p.final_ln);
}

}  // namespace

std::vector<int> decoder_targets(std::span<const TokenSeq> targets) {
  std::vector<int> out;
  for (const TokenSeq& s : targets) {
    out.insert(out.end(), s.begin(), s.end());
    out.push_back(Vocabulary::kEos);
  }
  return out;
}

template <class T>
typename Tape<T>::Var style_vectors(Tape<T>& tape, const Model<T>& model, std::span<const TokenSeq> sentences) {
  for (const TokenSeq& s : sentences)
    if (s.empty()) throw ModelError("cannot extract a style from an empty sentence");
  const Packed in = pack(sentences, model.config(), false, "style input");
  auto states = encoder_stack(tape, model.style_extractor, model.config(), in);
  return tape.segment_mean(states, in.seg);
}

template <class T>
EncodedBatch<T> encode_batch(Tape<T>& tape, const Model<T>& model, std::span<const TokenSeq> inputs,
                             typename Tape<T>::Var styles, std::span<const TuningRanges> ranges) {
  const ModelConfig& c = model.config();
  if (ranges.size() != inputs.size()) throw ModelError("encode: one range set per input required");
  if (tape.rows(styles) != static_cast<int>(inputs.size()) || tape.cols(styles) != c.d_model)
    throw ModelError("encode: styles must be [num_inputs x d_model]");
  const Packed in = pack(inputs, c, false, "input");
  auto states = encoder_stack(tape, model.encoder, c, in);
  auto styled = tape.segment_add(states, in.seg, styles);
  std::vector<T> r;
  r.reserve(ranges.size() * 4);
  for (const TuningRanges& tr : ranges)
    for (double v : tr.as_array()) r.push_back(static_cast<T>(v));
  auto range_rows = lin(tape, tape.input(static_cast<int>(ranges.size()), 4, std::move(r)), model.range_proj);
  return {tape.prepend_rows(styled, in.seg, range_rows), prepend_segments(in.seg)};
}

template <class T>
typename Tape<T>::Var decoder_logits(Tape<T>& t, const Model<T>& model, const EncodedBatch<T>& memory,
                                     std::span<const TokenSeq> targets) {
  const ModelConfig& c = model.config();
  const int d = c.d_model;
  if (static_cast<int>(targets.size()) != memory.seg.count()) throw ModelError("decoder: batch size mismatch");
  const Packed in = pack(targets, c, true, "target");
  const auto& p = model.decoder;
  auto x = t.add(t.gather_rows(t.param(p.tok_emb), in.ids), t.gather_rows(t.param(p.pos_emb), in.positions));
  for (const auto& l : p.layers) {
    auto qkv = lin(t, norm(t, x, l.ln_self), l.self_qkv);
    auto a = t.attention(qkv, 0, qkv, d, qkv, 2 * d, d, c.num_heads, in.seg, in.seg, true);
    x = t.add(x, lin(t, a, l.self_out));
    auto q = lin(t, norm(t, x, l.ln_cross), l.cross_q);
    auto kv = lin(t, memory.states, l.cross_kv);
    auto ca = t.attention(q, 0, kv, 0, kv, d, d, c.num_heads, in.seg, memory.seg, false);
    x = t.add(x, lin(t, ca, l.cross_out));
    auto f = t.gelu(lin(t, norm(t, x, l.ln_ffn), l.ff_in));
    x = t.add(x, lin(t, f, l.ff_out));
  }
  return lin(t, norm(t, x, p.final_ln), p.logits);
}

template <class T>
typename Tape<T>::Var reconstruction_loss(Tape<T>& tape, const Model<T>& model, std::span<const TokenSeq> inputs,
                                          typename Tape<T>::Var styles, std::span<const TuningRanges> ranges,
                                          std::span<const TokenSeq> targets) {
  if (targets.size() != inputs.size()) throw ModelError("loss: inputs and targets differ in count");
  const EncodedBatch<T> memory = encode_batch(tape, model, inputs, styles, ranges);
  auto logits = decoder_logits(tape, model, memory, targets);
  return tape.cross_entropy(logits, decoder_targets(targets));
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

std::vector<StyleVector> extract_styles(const Model<float>& model, std::span<const TokenSeq> sentences) {
  constexpr std::size_t kChunk = 512;
  const int d = model.config().d_model;
  std::vector<StyleVector> out;
  out.reserve(sentences.size());
  for (std::size_t begin = 0; begin < sentences.size(); begin += kChunk) {
    const auto chunk = sentences.subspan(begin, std::min(kChunk, sentences.size() - begin));
    Tape<float> tape(false);
    auto v = style_vectors(tape, model, chunk);
    const float* data = tape.data(v);
    for (std::size_t i = 0; i < chunk.size(); ++i) out.emplace_back(data + i * d, data + (i + 1) * d);
  }
  return out;
}

StyleVector extract_style(const Model<float>& model, const TokenSeq& sentence) {
  return extract_styles(model, std::span<const TokenSeq>(&sentence, 1)).front();
}

std::vector<HiddenStates> encode_many(const Model<float>& model, std::span<const TokenSeq> inputs,
                                      std::span<const StyleVector> styles, std::span<const TuningRanges> ranges) {
  const int d = model.config().d_model;
  if (styles.size() != inputs.size()) throw ModelError("encode: one style per input required");
  std::vector<float> flat;
  flat.reserve(styles.size() * static_cast<std::size_t>(d));
  for (const StyleVector& s : styles) {
    if (static_cast<int>(s.size()) != d) throw ModelError("encode: style vector length must equal d_model");
    flat.insert(flat.end(), s.begin(), s.end());
  }
  Tape<float> tape(false);
  auto sv = tape.input(static_cast<int>(styles.size()), d, std::move(flat));
  const EncodedBatch<float> enc = encode_batch(tape, model, inputs, sv, ranges);
  const float* data = tape.data(enc.states);
  std::vector<HiddenStates> out(inputs.size());
  for (int i = 0; i < enc.seg.count(); ++i) {
    HiddenStates& h = out[static_cast<std::size_t>(i)];
    h.rows = enc.seg.length(i);
    h.cols = d;
    h.values.assign(data + static_cast<long>(enc.seg.begin(i)) * d,
                    data + static_cast<long>(enc.seg.begin(i) + h.rows) * d);
  }
  return out;
}

HiddenStates encode(const Model<float>& model, const TokenSeq& input, const StyleVector& style,
                    const TuningRanges& ranges) {
  return encode_many(model, std::span<const TokenSeq>(&input, 1), std::span<const StyleVector>(&style, 1),
                     std::span<const TuningRanges>(&ranges, 1))
      .front();
}

IncrementalDecoder::IncrementalDecoder(const Model<float>& model, std::span<const HiddenStates> memories)
    : model_(model) {
  const ModelConfig& c = model.config();
  const int d = c.d_model;
  mem_offsets_.push_back(0);
  std::vector<float> mem;
  for (const HiddenStates& h : memories) {
    if (h.cols != d || h.rows <= 0) throw ModelError("decoder memory has the wrong shape");
    mem.insert(mem.end(), h.values.begin(), h.values.end());
    mem_offsets_.push_back(mem_offsets_.back() + h.rows);
  }
  const int rows = mem_offsets_.back();
  for (const auto& l : model.decoder.layers) {
    std::vector<float> kv(static_cast<std::size_t>(rows) * 2 * d);
    k::gemm(rows, d, 2 * d, mem.data(), l.cross_kv.w.value.data(), kv.data(), false);
    k::add_bias(rows, 2 * d, kv.data(), l.cross_kv.b.value.data());
    cross_kv_.push_back(std::move(kv));
  }
  self_kv_.assign(model.decoder.layers.size(), std::vector<std::vector<float>>(memories.size()));
  positions_.assign(memories.size(), 0);
}

void IncrementalDecoder::step(std::span<const int> seqs, std::span<const TokenId> tokens,
                              std::vector<float>& logits) {
  const ModelConfig& c = model_.config();
  const int d = c.d_model, heads = c.num_heads, dh = d / heads, ffn = c.ffn_dim, vocab = c.vocab_size;
  const int b = static_cast<int>(seqs.size());
  if (tokens.size() != seqs.size()) throw ModelError("decoder step: one token per sequence required");
  const auto& p = model_.decoder;
  const auto B = static_cast<std::size_t>(b);

  std::vector<float> x(B * d), h(B * d), tmp(B * d), qkv(B * 3 * d), attn(B * d), ff(B * ffn), ffa(B * ffn);
  std::vector<float> probs;
  for (int i = 0; i < b; ++i) {
    const int seq = seqs[static_cast<std::size_t>(i)];
    const int pos = positions_[static_cast<std::size_t>(seq)];
    const TokenId tok = tokens[static_cast<std::size_t>(i)];
    if (pos >= p.pos_emb.rows) throw ModelError("decoder step past max_seq_len");
    if (tok < 0 || tok >= vocab) throw ModelError("decoder step: token id out of range");
    for (int j = 0; j < d; ++j)
      x[static_cast<std::size_t>(i) * d + j] = p.tok_emb.value[static_cast<std::size_t>(tok) * d + j] +
                                               p.pos_emb.value[static_cast<std::size_t>(pos) * d + j];
  }
  auto residual = [&](const LinearParams<float>& l, const float* in, int in_dim) {
    k::gemm(b, in_dim, d, in, l.w.value.data(), tmp.data(), false);
    k::add_bias(b, d, tmp.data(), l.b.value.data());
    for (std::size_t i = 0; i < B * d; ++i) x[i] = x[i] + tmp[i];
  };
  auto ln = [&](const NormParams<float>& n) {
    k::layer_norm_forward(b, d, x.data(), n.gamma.value.data(), n.beta.value.data(), h.data(),
                          static_cast<float*>(nullptr), static_cast<float*>(nullptr));
  };

  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const auto& l = p.layers[li];
    ln(l.ln_self);
    k::gemm(b, d, 3 * d, h.data(), l.self_qkv.w.value.data(), qkv.data(), false);
    k::add_bias(b, 3 * d, qkv.data(), l.self_qkv.b.value.data());
    for (int i = 0; i < b; ++i) {
      auto& cache = self_kv_[li][static_cast<std::size_t>(seqs[static_cast<std::size_t>(i)])];
      const float* row = qkv.data() + static_cast<std::size_t>(i) * 3 * d;
      cache.insert(cache.end(), row + d, row + 3 * d);
      const int lk = static_cast<int>(cache.size() / (2 * static_cast<std::size_t>(d)));
      probs.resize(static_cast<std::size_t>(lk));
      for (int hh = 0; hh < heads; ++hh)
        k::attention_head_forward(1, lk, dh, row + hh * dh, 3 * d, cache.data() + hh * dh, 2 * d,
                                  cache.data() + d + hh * dh, 2 * d, lk, probs.data(),
                                  attn.data() + static_cast<std::size_t>(i) * d + hh * dh, d);
    }
    residual(l.self_out, attn.data(), d);

    ln(l.ln_cross);
    k::gemm(b, d, d, h.data(), l.cross_q.w.value.data(), qkv.data(), false);
    k::add_bias(b, d, qkv.data(), l.cross_q.b.value.data());
    for (int i = 0; i < b; ++i) {
      const int seq = seqs[static_cast<std::size_t>(i)];
      const int m0 = mem_offsets_[static_cast<std::size_t>(seq)];
      const int lk = mem_offsets_[static_cast<std::size_t>(seq) + 1] - m0;
      const float* kv = cross_kv_[li].data() + static_cast<std::size_t>(m0) * 2 * d;
      probs.resize(static_cast<std::size_t>(lk));
      for (int hh = 0; hh < heads; ++hh)
        k::attention_head_forward(1, lk, dh, qkv.data() + static_cast<std::size_t>(i) * d + hh * dh, d, kv + hh * dh,
                                  2 * d, kv + d + hh * dh, 2 * d, lk, probs.data(),
                                  attn.data() + static_cast<std::size_t>(i) * d + hh * dh, d);
    }
    residual(l.cross_out, attn.data(), d);

    ln(l.ln_ffn);
    k::gemm(b, d, ffn, h.data(), l.ff_in.w.value.data(), ff.data(), false);
    k::add_bias(b, ffn, ff.data(), l.ff_in.b.value.data());
    k::gelu_forward(b * ffn, ff.data(), ffa.data());
    residual(l.ff_out, ffa.data(), ffn);
  }
  ln(p.final_ln);
  logits.resize(B * vocab);
  k::gemm(b, d, vocab, h.data(), p.logits.w.value.data(), logits.data(), false);
  k::add_bias(b, vocab, logits.data(), p.logits.b.value.data());
  for (int seq : seqs) ++positions_[static_cast<std::size_t>(seq)];
}

namespace {

TokenId pick_token(const float* logits, int vocab, const DecodeOptions& options, Rng* rng) {
  if (options.mode == DecodeOptions::Mode::Greedy)
    return static_cast<TokenId>(std::max_element(logits, logits + vocab) - logits);
  const double mx = *std::max_element(logits, logits + vocab);
  std::vector<double> w(static_cast<std::size_t>(vocab));
  double total = 0.0;
  for (int j = 0; j < vocab; ++j) {
    w[static_cast<std::size_t>(j)] = std::exp((logits[j] - mx) / options.temperature);
    total += w[static_cast<std::size_t>(j)];
  }
  double u = rng->uniform() * total;
  for (int j = 0; j < vocab; ++j) {
    u -= w[static_cast<std::size_t>(j)];
    if (u < 0.0) return static_cast<TokenId>(j);
  }
  // Rounding left a sliver of mass: fall back to the last token with weight.
  for (int j = vocab - 1; j >= 0; --j)
    if (w[static_cast<std::size_t>(j)] > 0.0) return static_cast<TokenId>(j);
  return Vocabulary::kEos;
}

}  // namespace

std::vector<TokenSeq> decode_batch(const Model<float>& model, std::span<const HiddenStates> memories,
                                   const DecodeOptions& options, std::span<Rng> rngs, std::span<const int> max_lens) {
  options.validate();
  const std::size_t n = memories.size();
  const bool sampling = options.mode == DecodeOptions::Mode::Sample;
  if (sampling && rngs.size() != n) throw ModelError("decode: one rng per sequence required for sampling");
  if (!max_lens.empty() && max_lens.size() != n) throw ModelError("decode: one max_len per sequence required");
  const int vocab = model.config().vocab_size;

  std::vector<TokenSeq> out(n);
  std::vector<int> limit(n);
  std::vector<int> active;
  std::vector<TokenId> last;
  for (std::size_t i = 0; i < n; ++i) {
    limit[i] = std::min(options.max_len, model.config().max_seq_len);
    if (!max_lens.empty()) limit[i] = std::min(limit[i], max_lens[i]);
    if (limit[i] > 0) {
      active.push_back(static_cast<int>(i));
      last.push_back(Vocabulary::kBos);
    }
  }
  if (active.empty()) return out;

  IncrementalDecoder dec(model, memories);
  std::vector<float> logits;
  while (!active.empty()) {
    dec.step(active, last, logits);
    std::vector<int> next_active;
    std::vector<TokenId> next_last;
    for (std::size_t a = 0; a < active.size(); ++a) {
      const auto i = static_cast<std::size_t>(active[a]);
      const TokenId tok =
          pick_token(logits.data() + a * static_cast<std::size_t>(vocab), vocab, options, sampling ? &rngs[i] : nullptr);
      if (tok == Vocabulary::kEos) continue;
      out[i].push_back(tok);
      if (static_cast<int>(out[i].size()) >= limit[i]) continue;
      next_active.push_back(active[a]);
      next_last.push_back(tok);
    }
    active = std::move(next_active);
    last = std::move(next_last);
  }
  return out;
}

TokenSeq decode(const Model<float>& model, const HiddenStates& states, const DecodeOptions& options, Rng& rng) {
  return decode_batch(model, std::span<const HiddenStates>(&states, 1), options, std::span<Rng>(&rng, 1)).front();
}

int back_translation_max_len(const ModelConfig& config, std::size_t input_len) {
  return static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(config.max_seq_len), input_len + 8));
}

std::vector<TokenSeq> back_translate(const Model<float>& model, std::span<const TokenSeq> inputs,
                                     std::span<const TokenSeq> contexts, std::span<Rng> rngs, double temperature,
                                     std::span<const TuningRanges> ranges) {
  if (contexts.size() != inputs.size() || rngs.size() != inputs.size())
    throw ModelError("back_translate: inputs, contexts and rngs must align");
  if (!ranges.empty() && ranges.size() != inputs.size()) throw ModelError("back_translate: one range set per input");
  const std::vector<StyleVector> styles = extract_styles(model, contexts);
  std::vector<TuningRanges> rs(ranges.begin(), ranges.end());
  if (rs.empty()) rs.assign(inputs.size(), TuningRanges{});
  const std::vector<HiddenStates> memories = encode_many(model, inputs, styles, rs);
  std::vector<int> max_lens;
  max_lens.reserve(inputs.size());
  for (const TokenSeq& s : inputs) max_lens.push_back(back_translation_max_len(model.config(), s.size()));
  DecodeOptions opts;
  opts.mode = DecodeOptions::Mode::Sample;
  opts.temperature = temperature;
  opts.max_len = model.config().max_seq_len;
  return decode_batch(model, memories, opts, rngs, max_lens);
}

TokenSeq bt_corrupt(const Model<float>& model, const TokenSeq& s_i, const TokenSeq& s_j, Rng& rng,
                    double temperature) {
  return back_translate(model, std::span<const TokenSeq>(&s_i, 1), std::span<const TokenSeq>(&s_j, 1),
                        std::span<Rng>(&rng, 1), temperature)
      .front();
}

TokenSeq nbt_corrupt(const Model<float>& model, const TokenSeq& s_i, const TokenSeq& s_j, const NoiseSpec& spec,
                     const TokenSeq& replace_source, Rng& rng, double temperature) {
  const TokenSeq noised = apply_noise(s_i, spec, replace_source, rng);
  return bt_corrupt(model, noised, s_j, rng, temperature);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {
constexpr char kMagic[4] = {'T', 'S', 'T', 'R'};
static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model, const Vocabulary& vocab,
                     const nlohmann::json& metadata) {
  if (static_cast<int>(vocab.size()) != model.config().vocab_size)
    throw ModelError("checkpoint: vocabulary size does not match the model config");
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  model.visit([&](const Parameter<float>& p) {
    tensors.push_back({{"name", p.name}, {"rows", p.rows}, {"cols", p.cols}, {"offset", offset}});
    offset += p.size();
  });
  char digest[17];
  std::snprintf(digest, sizeof digest, "%016llx", static_cast<unsigned long long>(model_digest(model)));
  const nlohmann::json header = {{"format", "textsettr-checkpoint"},
                                 {"version", kCheckpointVersion},
                                 {"config", model.config().to_json()},
                                 {"vocab", vocab.tokens()},
                                 {"position_encoding", "learned-absolute"},
                                 {"dtype", "float32-le"},
                                 {"digest", digest},
                                 {"metadata", metadata},
                                 {"tensors", tensors}};
  const std::string text = header.dump();

  std::filesystem::path tmp = path;
  tmp += ".tmp-" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ModelError("cannot open checkpoint for writing: " + path.string());
    out.write(kMagic, 4);
    const auto len = static_cast<std::uint32_t>(text.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    model.visit([&](const Parameter<float>& p) {
      out.write(reinterpret_cast<const char*>(p.value.data()), static_cast<std::streamsize>(p.size() * sizeof(float)));
    });
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw ModelError("failed writing checkpoint: " + path.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelError("cannot open checkpoint: " + path.string());
  char magic[4];
  std::uint32_t len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw ModelError("not a checkpoint file: " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) throw ModelError("truncated checkpoint header: " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ModelError("corrupt checkpoint header: " + std::string(e.what()));
  }
  try {
    if (header.at("version").get<int>() != kCheckpointVersion)
      throw ModelError("unsupported checkpoint version " + header.at("version").dump());
    const ModelConfig config = ModelConfig::from_json(header.at("config"));
    Vocabulary vocab = Vocabulary::from_tokens(header.at("vocab").get<std::vector<std::string>>());
    if (static_cast<int>(vocab.size()) != config.vocab_size)
      throw ModelError("checkpoint vocabulary does not match its config");
    Model<float> model(config);

    std::unordered_map<std::string, nlohmann::json> table;
    for (const auto& t : header.at("tensors")) table.emplace(t.at("name").get<std::string>(), t);
    const std::streamoff data_start = in.tellg();
    model.visit([&](Parameter<float>& p) {
      auto it = table.find(p.name);
      if (it == table.end()) throw ModelError("checkpoint missing tensor " + p.name);
      if (it->second.at("rows").get<int>() != p.rows || it->second.at("cols").get<int>() != p.cols)
        throw ModelError("checkpoint tensor " + p.name + " has the wrong shape");
      const auto off = it->second.at("offset").get<std::uint64_t>();
      in.seekg(data_start + static_cast<std::streamoff>(off * sizeof(float)));
      in.read(reinterpret_cast<char*>(p.value.data()), static_cast<std::streamsize>(p.size() * sizeof(float)));
      if (!in) throw ModelError("truncated checkpoint tensor " + p.name);
    });
    return Checkpoint{config, std::move(vocab), std::move(model), header.value("metadata", nlohmann::json::object())};
  } catch (const nlohmann::json::exception& e) {
    throw ModelError("malformed checkpoint header: " + std::string(e.what()));
  } catch (const TokenizerError& e) {
    throw ModelError("malformed checkpoint vocabulary: " + std::string(e.what()));
  }
}

// ---------------------------------------------------------------------------

#define TEXTSETTR_INSTANTIATE_MODEL(T)                                                                              \
  template class Model<T>;                                                                                         \
  template Tape<T>::Var style_vectors<T>(Tape<T>&, const Model<T>&, std::span<const TokenSeq>);                    \
  template EncodedBatch<T> encode_batch<T>(Tape<T>&, const Model<T>&, std::span<const TokenSeq>, Tape<T>::Var,     \
                                           std::span<const TuningRanges>);                                         \
  template Tape<T>::Var decoder_logits<T>(Tape<T>&, const Model<T>&, const EncodedBatch<T>&,                       \
                                          std::span<const TokenSeq>);                                              \
  template Tape<T>::Var reconstruction_loss<T>(Tape<T>&, const Model<T>&, std::span<const TokenSeq>, Tape<T>::Var, \
                                               std::span<const TuningRanges>, std::span<const TokenSeq>);

TEXTSETTR_INSTANTIATE_MODEL(float)
TEXTSETTR_INSTANTIATE_MODEL(double)

#undef TEXTSETTR_INSTANTIATE_MODEL

}  // namespace textsettr
