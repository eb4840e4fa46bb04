#include "textsettr/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace textsettr {

namespace {

std::uint64_t fnv1a(std::uint64_t h, std::string_view s) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

bool same_decode(const DecodeOptions& a, const DecodeOptions& b) {
  return a.mode == b.mode && a.temperature == b.temperature && a.max_len == b.max_len;
}

TuningRanges parse_range_pair(const nlohmann::json& add, const nlohmann::json& del) {
  auto pair = [](const nlohmann::json& j, const char* what) {
    if (!j.is_array() || j.size() != 2) throw InferenceError(std::string(what) + " must be [low, high]");
    return std::pair{j[0].get<double>(), j[1].get<double>()};
  };
  auto [al, ah] = pair(add, "add_range");
  auto [dl, dh] = pair(del, "delete_range");
  return {al, ah, dl, dh};
}

}  // namespace

void ExemplarSet::validate() const {
  if (sentences.empty()) throw InferenceError("exemplar set '" + name + "' is empty");
  if (sentences.size() > kMaxExemplars)
    throw InferenceError("exemplar set '" + name + "' has more than " + std::to_string(kMaxExemplars) + " sentences");
}

std::uint64_t ExemplarSet::digest() const {
  std::uint64_t h = 14695981039346656037ULL;
  for (const auto& s : sentences) {
    h = fnv1a(h, s);
    h = fnv1a(h, std::string_view("\n", 1));
  }
  return h;
}

std::string style_mode_name(StyleMode m) { return m == StyleMode::Delta ? "delta" : "overwrite"; }

StyleMode parse_style_mode(std::string_view name) {
  if (name == "delta") return StyleMode::Delta;
  if (name == "overwrite") return StyleMode::Overwrite;
  throw InferenceError("unknown mode '" + std::string(name) + "' (expected delta or overwrite)");
}

void TransferRequest::validate() const {
  if (!target) throw InferenceError("transfer request needs a target exemplar set");
  if (mode == StyleMode::Delta && !source) throw InferenceError("delta mode needs a source exemplar set");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InferenceError("lambda must be a finite non-negative number");
  if (!ranges.valid()) throw InferenceError("tuning ranges must satisfy 0 <= low <= high <= 1");
  decode.validate();
  target->validate();
  if (source) source->validate();
}

// ---------------------------------------------------------------------------
// Exemplar config
// ---------------------------------------------------------------------------

std::shared_ptr<const ExemplarSet> ExemplarConfig::find(std::string_view cls) const {
  for (const auto& c : classes)
    if (c->name == cls) return c;
  return nullptr;
}

void ExemplarConfig::validate() const {
  if (classes.size() < 2) throw InferenceError("exemplar config needs at least two classes");
  for (std::size_t i = 0; i < classes.size(); ++i) {
    classes[i]->validate();
    for (std::size_t j = 0; j < i; ++j)
      if (classes[j]->name == classes[i]->name) throw InferenceError("duplicate class '" + classes[i]->name + "'");
  }
  if (!find(source)) throw InferenceError("source class '" + source + "' is not defined");
  if (!find(target)) throw InferenceError("target class '" + target + "' is not defined");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InferenceError("lambda must be a finite non-negative number");
  if (!ranges.valid()) throw InferenceError("tuning ranges must satisfy 0 <= low <= high <= 1");
  decode.validate();
}

nlohmann::json ExemplarConfig::to_json() const {
  nlohmann::json cls = nlohmann::json::object();
  for (const auto& c : classes) cls[c->name] = c->sentences;
  return {
      {"name", name},
      {"classes", cls},
      {"source", source},
      {"target", target},
      {"lambda", lambda},
      {"add_range", {ranges.add_low, ranges.add_high}},
      {"delete_range", {ranges.del_low, ranges.del_high}},
      {"mode", style_mode_name(mode)},
      {"decode",
       {{"mode", decode.mode == DecodeOptions::Mode::Greedy ? "greedy" : "sample"},
        {"temperature", decode.temperature},
        {"max_len", decode.max_len}}},
  };
}

ExemplarConfig ExemplarConfig::from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known{"name",      "classes",      "source", "target", "lambda",
                                              "add_range", "delete_range", "mode",   "decode"};
  if (!j.is_object()) throw InferenceError("exemplar config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw InferenceError("unknown exemplar config key '" + key + "'");
  ExemplarConfig c;
  try {
    c.name = j.value("name", std::string("transfer"));
    if (!j.contains("classes") || !j["classes"].is_object()) throw InferenceError("exemplar config needs 'classes'");
    // nlohmann orders object keys; keep that order so configs round-trip.
    for (const auto& [cls, sentences] : j["classes"].items()) {
      auto set = std::make_shared<ExemplarSet>();
      set->name = cls;
      set->sentences = sentences.get<std::vector<std::string>>();
      c.classes.push_back(std::move(set));
    }
    if (c.classes.size() >= 2) {
      c.source = c.classes[0]->name;
      c.target = c.classes[1]->name;
    }
    c.source = j.value("source", c.source);
    c.target = j.value("target", c.target);
    c.lambda = j.value("lambda", c.lambda);
    const nlohmann::json add = j.value("add_range", nlohmann::json::array({c.ranges.add_low, c.ranges.add_high}));
    const nlohmann::json del = j.value("delete_range", nlohmann::json::array({c.ranges.del_low, c.ranges.del_high}));
    c.ranges = parse_range_pair(add, del);
    if (j.contains("mode")) c.mode = parse_style_mode(j["mode"].get<std::string>());
    if (j.contains("decode")) {
      const auto& d = j["decode"];
      for (const auto& [key, _] : d.items())
        if (key != "mode" && key != "temperature" && key != "max_len")
          throw InferenceError("unknown decode key '" + key + "'");
      const std::string m = d.value("mode", std::string("greedy"));
      if (m == "greedy")
        c.decode.mode = DecodeOptions::Mode::Greedy;
      else if (m == "sample")
        c.decode.mode = DecodeOptions::Mode::Sample;
      else
        throw InferenceError("decode mode must be greedy or sample");
      c.decode.temperature = d.value("temperature", c.decode.temperature);
      c.decode.max_len = d.value("max_len", c.decode.max_len);
    }
  } catch (const nlohmann::json::exception& e) {
    throw InferenceError(std::string("malformed exemplar config: ") + e.what());
  } catch (const ModelError& e) {
    throw InferenceError(e.what());
  }
  try {
    c.validate();
  } catch (const ModelError& e) {
    throw InferenceError(e.what());
  }
  return c;
}

ExemplarConfig load_exemplar_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InferenceError("cannot open exemplar config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InferenceError("exemplar config " + path.string() + ": " + e.what());
  }
  return ExemplarConfig::from_json(j);
}

// ---------------------------------------------------------------------------
// Style arithmetic
// ---------------------------------------------------------------------------

StyleVector target_style(const StyleVector& v_x, const StyleVector& v_src, const StyleVector& v_trg, double lambda) {
  if (v_src.size() != v_x.size() || v_trg.size() != v_x.size())
    throw InferenceError("style vectors must have equal length");
  StyleVector out(v_x.size());
  const float l = static_cast<float>(lambda);
  for (std::size_t i = 0; i < v_x.size(); ++i) out[i] = v_x[i] + l * (v_trg[i] - v_src[i]);
  return out;
}

double l2_norm(const StyleVector& v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

StyleVector mean_exemplar_style(const Model<float>& model, const Vocabulary& vocab, const ExemplarSet& set) {
  set.validate();
  std::vector<TokenSeq> seqs;
  seqs.reserve(set.sentences.size());
  for (const auto& s : set.sentences) {
    TokenSeq t = vocab.encode(s);
    if (t.empty()) throw InferenceError("exemplar set '" + set.name + "' contains an empty sentence");
    if (static_cast<int>(t.size()) > model.config().max_seq_len)
      throw InferenceError("exemplar in '" + set.name + "' exceeds max_seq_len");
    seqs.push_back(std::move(t));
  }
  const auto styles = extract_styles(model, seqs);
  std::vector<double> acc(static_cast<std::size_t>(model.config().d_model), 0.0);
  for (const auto& v : styles)
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
  StyleVector mean(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) mean[i] = static_cast<float>(acc[i] / static_cast<double>(styles.size()));
  return mean;
}

StyleVector StyleCache::get(const Model<float>& model, std::uint64_t model_key, const Vocabulary& vocab,
                            const ExemplarSet& set) {
  const auto key = std::pair{model_key, set.digest()};
  {
    std::lock_guard lock(mu_);
    if (auto it = entries_.find(key); it != entries_.end()) return it->second;
  }
  StyleVector v = mean_exemplar_style(model, vocab, set);
  std::lock_guard lock(mu_);
  return entries_.emplace(key, std::move(v)).first->second;
}

std::size_t StyleCache::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

void StyleCache::clear() {
  std::lock_guard lock(mu_);
  entries_.clear();
}

nlohmann::json TransferResult::to_json() const {
  return {
      {"input", input},
      {"output", output},
      {"measured_add_rate", measured.add_rate},
      {"measured_delete_rate", measured.delete_rate},
      {"style_norms", {{"input", input_style_norm}, {"target", target_style_norm}, {"delta", delta_norm}}},
  };
}

// ---------------------------------------------------------------------------
// Restyler
// ---------------------------------------------------------------------------

Restyler::Restyler(const Model<float>& model, const Vocabulary& vocab)
    : model_(model), vocab_(vocab), model_key_(model_digest(model)) {
  if (static_cast<int>(vocab.size()) != model.config().vocab_size)
    throw InferenceError("vocabulary size does not match the model");
}

TokenSeq Restyler::tokenize(std::string_view text) const {
  TokenSeq t = vocab_.encode(text);
  if (t.empty()) throw InferenceError("empty input");
  if (static_cast<int>(t.size()) > model_.config().max_seq_len)
    throw InferenceError("input has " + std::to_string(t.size()) + " tokens; max_seq_len is " +
                         std::to_string(model_.config().max_seq_len));
  return t;
}

StyleVector Restyler::exemplar_style(const ExemplarSet& set) const {
  return cache_.get(model_, model_key_, vocab_, set);
}

StyleVector Restyler::request_style(const TransferRequest& req, const StyleVector& input_style) const {
  const StyleVector trg = exemplar_style(*req.target);
  if (req.mode == StyleMode::Overwrite) return trg;
  return target_style(input_style, exemplar_style(*req.source), trg, req.lambda);
}

std::vector<TransferResult> Restyler::run(std::vector<Job> jobs, std::span<Rng> rngs) const {
  constexpr std::size_t kChunk = 256;
  std::vector<TransferResult> out(jobs.size());
  std::size_t begin = 0;
  while (begin < jobs.size()) {
    std::size_t end = begin + 1;
    while (end < jobs.size() && end - begin < kChunk && same_decode(jobs[end].decode, jobs[begin].decode)) ++end;
    std::vector<TokenSeq> inputs;
    std::vector<StyleVector> styles;
    std::vector<TuningRanges> ranges;
    for (std::size_t i = begin; i < end; ++i) {
      inputs.push_back(jobs[i].tokens);
      styles.push_back(jobs[i].style);
      ranges.push_back(jobs[i].ranges);
    }
    const auto memories = encode_many(model_, inputs, styles, ranges);
    const auto decoded = decode_batch(model_, memories, jobs[begin].decode, rngs.subspan(begin, end - begin));
    for (std::size_t i = begin; i < end; ++i) {
      TokenSeq toks = decoded[i - begin];
      TransferResult& r = out[i];
      r.input = std::move(jobs[i].input);
      r.output = vocab_.decode(toks);
      r.measured = compute_rates(jobs[i].tokens, toks);
      r.input_style_norm = jobs[i].input_norm;
      r.target_style_norm = l2_norm(jobs[i].style);
      r.delta_norm = jobs[i].delta_norm;
    }
    begin = end;
  }
  return out;
}

std::vector<TransferResult> Restyler::transfer_many(std::span<const TransferRequest> reqs, std::uint64_t seed) const {
  std::vector<Job> jobs(reqs.size());
  std::vector<TokenSeq> tokens;
  tokens.reserve(reqs.size());
  for (const auto& r : reqs) {
    r.validate();
    tokens.push_back(tokenize(r.input));
  }
  const auto input_styles = extract_styles(model_, tokens);
  std::vector<Rng> rngs;
  rngs.reserve(reqs.size());
  const Rng root(seed);
  for (std::size_t i = 0; i < reqs.size(); ++i) {
    Job& j = jobs[i];
    j.style = request_style(reqs[i], input_styles[i]);
    j.input_norm = l2_norm(input_styles[i]);
    StyleVector delta(j.style.size());
    for (std::size_t k = 0; k < delta.size(); ++k) delta[k] = j.style[k] - input_styles[i][k];
    j.delta_norm = l2_norm(delta);
    j.tokens = std::move(tokens[i]);
    j.ranges = reqs[i].ranges;
    j.decode = reqs[i].decode;
    j.input = reqs[i].input;
    rngs.push_back(root.split(i));
  }
  return run(std::move(jobs), rngs);
}

TransferResult Restyler::transfer(const TransferRequest& req, Rng& rng) const {
  req.validate();
  Job j;
  j.tokens = tokenize(req.input);
  const StyleVector own = extract_style(model_, j.tokens);
  j.style = request_style(req, own);
  j.input_norm = l2_norm(own);
  StyleVector delta(own.size());
  for (std::size_t k = 0; k < delta.size(); ++k) delta[k] = j.style[k] - own[k];
  j.delta_norm = l2_norm(delta);
  j.ranges = req.ranges;
  j.decode = req.decode;
  j.input = req.input;
  std::vector<Job> jobs;
  jobs.push_back(std::move(j));
  return run(std::move(jobs), std::span<Rng>(&rng, 1)).front();
}

TransferResult Restyler::complete(const std::string& prompt, std::shared_ptr<const ExemplarSet> source,
                                  std::shared_ptr<const ExemplarSet> target, double lambda) const {
  TransferRequest req;
  req.input = prompt;
  req.source = std::move(source);
  req.target = std::move(target);
  req.lambda = lambda;
  req.ranges = kCompleteRanges;
  req.mode = StyleMode::Delta;
  Rng rng(0);
  return transfer(req, rng);
}

TransferResult Restyler::shorten(const std::string& input) const {
  Job j;
  j.tokens = tokenize(input);
  j.style = extract_style(model_, j.tokens);
  j.input_norm = l2_norm(j.style);
  j.ranges = kShortenRanges;
  j.input = input;
  std::vector<Job> jobs;
  jobs.push_back(std::move(j));
  Rng rng(0);
  return run(std::move(jobs), std::span<Rng>(&rng, 1)).front();
}

TransferResult Restyler::augment(const std::string& input, double sigma, const TuningRanges& ranges, Rng& rng) const {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw InferenceError("sigma must be a finite non-negative number");
  if (!ranges.valid()) throw InferenceError("tuning ranges must satisfy 0 <= low <= high <= 1");
  Job j;
  j.tokens = tokenize(input);
  const StyleVector own = extract_style(model_, j.tokens);
  j.style = own;
  StyleVector noise(own.size());
  for (std::size_t k = 0; k < own.size(); ++k) {
    noise[k] = static_cast<float>(rng.normal(0.0, sigma));
    j.style[k] += noise[k];
  }
  j.input_norm = l2_norm(own);
  j.delta_norm = l2_norm(noise);
  j.ranges = ranges;
  j.input = input;
  std::vector<Job> jobs;
  jobs.push_back(std::move(j));
  return run(std::move(jobs), std::span<Rng>(&rng, 1)).front();
}

}  // namespace textsettr
