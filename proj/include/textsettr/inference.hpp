#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "textsettr/corruption.hpp"
#include "textsettr/model.hpp"
#include "textsettr/rng.hpp"
#include "textsettr/tokenizer.hpp"

namespace textsettr {

class InferenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExemplarSet {
  std::string name;
  std::vector<std::string> sentences;

  /// Throws InferenceError when empty or larger than kMaxExemplars.
  void validate() const;
  /// Order-sensitive hash of the sentences (name excluded).
  std::uint64_t digest() const;

  static constexpr std::size_t kMaxExemplars = 1000;
};

enum class StyleMode { Delta, Overwrite };

std::string style_mode_name(StyleMode m);
StyleMode parse_style_mode(std::string_view name);

struct TransferRequest {
  std::string input;
  std::shared_ptr<const ExemplarSet> source;
  std::shared_ptr<const ExemplarSet> target;
  double lambda = 4.0;
  TuningRanges ranges{0.1, 0.3, 0.1, 0.3};
  StyleMode mode = StyleMode::Delta;
  DecodeOptions decode;

  void validate() const;
};

/// Exemplar/settings file: named classes with their sentences plus the
/// default transfer settings for the axis.
struct ExemplarConfig {
  std::string name;
  std::vector<std::shared_ptr<const ExemplarSet>> classes;
  std::string source;  // default direction
  std::string target;
  double lambda = 4.0;
  TuningRanges ranges{0.1, 0.3, 0.1, 0.3};
  StyleMode mode = StyleMode::Delta;
  DecodeOptions decode;

  std::shared_ptr<const ExemplarSet> find(std::string_view cls) const;  // nullptr if absent
  void validate() const;
  nlohmann::json to_json() const;
  static ExemplarConfig from_json(const nlohmann::json& j);
};

ExemplarConfig load_exemplar_config(const std::filesystem::path& path);

/// v_x + lambda * (v_trg - v_src), element by element.
StyleVector target_style(const StyleVector& v_x, const StyleVector& v_src, const StyleVector& v_trg, double lambda);

/// Mean of the exemplars' style vectors.
StyleVector mean_exemplar_style(const Model<float>& model, const Vocabulary& vocab, const ExemplarSet& set);

/// Thread-safe cache of exemplar means keyed by (model digest, set digest).
class StyleCache {
 public:
  StyleVector get(const Model<float>& model, std::uint64_t model_key, const Vocabulary& vocab,
                  const ExemplarSet& set);
  std::size_t size() const;
  void clear();

 private:
  mutable std::mutex mu_;
  std::map<std::pair<std::uint64_t, std::uint64_t>, StyleVector> entries_;
};

struct TransferResult {
  std::string input;
  std::string output;
  RateStats measured;
  double input_style_norm = 0.0;
  double target_style_norm = 0.0;
  double delta_norm = 0.0;

  nlohmann::json to_json() const;
};

/// Inference over one loaded model. Safe to share between threads.
class Restyler {
 public:
  Restyler(const Model<float>& model, const Vocabulary& vocab);

  const Model<float>& model() const { return model_; }
  const Vocabulary& vocab() const { return vocab_; }
  std::uint64_t model_key() const { return model_key_; }

  /// Tokenizes an input; throws InferenceError when empty or too long.
  TokenSeq tokenize(std::string_view text) const;

  StyleVector exemplar_style(const ExemplarSet& set) const;

  /// The decoding style for a request given the input's own style.
  StyleVector request_style(const TransferRequest& req, const StyleVector& input_style) const;

  TransferResult transfer(const TransferRequest& req, Rng& rng) const;

  /// Request i draws from Rng(seed).split(i); identical to calling transfer
  /// with that rng.
  std::vector<TransferResult> transfer_many(std::span<const TransferRequest> reqs, std::uint64_t seed) const;

  /// Delta transfer with add [0.4, 0.7] and delete [0, 0].
  TransferResult complete(const std::string& prompt, std::shared_ptr<const ExemplarSet> source,
                          std::shared_ptr<const ExemplarSet> target, double lambda) const;

  /// The input's own style, add [0, 0.05], delete [0.4, 0.9], greedy.
  TransferResult shorten(const std::string& input) const;

  /// The input's style plus i.i.d. N(0, sigma) noise (sigma is a standard
  /// deviation), greedy.
  TransferResult augment(const std::string& input, double sigma, const TuningRanges& ranges, Rng& rng) const;

  static constexpr TuningRanges kCompleteRanges{0.4, 0.7, 0.0, 0.0};
  static constexpr TuningRanges kShortenRanges{0.0, 0.05, 0.4, 0.9};

 private:
  struct Job {
    TokenSeq tokens;
    StyleVector style;
    TuningRanges ranges;
    DecodeOptions decode;
    std::string input;
    double input_norm = 0.0;
    double delta_norm = 0.0;
  };
  std::vector<TransferResult> run(std::vector<Job> jobs, std::span<Rng> rngs) const;

  const Model<float>& model_;
  const Vocabulary& vocab_;
  std::uint64_t model_key_;
  mutable StyleCache cache_;
};

double l2_norm(const StyleVector& v);

}  // namespace textsettr
