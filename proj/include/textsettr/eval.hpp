#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "textsettr/corpus.hpp"
#include "textsettr/model.hpp"

namespace textsettr {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Oracle classifier over a synthetic style spec
// ---------------------------------------------------------------------------

/// Rule-based labeler: a token votes for an axis value when only that value
/// renders it (lexicon words, or the value's rendering of ','). The majority
/// value wins; ties and texts without markers abstain.
class StyleOracle {
 public:
  explicit StyleOracle(const SyntheticStyleSpec& spec);

  std::optional<std::string> classify_axis(std::string_view text, std::size_t axis) const;
  /// All axes joined with '|', or nullopt if any axis abstains.
  std::optional<std::string> classify(std::string_view text) const;

  /// Per-value marker counts on one axis.
  std::vector<int> marker_counts(std::string_view text, std::size_t axis) const;

  /// Deterministic rewrite of every marked token of `axis` into `value`.
  std::string rewrite(std::string_view text, std::size_t axis, std::string_view value) const;

  /// Index of the axis whose values include every given name.
  std::size_t axis_of(std::span<const std::string> values) const;
  std::size_t value_index(std::size_t axis, std::string_view value) const;

  const SyntheticStyleSpec& spec() const { return spec_; }

 private:
  struct Marker {
    std::size_t concept_id;
    std::size_t value;
  };
  SyntheticStyleSpec spec_;
  // Per axis: unambiguous surface form -> marker.
  std::vector<std::map<std::string, Marker, std::less<>>> markers_;
  // Per axis and value: the rendering of ','.
  std::vector<std::vector<std::string>> comma_;
};

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

/// The 13a tokenizer (mteval-v13a.pl, as in SacreBLEU).
std::string tokenize_13a(std::string_view line);

struct BleuStats {
  std::array<long, 4> correct{};
  std::array<long, 4> total{};
  long sys_len = 0;
  long ref_len = 0;
};

BleuStats bleu_stats(std::span<const std::string> candidates, std::span<const std::string> references);

/// Corpus BLEU-4, mixed case, one reference, exponential smoothing, 13a
/// tokenization. Returns a percentage.
double bleu(std::span<const std::string> candidates, std::span<const std::string> references);
double bleu_from_stats(const BleuStats& s);

// ---------------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------------

double g_score(double accuracy, double content);

struct DirectionReport {
  std::string source;
  std::string target;
  long examples = 0;
  long transferred = 0;
  long abstained = 0;
  double accuracy = 0.0;
  double content = 0.0;
  double g_score = 0.0;

  nlohmann::json to_json() const;
};

struct EvalReport {
  double accuracy = 0.0;
  double content = 0.0;
  double g_score = 0.0;
  std::optional<double> reference_bleu;
  long examples = 0;
  std::vector<DirectionReport> directions;
  nlohmann::json settings;

  nlohmann::json to_json() const;
};

struct LabeledText {
  std::string text;
  std::string label;  // value name on the evaluated axis
};

/// Rewrites a batch of inputs from `source` to `target`.
using TransferFn = std::function<std::vector<std::string>(const std::vector<std::string>& inputs,
                                                          const std::string& source, const std::string& target)>;

/// Transfers every example into each class other than its own. Accuracy is
/// the share of outputs the oracle assigns to the target class (abstentions
/// count as misses); content is self-BLEU of outputs against inputs.
/// references, when given, are aligned with `tests` and scored with the same
/// BLEU routine.
EvalReport evaluate_transfer(std::span<const LabeledText> tests, std::span<const std::string> classes,
                             const StyleOracle& oracle, const TransferFn& transfer,
                             std::span<const std::string> references = {});

/// Baselines.
TransferFn identity_transfer();
TransferFn oracle_rewrite_transfer(const StyleOracle& oracle, std::size_t axis);

/// Test examples from corpus records: the target side of each record with its
/// value on the axis.
std::vector<LabeledText> labeled_targets(const std::vector<CorpusRecord>& records, const StyleOracle& oracle,
                                         std::size_t axis);

// ---------------------------------------------------------------------------
// Style-space separation
// ---------------------------------------------------------------------------

enum class Distance { Euclidean, Cosine };

struct SeparationReport {
  double mean_within = 0.0;
  double mean_across = 0.0;
  double separation = 0.0;  // percent
  long within_pairs = 0;
  long across_pairs = 0;

  nlohmann::json to_json() const;
};

/// Mean pairwise distance within classes vs. over all cross-class pairs.
/// Needs at least two labels with two vectors each; throws EvalError when the
/// within-class mean is zero.
SeparationReport separation(std::span<const StyleVector> vectors, std::span<const std::string> labels,
                            Distance metric = Distance::Euclidean);

/// Serial pair loop, kept as the test reference for separation().
SeparationReport separation_reference(std::span<const StyleVector> vectors, std::span<const std::string> labels,
                                      Distance metric = Distance::Euclidean);

/// Writes vectors as a raw little-endian float32 [n x d] matrix and a
/// sidecar JSON {rows, cols, dtype, matrix, labels}. `matrix_name` is the
/// file name recorded in the sidecar (default: matrix_path's).
void export_styles(const std::filesystem::path& matrix_path, const std::filesystem::path& labels_path,
                   std::span<const StyleVector> vectors, std::span<const std::string> labels,
                   const std::string& matrix_name = {});

}  // namespace textsettr
