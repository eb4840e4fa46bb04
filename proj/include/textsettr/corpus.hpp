#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace textsettr {

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Review-line preprocessing. Strings are UTF-8; lengths and slices are
// counted in code points, matching the reference Python behaviour.
// ---------------------------------------------------------------------------

/// Lowercases and normalizes one review line: quotes/parens to spaces,
/// money and percent values collapsed to "$" / "%", single digits to
/// "num_num", digit-led codes to "num_extend", remaining numerals removed,
/// spaces around . , ? ! : and the double space after a period before a
/// lowercase word collapsed.
std::string preprocess_review_line(std::string_view raw);

/// True iff the line is 30..99 code points long and every character is in
/// the allowed set: space ! $ % & , - . : ; ? _ a-z.
bool acceptable_line(std::string_view line);

/// Prefix of `line` up to and including its last period.
/// Throws CorpusError when there is no period.
std::string clip_to_last_period(std::string_view line);

/// HTML character-reference decoding for the entities that show up in
/// review dumps (&amp; &lt; &gt; &quot; &apos; &nbsp; and numeric refs).
std::string html_unescape(std::string_view text);

using LinePair = std::pair<std::string, std::string>;

/// Adjacent (previous, current) line pairs from one multi-line review.
/// Follows the reference extraction order exactly: unescape, split on '\n',
/// keep lines with a period in their first 100 code points, clip to the last
/// such period, preprocess twice, filter through acceptable_line, zip.
std::vector<LinePair> adjacent_lines(std::string_view review);

struct RawDocument {
  std::vector<std::string> lines;
  std::optional<std::string> style_id;  // synthetic corpora only
};

std::vector<LinePair> extract_adjacent_pairs(const RawDocument& doc);

// ---------------------------------------------------------------------------
// Synthetic style corpora
// ---------------------------------------------------------------------------

/// One style axis: every value renders a lexicon concept with its own word and
/// may remap punctuation characters.
struct StyleAxis {
  std::string name;
  std::vector<std::string> values;
  /// lexicon[c][v] is the surface word for concept c under value v.
  std::vector<std::vector<std::string>> lexicon;
  /// punctuation[v] maps a source punctuation character to its rendering.
  std::vector<std::map<char, char>> punctuation;
};

struct SyntheticStyleSpec {
  std::vector<StyleAxis> axes;
  int base_vocab_size = 240;
  std::pair<int, int> sentence_length_range{8, 14};
  std::pair<int, int> sentences_per_document{2, 8};
  /// Probability that a noun slot is filled by a marked lexicon concept.
  double marker_rate = 0.25;
  std::uint64_t seed = 1;

  /// Throws CorpusError on an empty lexicon, ragged rows, duplicate or
  /// non-lowercase words, or an inconsistent punctuation table.
  void validate() const;
};

SyntheticStyleSpec load_style_spec(const std::filesystem::path& path);
SyntheticStyleSpec parse_style_spec(std::string_view json_text);

/// The base content vocabulary a spec generates (deterministic from spec.seed).
struct BaseLexicon {
  std::vector<std::string> nouns, verbs, adjectives;
};
BaseLexicon make_base_lexicon(const SyntheticStyleSpec& spec);

/// Documents whose lines share one value per axis. style_id joins the chosen
/// value names with '|' in axis order. Every generated line carries at least
/// one marker per axis and survives adjacent_lines().
std::vector<RawDocument> generate_synthetic_corpus(const SyntheticStyleSpec& spec, std::size_t num_documents,
                                                   std::uint64_t seed);

/// Splits a style_id back into per-axis value names.
std::vector<std::string> split_style_id(std::string_view style_id);

// ---------------------------------------------------------------------------
// Corpus records (one JSON object per line)
// ---------------------------------------------------------------------------

struct CorpusRecord {
  std::string context;
  std::string target;
  std::optional<std::string> style_id;
};

/// Runs extract_adjacent_pairs over every document (in parallel) and
/// whitespace-normalizes the surviving lines. Output order follows input order.
std::vector<CorpusRecord> build_records(const std::vector<RawDocument>& docs);

void write_records(const std::filesystem::path& path, const std::vector<CorpusRecord>& records);
std::vector<CorpusRecord> read_records(const std::filesystem::path& path);

/// Copies of the records with style_id removed, for the trainer.
std::vector<CorpusRecord> strip_labels(std::vector<CorpusRecord> records);

}  // namespace textsettr
