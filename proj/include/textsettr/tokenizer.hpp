#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace textsettr {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

class TokenizerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Splits on ASCII whitespace.
std::vector<std::string> split_words(std::string_view text);

/// Joins words with single spaces (whitespace normalization).
std::string normalize_spaces(std::string_view text);

/// Word-level vocabulary with reserved ids for unknown words and the
/// decoder's start/end markers.
class Vocabulary {
 public:
  static constexpr TokenId kUnk = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr int kNumSpecial = 3;

  Vocabulary();

  /// Single serial pass over the texts. Words are ordered by descending
  /// frequency, ties broken lexicographically, and the table is capped at
  /// max_size entries including the specials.
  static Vocabulary build(std::span<const std::string> texts, std::size_t max_size);

  /// Rebuilds a vocabulary from its full token table (specials first).
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  TokenSeq encode(std::string_view text) const;

  /// Throws TokenizerError on ids outside the table.
  std::string decode(std::span<const TokenId> ids) const;

  TokenId id(std::string_view word) const;
  const std::string& token(TokenId id) const;
  bool contains(std::string_view word) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace textsettr
