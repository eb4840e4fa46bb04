#include "textsettr/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "textsettr/rng.hpp"
#include "textsettr/tokenizer.hpp"

namespace textsettr {

namespace {

using U32 = std::u32string;

U32 utf8_decode(std::string_view s) {
  U32 out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    char32_t cp = 0xFFFD;
    std::size_t len = 1;
    if (b0 < 0x80) {
      cp = b0;
    } else if ((b0 >> 5) == 0x6) {
      len = 2;
    } else if ((b0 >> 4) == 0xE) {
      len = 3;
    } else if ((b0 >> 3) == 0x1E) {
      len = 4;
    }
    if (len > 1) {
      if (i + len > s.size()) {
        len = 1;
      } else {
        cp = b0 & (0x7F >> len);
        bool ok = true;
        for (std::size_t k = 1; k < len; ++k) {
          const auto b = static_cast<unsigned char>(s[i + k]);
          if ((b >> 6) != 0x2) ok = false;
          cp = (cp << 6) | (b & 0x3F);
        }
        if (!ok) {
          cp = 0xFFFD;
          len = 1;
        }
      }
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

std::string utf8_encode(const U32& s) {
  std::string out;
  out.reserve(s.size());
  for (char32_t c : s) append_utf8(out, c);
  return out;
}

bool is_digit(char32_t c) { return c >= U'0' && c <= U'9'; }
bool is_digit_or_dot(char32_t c) { return is_digit(c) || c == U'.'; }

char32_t lower(char32_t c) {
  if (c >= U'A' && c <= U'Z') return c + 32;
  if (c >= 0xC0 && c <= 0xDE && c != 0xD7) return c + 32;  // Latin-1 capitals
  if (c == 0x212A) return U'k';                             // Kelvin sign
  return c;
}

U32 preprocess_u32(const U32& in) {
  U32 s;
  s.reserve(in.size() + 8);
  for (char32_t c : in) s.push_back(c == U'\'' || c == U'(' || c == U')' || c == U'"' ? U' ' : lower(c));

  auto rewrite = [&s](auto&& step) {
    U32 out;
    out.reserve(s.size() + 16);
    std::size_t i = 0;
    while (i < s.size()) i = step(out, i);
    s = std::move(out);
  };

  // \$[\d.]*  ->  $
  rewrite([&s](U32& out, std::size_t i) {
    if (s[i] != U'$') {
      out.push_back(s[i]);
      return i + 1;
    }
    std::size_t j = i + 1;
    while (j < s.size() && is_digit_or_dot(s[j])) ++j;
    out.push_back(U'$');
    return j;
  });
  // [\d.]*%  ->  %
  rewrite([&s](U32& out, std::size_t i) {
    std::size_t j = i;
    while (j < s.size() && is_digit_or_dot(s[j])) ++j;
    if (j < s.size() && s[j] == U'%') {
      out.push_back(U'%');
      return j + 1;
    }
    out.push_back(s[i]);
    return i + 1;
  });
  // " \d[ ,]"  ->  " num_num "
  rewrite([&s](U32& out, std::size_t i) {
    if (s[i] == U' ' && i + 2 < s.size() && is_digit(s[i + 1]) && (s[i + 2] == U' ' || s[i + 2] == U',')) {
      out += U" num_num ";
      return i + 3;
    }
    out.push_back(s[i]);
    return i + 1;
  });
  // " \d[^ ]*"  ->  " num_extend"
  rewrite([&s](U32& out, std::size_t i) {
    if (s[i] == U' ' && i + 1 < s.size() && is_digit(s[i + 1])) {
      std::size_t j = i + 2;
      while (j < s.size() && s[j] != U' ') ++j;
      out += U" num_extend";
      return j;
    }
    out.push_back(s[i]);
    return i + 1;
  });
  // \d[\d.]*  ->  ""
  rewrite([&s](U32& out, std::size_t i) {
    if (!is_digit(s[i])) {
      out.push_back(s[i]);
      return i + 1;
    }
    std::size_t j = i + 1;
    while (j < s.size() && is_digit_or_dot(s[j])) ++j;
    return j;
  });
  // ([.,?!:])  ->  " \1 "
  rewrite([&s](U32& out, std::size_t i) {
    const char32_t c = s[i];
    if (c == U'.' || c == U',' || c == U'?' || c == U'!' || c == U':') {
      out.push_back(U' ');
      out.push_back(c);
      out.push_back(U' ');
    } else {
      out.push_back(c);
    }
    return i + 1;
  });
  // \.  ([a-z])  ->  ". \1"
  rewrite([&s](U32& out, std::size_t i) {
    if (s[i] == U'.' && i + 3 < s.size() && s[i + 1] == U' ' && s[i + 2] == U' ' && s[i + 3] >= U'a' &&
        s[i + 3] <= U'z') {
      out.push_back(U'.');
      out.push_back(U' ');
      out.push_back(s[i + 3]);
      return i + 4;
    }
    out.push_back(s[i]);
    return i + 1;
  });
  return s;
}

bool allowed_char(char32_t c) {
  if (c >= U'a' && c <= U'z') return true;
  switch (c) {
    case U' ': case U'!': case U'$': case U'%': case U'&': case U',': case U'-':
    case U'.': case U':': case U';': case U'?': case U'_':
      return true;
    default:
      return false;
  }
}

bool acceptable_u32(const U32& line) {
  if (line.size() < 30 || line.size() >= 100) return false;
  return std::all_of(line.begin(), line.end(), allowed_char);
}

U32 clip_u32(const U32& line) {
  const auto pos = line.rfind(U'.');
  if (pos == U32::npos) throw CorpusError("line has no period to clip to");
  return line.substr(0, pos + 1);
}

// Windows-1252 mapping used by HTML5 for numeric references 0x80-0x9F.
constexpr char32_t kCp1252[32] = {0x20AC, 0x81,   0x201A, 0x0192, 0x201E, 0x2026, 0x2020, 0x2021,
                                  0x02C6, 0x2030, 0x0160, 0x2039, 0x0152, 0x8D,   0x017D, 0x8F,
                                  0x90,   0x2018, 0x2019, 0x201C, 0x201D, 0x2022, 0x2013, 0x2014,
                                  0x02DC, 0x2122, 0x0161, 0x203A, 0x0153, 0x9D,   0x017E, 0x0178};

bool invalid_codepoint(char32_t cp) {
  if ((cp >= 0x1 && cp <= 0x8) || (cp >= 0xE && cp <= 0x1F) || (cp >= 0x7F && cp <= 0x9F)) return true;
  if (cp >= 0xFDD0 && cp <= 0xFDEF) return true;
  if (cp == 0xB) return true;
  return (cp & 0xFFFE) == 0xFFFE;
}

}  // namespace

std::string preprocess_review_line(std::string_view raw) { return utf8_encode(preprocess_u32(utf8_decode(raw))); }

bool acceptable_line(std::string_view line) { return acceptable_u32(utf8_decode(line)); }

std::string clip_to_last_period(std::string_view line) { return utf8_encode(clip_u32(utf8_decode(line))); }

std::string html_unescape(std::string_view text) {
  static const std::map<std::string, char32_t, std::less<>> kLegacy = {
      {"amp", U'&'}, {"lt", U'<'}, {"gt", U'>'}, {"quot", U'"'}, {"nbsp", 0xA0}};
  static const std::map<std::string, char32_t, std::less<>> kNamed = {
      {"amp", U'&'}, {"lt", U'<'}, {"gt", U'>'}, {"quot", U'"'}, {"nbsp", 0xA0}, {"apos", U'\''}};

  const U32 s = utf8_decode(text);
  U32 out;
  std::size_t i = 0;
  while (i < s.size()) {
    if (s[i] != U'&') {
      out.push_back(s[i++]);
      continue;
    }
    std::size_t j = i + 1;
    if (j < s.size() && s[j] == U'#') {
      ++j;
      const bool hex = j < s.size() && (s[j] == U'x' || s[j] == U'X');
      if (hex) ++j;
      const std::size_t digits_start = j;
      std::uint64_t num = 0;
      while (j < s.size() && (hex ? std::isxdigit(static_cast<int>(s[j] < 128 ? s[j] : 0)) : is_digit(s[j]))) {
        const char32_t c = s[j];
        const std::uint64_t d = is_digit(c) ? c - U'0' : (lower(c) - U'a' + 10);
        if (num <= 0x10FFFFFFULL) num = num * (hex ? 16 : 10) + d;
        ++j;
      }
      if (j == digits_start) {
        out.push_back(s[i++]);
        continue;
      }
      if (j < s.size() && s[j] == U';') ++j;
      if (num == 0 || num == 0xD) {
        out.push_back(num == 0 ? 0xFFFD : U'\r');
      } else if (num >= 0x80 && num <= 0x9F) {
        out.push_back(kCp1252[num - 0x80]);
      } else if ((num >= 0xD800 && num <= 0xDFFF) || num > 0x10FFFF) {
        out.push_back(0xFFFD);
      } else if (!invalid_codepoint(static_cast<char32_t>(num))) {
        out.push_back(static_cast<char32_t>(num));
      }
      i = j;
      continue;
    }
    // Named reference: longest run of name characters, optional ';'.
    while (j < s.size() && j - i <= 32 && s[j] < 128 && std::isalnum(static_cast<int>(s[j]))) ++j;
    const std::string name = utf8_encode(s.substr(i + 1, j - i - 1));
    if (j < s.size() && s[j] == U';') {
      if (auto it = kNamed.find(name); it != kNamed.end()) {
        out.push_back(it->second);
        i = j + 1;
        continue;
      }
    }
    // Legacy names also match as a prefix without the semicolon.
    bool matched = false;
    for (std::size_t len = name.size(); len > 0 && !matched; --len) {
      if (auto it = kLegacy.find(std::string_view(name).substr(0, len)); it != kLegacy.end()) {
        out.push_back(it->second);
        i = i + 1 + len;
        matched = true;
      }
    }
    if (!matched) out.push_back(s[i++]);
  }
  return utf8_encode(out);
}

std::vector<LinePair> adjacent_lines(std::string_view review_raw) {
  U32 review = utf8_decode(html_unescape(review_raw));
  // '\"' -> '"'
  {
    U32 fixed;
    for (std::size_t i = 0; i < review.size(); ++i) {
      if (review[i] == U'\\' && i + 1 < review.size() && review[i + 1] == U'"') {
        fixed.push_back(U'"');
        ++i;
      } else {
        fixed.push_back(review[i]);
      }
    }
    review = std::move(fixed);
  }
  if (review.find(U'\n') == U32::npos) return {};

  std::vector<U32> lines;
  std::size_t start = 0;
  while (true) {
    const auto nl = review.find(U'\n', start);
    const U32 l = review.substr(start, nl == U32::npos ? U32::npos : nl - start);
    if (!l.empty()) {
      const U32 head = l.substr(0, 100);
      if (head.find(U'.') != U32::npos) {
        U32 once = preprocess_u32(clip_u32(head));
        U32 twice = preprocess_u32(once);
        if (acceptable_u32(twice)) lines.push_back(std::move(twice));
      }
    }
    if (nl == U32::npos) break;
    start = nl + 1;
  }
  if (lines.size() < 2) return {};
  std::vector<LinePair> pairs;
  pairs.reserve(lines.size() - 1);
  for (std::size_t i = 0; i + 1 < lines.size(); ++i) pairs.emplace_back(utf8_encode(lines[i]), utf8_encode(lines[i + 1]));
  return pairs;
}

std::vector<LinePair> extract_adjacent_pairs(const RawDocument& doc) {
  std::string joined;
  for (std::size_t i = 0; i < doc.lines.size(); ++i) {
    if (i) joined.push_back('\n');
    joined += doc.lines[i];
  }
  return adjacent_lines(joined);
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

namespace {

const std::vector<std::string> kDeterminers = {"the", "a", "this", "my", "every", "our", "that"};
const std::vector<std::string> kPrepositions = {"with", "near", "under", "for", "from", "about", "behind"};
const std::vector<std::string> kConjunctions = {"and", "but", "while"};

bool lowercase_word(std::string_view w) {
  return !w.empty() && std::all_of(w.begin(), w.end(), [](char c) { return c >= 'a' && c <= 'z'; });
}

bool is_function_word(const std::string& w) {
  auto in = [&w](const std::vector<std::string>& v) { return std::find(v.begin(), v.end(), w) != v.end(); };
  return in(kDeterminers) || in(kPrepositions) || in(kConjunctions);
}

struct Slot {
  enum Kind { kWord, kNoun } kind;
  std::string word;
  int axis = -1;      // marker axis when >= 0
  int concept_id = -1;
};

}  // namespace

void SyntheticStyleSpec::validate() const {
  if (axes.empty()) throw CorpusError("style spec has no axes");
  if (base_vocab_size < 12) throw CorpusError("base_vocab_size must be at least 12");
  if (sentence_length_range.first < 6 || sentence_length_range.second < sentence_length_range.first)
    throw CorpusError("sentence_length_range must satisfy 6 <= min <= max");
  if (sentence_length_range.second > 24) throw CorpusError("sentence_length_range max must be <= 24");
  if (sentences_per_document.first < 2 || sentences_per_document.second < sentences_per_document.first)
    throw CorpusError("sentences_per_document must satisfy 2 <= min <= max");
  if (!(marker_rate > 0.0 && marker_rate <= 1.0)) throw CorpusError("marker_rate must be in (0, 1]");
  if (axes.size() > 2) throw CorpusError("at most two style axes are supported");

  std::set<std::string> seen;
  for (const auto& axis : axes) {
    if (axis.values.size() < 2) throw CorpusError("axis '" + axis.name + "' needs at least two values");
    if (axis.lexicon.empty()) throw CorpusError("axis '" + axis.name + "' has an empty lexicon table");
    for (const auto& row : axis.lexicon) {
      if (row.size() != axis.values.size())
        throw CorpusError("axis '" + axis.name + "' lexicon row does not cover every value");
      for (const auto& w : row) {
        if (!lowercase_word(w)) throw CorpusError("lexicon word must be lowercase a-z: '" + w + "'");
        if (is_function_word(w)) throw CorpusError("lexicon word collides with a function word: " + w);
        if (!seen.insert(w).second) throw CorpusError("lexicon word appears twice: " + w);
      }
    }
    if (!axis.punctuation.empty() && axis.punctuation.size() != axis.values.size())
      throw CorpusError("axis '" + axis.name + "' punctuation table must list every value");
    for (const auto& table : axis.punctuation)
      for (auto [from, to] : table) {
        if (from != ',' || (to != ',' && to != ';' && to != ':' && to != '-'))
          throw CorpusError("punctuation transforms map ',' to one of , ; : -");
      }
  }
}

SyntheticStyleSpec parse_style_spec(std::string_view json_text) {
  SyntheticStyleSpec spec;
  try {
    const auto j = nlohmann::json::parse(json_text);
    spec.base_vocab_size = j.value("base_vocab_size", spec.base_vocab_size);
    if (j.contains("sentence_length_range"))
      spec.sentence_length_range = {j["sentence_length_range"].at(0).get<int>(),
                                    j["sentence_length_range"].at(1).get<int>()};
    if (j.contains("sentences_per_document"))
      spec.sentences_per_document = {j["sentences_per_document"].at(0).get<int>(),
                                     j["sentences_per_document"].at(1).get<int>()};
    spec.marker_rate = j.value("marker_rate", spec.marker_rate);
    spec.seed = j.value("seed", spec.seed);
    for (const auto& ja : j.at("axes")) {
      StyleAxis axis;
      axis.name = ja.at("name").get<std::string>();
      axis.values = ja.at("values").get<std::vector<std::string>>();
      axis.lexicon = ja.at("lexicon").get<std::vector<std::vector<std::string>>>();
      if (ja.contains("punctuation")) {
        for (const auto& table : ja["punctuation"]) {
          std::map<char, char> m;
          for (auto it = table.begin(); it != table.end(); ++it) {
            const auto to = it.value().get<std::string>();
            if (it.key().size() != 1 || to.size() != 1) throw CorpusError("punctuation entries are single characters");
            m[it.key()[0]] = to[0];
          }
          axis.punctuation.push_back(std::move(m));
        }
      }
      spec.axes.push_back(std::move(axis));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorpusError(std::string("invalid style spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

SyntheticStyleSpec load_style_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open style spec: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_style_spec(ss.str());
}

BaseLexicon make_base_lexicon(const SyntheticStyleSpec& spec) {
  static const std::vector<std::string> kOnsets = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r",
                                                   "s", "t", "v", "z", "br", "tr", "st", "pl", "gr", "sk"};
  static const std::vector<std::string> kVowels = {"a", "e", "i", "o", "u", "ai", "oo"};
  static const std::vector<std::string> kCodas = {"", "", "n", "l", "r", "sk", "m", "t"};

  std::set<std::string> reserved;
  for (const auto& axis : spec.axes)
    for (const auto& row : axis.lexicon) reserved.insert(row.begin(), row.end());
  for (const auto* list : {&kDeterminers, &kPrepositions, &kConjunctions}) reserved.insert(list->begin(), list->end());

  Rng rng = Rng(spec.seed).split(0xba5e);
  std::vector<std::string> words;
  std::set<std::string> used;
  while (static_cast<int>(words.size()) < spec.base_vocab_size) {
    const std::size_t syllables = 2 + rng.below(2);
    std::string w;
    for (std::size_t k = 0; k < syllables; ++k) {
      w += kOnsets[rng.below(kOnsets.size())];
      w += kVowels[rng.below(kVowels.size())];
    }
    w += kCodas[rng.below(kCodas.size())];
    if (reserved.contains(w) || !used.insert(w).second) continue;
    words.push_back(std::move(w));
  }
  BaseLexicon lex;
  const std::size_t n = words.size();
  const std::size_t n_nouns = n * 2 / 5;
  const std::size_t n_verbs = (n - n_nouns) / 2;
  lex.nouns.assign(words.begin(), words.begin() + static_cast<std::ptrdiff_t>(n_nouns));
  lex.verbs.assign(words.begin() + static_cast<std::ptrdiff_t>(n_nouns),
                   words.begin() + static_cast<std::ptrdiff_t>(n_nouns + n_verbs));
  lex.adjectives.assign(words.begin() + static_cast<std::ptrdiff_t>(n_nouns + n_verbs), words.end());
  return lex;
}

std::vector<std::string> split_style_id(std::string_view style_id) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto bar = style_id.find('|', start);
    parts.emplace_back(style_id.substr(start, bar == std::string_view::npos ? std::string_view::npos : bar - start));
    if (bar == std::string_view::npos) break;
    start = bar + 1;
  }
  return parts;
}

namespace {

std::vector<Slot> sample_clause(const BaseLexicon& lex, Rng& rng) {
  auto pick = [&rng](const std::vector<std::string>& v) { return v[rng.below(v.size())]; };
  std::vector<Slot> out;
  auto noun_phrase = [&] {
    out.push_back({Slot::kWord, pick(kDeterminers)});
    if (rng.bernoulli(0.5)) out.push_back({Slot::kWord, pick(lex.adjectives)});
    out.push_back({Slot::kNoun, pick(lex.nouns)});
  };
  noun_phrase();
  out.push_back({Slot::kWord, pick(lex.verbs)});
  noun_phrase();
  if (rng.bernoulli(0.5)) {
    out.push_back({Slot::kWord, pick(kPrepositions)});
    noun_phrase();
  }
  return out;
}

// Renders a sentence for the chosen style values, or returns nullopt when the
// draw falls outside the configured length.
std::optional<std::string> sample_sentence(const SyntheticStyleSpec& spec, const BaseLexicon& lex,
                                           const std::vector<std::size_t>& values, Rng& rng) {
  std::vector<Slot> slots = sample_clause(lex, rng);
  bool compound = rng.bernoulli(0.35);
  if (compound) {
    slots.push_back({Slot::kWord, ","});
    slots.push_back({Slot::kWord, kConjunctions[rng.below(kConjunctions.size())]});
    auto second = sample_clause(lex, rng);
    slots.insert(slots.end(), second.begin(), second.end());
  }
  const int n_tokens = static_cast<int>(slots.size()) + 1;  // final period
  if (n_tokens < spec.sentence_length_range.first || n_tokens > spec.sentence_length_range.second) return std::nullopt;

  std::vector<std::size_t> noun_slots;
  for (std::size_t i = 0; i < slots.size(); ++i)
    if (slots[i].kind == Slot::kNoun) noun_slots.push_back(i);

  for (auto idx : noun_slots) {
    if (rng.bernoulli(spec.marker_rate)) {
      const int axis = static_cast<int>(rng.below(spec.axes.size()));
      slots[idx].axis = axis;
      slots[idx].concept_id = static_cast<int>(rng.below(spec.axes[static_cast<std::size_t>(axis)].lexicon.size()));
    }
  }
  // Every axis must be marked at least once.
  for (std::size_t a = 0; a < spec.axes.size(); ++a) {
    const bool marked = std::any_of(slots.begin(), slots.end(), [a](const Slot& s) { return s.axis == static_cast<int>(a); });
    if (marked) continue;
    std::vector<std::size_t> free;
    for (auto idx : noun_slots)
      if (slots[idx].axis < 0) free.push_back(idx);
    if (free.empty()) return std::nullopt;
    auto& slot = slots[free[rng.below(free.size())]];
    slot.axis = static_cast<int>(a);
    slot.concept_id = static_cast<int>(rng.below(spec.axes[a].lexicon.size()));
  }

  std::string line;
  for (const auto& slot : slots) {
    std::string word = slot.word;
    if (slot.axis >= 0) {
      const auto a = static_cast<std::size_t>(slot.axis);
      word = spec.axes[a].lexicon[static_cast<std::size_t>(slot.concept_id)][values[a]];
    }
    if (word == ",") {
      char c = ',';
      for (std::size_t a = 0; a < spec.axes.size(); ++a) {
        if (spec.axes[a].punctuation.empty()) continue;
        const auto& table = spec.axes[a].punctuation[values[a]];
        if (auto it = table.find(','); it != table.end()) c = it->second;
      }
      // Preprocessing spaces out ',' but not its replacements.
      if (c != ',') line.push_back(' ');
      line.push_back(c);
      continue;
    }
    if (!line.empty()) line.push_back(' ');
    line += word;
  }
  line.push_back('.');
  line[0] = static_cast<char>(line[0] - 'a' + 'A');
  return line;
}

}  // namespace

std::vector<RawDocument> generate_synthetic_corpus(const SyntheticStyleSpec& spec, std::size_t num_documents,
                                                   std::uint64_t seed) {
  spec.validate();
  if (num_documents == 0) throw CorpusError("num_documents must be positive");
  const BaseLexicon lex = make_base_lexicon(spec);
  const Rng root(seed);

  std::vector<RawDocument> docs(num_documents);
#pragma omp parallel for schedule(dynamic, 64)
  for (std::size_t d = 0; d < num_documents; ++d) {
    Rng rng = root.split(d);
    std::vector<std::size_t> values(spec.axes.size());
    std::string style_id;
    for (std::size_t a = 0; a < spec.axes.size(); ++a) {
      values[a] = rng.below(spec.axes[a].values.size());
      if (a) style_id.push_back('|');
      style_id += spec.axes[a].values[values[a]];
    }
    const int lo = spec.sentences_per_document.first;
    const int hi = spec.sentences_per_document.second;
    const int n_lines = lo + static_cast<int>(rng.below(static_cast<std::size_t>(hi - lo + 1)));

    RawDocument doc;
    doc.style_id = style_id;
    while (static_cast<int>(doc.lines.size()) < n_lines) {
      auto line = sample_sentence(spec, lex, values, rng);
      if (!line) continue;
      // Keep only lines the extraction pipeline accepts, so every line of the
      // document reaches the pair list.
      const auto once = preprocess_review_line(clip_to_last_period(*line));
      if (!acceptable_line(preprocess_review_line(once))) continue;
      doc.lines.push_back(std::move(*line));
    }
    docs[d] = std::move(doc);
  }
  return docs;
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

std::vector<CorpusRecord> build_records(const std::vector<RawDocument>& docs) {
  std::vector<std::vector<CorpusRecord>> per_doc(docs.size());
#pragma omp parallel for schedule(dynamic, 64)
  for (std::size_t d = 0; d < docs.size(); ++d) {
    for (auto& [ctx, tgt] : extract_adjacent_pairs(docs[d]))
      per_doc[d].push_back({normalize_spaces(ctx), normalize_spaces(tgt), docs[d].style_id});
  }
  std::vector<CorpusRecord> out;
  for (auto& v : per_doc)
    for (auto& r : v) out.push_back(std::move(r));
  return out;
}

void write_records(const std::filesystem::path& path, const std::vector<CorpusRecord>& records) {
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot write corpus: " + path.string());
  for (const auto& r : records) {
    nlohmann::json j = {{"context", r.context}, {"target", r.target}};
    j["style_id"] = r.style_id ? nlohmann::json(*r.style_id) : nlohmann::json(nullptr);
    out << j.dump() << '\n';
  }
}

std::vector<CorpusRecord> read_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open corpus: " + path.string());
  std::vector<CorpusRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      CorpusRecord r;
      r.context = j.at("context").get<std::string>();
      r.target = j.at("target").get<std::string>();
      if (j.contains("style_id") && !j["style_id"].is_null()) r.style_id = j["style_id"].get<std::string>();
      records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw CorpusError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return records;
}

std::vector<CorpusRecord> strip_labels(std::vector<CorpusRecord> records) {
  for (auto& r : records) r.style_id.reset();
  return records;
}

}  // namespace textsettr
