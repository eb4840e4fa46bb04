#include "textsettr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <unordered_map>

#include "textsettr/tokenizer.hpp"

namespace textsettr {

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

StyleOracle::StyleOracle(const SyntheticStyleSpec& spec) : spec_(spec) {
  spec_.validate();
  markers_.resize(spec_.axes.size());
  comma_.resize(spec_.axes.size());
  for (std::size_t a = 0; a < spec_.axes.size(); ++a) {
    const StyleAxis& axis = spec_.axes[a];
    for (std::size_t c = 0; c < axis.lexicon.size(); ++c)
      for (std::size_t v = 0; v < axis.values.size(); ++v) markers_[a].emplace(axis.lexicon[c][v], Marker{c, v});
    if (axis.punctuation.empty()) continue;
    for (std::size_t v = 0; v < axis.values.size(); ++v) {
      const auto& table = axis.punctuation[v];
      const auto it = table.find(',');
      comma_[a].emplace_back(1, it == table.end() ? ',' : it->second);
    }
  }
}

std::vector<int> StyleOracle::marker_counts(std::string_view text, std::size_t axis) const {
  const auto& comma = comma_.at(axis);
  std::vector<int> counts(spec_.axes[axis].values.size(), 0);
  for (const auto& tok : split_words(text)) {
    if (auto it = markers_[axis].find(tok); it != markers_[axis].end()) {
      ++counts[it->second.value];
      continue;
    }
    if (comma.empty()) continue;
    const auto hits = std::count(comma.begin(), comma.end(), tok);
    if (hits == 1) ++counts[static_cast<std::size_t>(std::find(comma.begin(), comma.end(), tok) - comma.begin())];
  }
  return counts;
}

std::optional<std::string> StyleOracle::classify_axis(std::string_view text, std::size_t axis) const {
  const auto counts = marker_counts(text, axis);
  const auto best = std::max_element(counts.begin(), counts.end());
  if (*best == 0 || std::count(counts.begin(), counts.end(), *best) > 1) return std::nullopt;
  return spec_.axes[axis].values[static_cast<std::size_t>(best - counts.begin())];
}

std::optional<std::string> StyleOracle::classify(std::string_view text) const {
  std::string label;
  for (std::size_t a = 0; a < spec_.axes.size(); ++a) {
    auto v = classify_axis(text, a);
    if (!v) return std::nullopt;
    if (a) label.push_back('|');
    label += *v;
  }
  return label;
}

std::string StyleOracle::rewrite(std::string_view text, std::size_t axis, std::string_view value) const {
  const std::size_t to = value_index(axis, value);
  const StyleAxis& ax = spec_.axes[axis];
  const auto& comma = comma_[axis];
  std::string out;
  for (const auto& tok : split_words(text)) {
    std::string word = tok;
    if (auto it = markers_[axis].find(tok); it != markers_[axis].end()) {
      word = ax.lexicon[it->second.concept_id][to];
    } else if (!comma.empty() && std::count(comma.begin(), comma.end(), tok) == 1) {
      word = comma[to];
    }
    if (!out.empty()) out.push_back(' ');
    out += word;
  }
  return out;
}

std::size_t StyleOracle::axis_of(std::span<const std::string> values) const {
  for (std::size_t a = 0; a < spec_.axes.size(); ++a) {
    const auto& vs = spec_.axes[a].values;
    if (std::all_of(values.begin(), values.end(),
                    [&](const std::string& v) { return std::find(vs.begin(), vs.end(), v) != vs.end(); }))
      return a;
  }
  throw EvalError("no style axis contains all of the requested classes");
}

std::size_t StyleOracle::value_index(std::size_t axis, std::string_view value) const {
  const auto& vs = spec_.axes.at(axis).values;
  const auto it = std::find(vs.begin(), vs.end(), value);
  if (it == vs.end()) throw EvalError("unknown value '" + std::string(value) + "' on axis " + spec_.axes[axis].name);
  return static_cast<std::size_t>(it - vs.begin());
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

namespace {

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}

bool is_digit(char c) { return c >= '0' && c <= '9'; }

// [\{-\~\[-\` -\&\(-\+\:-\@\/]
bool is_13a_punct(char c) {
  const auto u = static_cast<unsigned char>(c);
  return (u >= '{' && u <= '~') || (u >= '[' && u <= '`') || (u >= ' ' && u <= '&') || (u >= '(' && u <= '+') ||
         (u >= ':' && u <= '@') || u == '/';
}

// re.sub for a two-character pattern: matches are found left to right and do
// not overlap.
template <class First, class Second, class Emit>
std::string sub_pairs(const std::string& s, First first, Second second, Emit emit) {
  std::string out;
  out.reserve(s.size() + s.size() / 2);
  std::size_t i = 0;
  while (i < s.size()) {
    if (i + 1 < s.size() && first(s[i]) && second(s[i + 1])) {
      emit(out, s[i], s[i + 1]);
      i += 2;
    } else {
      out.push_back(s[i++]);
    }
  }
  return out;
}

using NgramCounts = std::unordered_map<std::string, int>;

NgramCounts extract_ngrams(const std::vector<std::string>& words) {
  NgramCounts counts;
  for (std::size_t n = 1; n <= 4; ++n) {
    for (std::size_t i = 0; i + n <= words.size(); ++i) {
      std::string key = words[i];
      for (std::size_t k = 1; k < n; ++k) {
        key.push_back(' ');
        key += words[i + k];
      }
      ++counts[key];
    }
  }
  return counts;
}

}  // namespace

std::string tokenize_13a(std::string_view line) {
  std::string norm(line);
  replace_all(norm, "<skipped>", "");
  replace_all(norm, "-\n", "");
  replace_all(norm, "\n", " ");
  if (norm.find('&') != std::string::npos) {
    replace_all(norm, "&quot;", "\"");
    replace_all(norm, "&amp;", "&");
    replace_all(norm, "&lt;", "<");
    replace_all(norm, "&gt;", ">");
  }
  std::string s = " " + norm + " ";

  std::string t;
  t.reserve(s.size() * 2);
  for (char c : s) {
    if (is_13a_punct(c)) {
      t.push_back(' ');
      t.push_back(c);
      t.push_back(' ');
    } else {
      t.push_back(c);
    }
  }
  auto period_comma = [](char c) { return c == '.' || c == ','; };
  auto not_digit = [](char c) { return !is_digit(c); };
  t = sub_pairs(t, not_digit, period_comma, [](std::string& o, char a, char b) {
    o.push_back(a);
    o.push_back(' ');
    o.push_back(b);
    o.push_back(' ');
  });
  t = sub_pairs(t, period_comma, not_digit, [](std::string& o, char a, char b) {
    o.push_back(' ');
    o.push_back(a);
    o.push_back(' ');
    o.push_back(b);
  });
  t = sub_pairs(t, is_digit, [](char c) { return c == '-'; }, [](std::string& o, char a, char b) {
    o.push_back(a);
    o.push_back(' ');
    o.push_back(b);
    o.push_back(' ');
  });
  return normalize_spaces(t);
}

BleuStats bleu_stats(std::span<const std::string> candidates, std::span<const std::string> references) {
  if (candidates.size() != references.size()) throw EvalError("bleu: candidate and reference counts differ");
  if (candidates.empty()) throw EvalError("bleu: empty corpus");
  const std::size_t n = candidates.size();
  std::vector<BleuStats> per(n);
#pragma omp parallel for schedule(dynamic, 64)
  for (std::size_t i = 0; i < n; ++i) {
    const auto sys = split_words(tokenize_13a(candidates[i]));
    const auto ref = split_words(tokenize_13a(references[i]));
    BleuStats& st = per[i];
    st.sys_len = static_cast<long>(sys.size());
    st.ref_len = static_cast<long>(ref.size());
    const NgramCounts ref_ngrams = extract_ngrams(ref);
    for (const auto& [gram, count] : extract_ngrams(sys)) {
      const auto order = static_cast<std::size_t>(std::count(gram.begin(), gram.end(), ' '));
      st.total[order] += count;
      if (auto it = ref_ngrams.find(gram); it != ref_ngrams.end()) st.correct[order] += std::min(count, it->second);
    }
  }
  BleuStats total;
  for (const auto& st : per) {
    total.sys_len += st.sys_len;
    total.ref_len += st.ref_len;
    for (std::size_t k = 0; k < 4; ++k) {
      total.correct[k] += st.correct[k];
      total.total[k] += st.total[k];
    }
  }
  return total;
}

double bleu_from_stats(const BleuStats& s) {
  std::array<double, 4> precisions{};
  double smooth = 1.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (s.total[n] == 0) break;
    if (s.correct[n] == 0) {
      smooth *= 2.0;
      precisions[n] = 100.0 / (smooth * static_cast<double>(s.total[n]));
    } else {
      precisions[n] = 100.0 * static_cast<double>(s.correct[n]) / static_cast<double>(s.total[n]);
    }
  }
  double bp = 1.0;
  if (s.sys_len < s.ref_len)
    bp = s.sys_len > 0 ? std::exp(1.0 - static_cast<double>(s.ref_len) / static_cast<double>(s.sys_len)) : 0.0;
  double log_sum = 0.0;
  for (double p : precisions) log_sum += p > 0.0 ? std::log(p) : -9999999999.0;
  return bp * std::exp(log_sum / 4.0);
}

double bleu(std::span<const std::string> candidates, std::span<const std::string> references) {
  return bleu_from_stats(bleu_stats(candidates, references));
}

// ---------------------------------------------------------------------------
// Transfer evaluation
// ---------------------------------------------------------------------------

double g_score(double accuracy, double content) {
  if (accuracy < 0.0 || content < 0.0) throw EvalError("g_score inputs must be non-negative");
  return std::sqrt(accuracy * content);
}

nlohmann::json DirectionReport::to_json() const {
  return {{"source", source},     {"target", target},   {"examples", examples}, {"transferred", transferred},
          {"abstained", abstained}, {"accuracy", accuracy}, {"content", content},   {"g_score", g_score}};
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json dirs = nlohmann::json::array();
  for (const auto& d : directions) dirs.push_back(d.to_json());
  nlohmann::json j{{"accuracy", accuracy}, {"content", content},  {"g_score", g_score},
                   {"examples", examples}, {"directions", dirs}, {"settings", settings}};
  if (reference_bleu) j["reference_bleu"] = *reference_bleu;
  return j;
}

EvalReport evaluate_transfer(std::span<const LabeledText> tests, std::span<const std::string> classes,
                             const StyleOracle& oracle, const TransferFn& transfer,
                             std::span<const std::string> references) {
  if (classes.size() < 2) throw EvalError("evaluation needs at least two classes");
  if (!references.empty() && references.size() != tests.size())
    throw EvalError("references must align with the test examples");
  const std::size_t axis = oracle.axis_of(classes);

  EvalReport report;
  std::vector<std::string> all_in, all_out, all_ref;
  long all_hits = 0;
  for (const auto& src : classes) {
    std::vector<std::string> inputs;
    std::vector<std::size_t> index;
    for (std::size_t i = 0; i < tests.size(); ++i) {
      if (tests[i].label != src) continue;
      inputs.push_back(tests[i].text);
      index.push_back(i);
    }
    if (inputs.empty()) continue;
    for (const auto& trg : classes) {
      if (trg == src) continue;
      const std::vector<std::string> outputs = transfer(inputs, src, trg);
      if (outputs.size() != inputs.size()) throw EvalError("transfer returned the wrong number of outputs");
      DirectionReport d;
      d.source = src;
      d.target = trg;
      d.examples = static_cast<long>(inputs.size());
      for (const auto& out : outputs) {
        const auto label = oracle.classify_axis(out, axis);
        if (!label)
          ++d.abstained;
        else if (*label == trg)
          ++d.transferred;
      }
      d.accuracy = 100.0 * static_cast<double>(d.transferred) / static_cast<double>(d.examples);
      d.content = bleu(outputs, inputs);
      d.g_score = g_score(d.accuracy, d.content);
      report.directions.push_back(d);
      all_hits += d.transferred;
      all_in.insert(all_in.end(), inputs.begin(), inputs.end());
      all_out.insert(all_out.end(), outputs.begin(), outputs.end());
      if (!references.empty())
        for (auto i : index) all_ref.push_back(references[i]);
    }
  }
  if (all_out.empty()) throw EvalError("no test example carries one of the evaluated classes");
  report.examples = static_cast<long>(all_out.size());
  report.accuracy = 100.0 * static_cast<double>(all_hits) / static_cast<double>(all_out.size());
  report.content = bleu(all_out, all_in);
  report.g_score = g_score(report.accuracy, report.content);
  if (!references.empty()) report.reference_bleu = bleu(all_out, all_ref);
  return report;
}

TransferFn identity_transfer() {
  return [](const std::vector<std::string>& inputs, const std::string&, const std::string&) { return inputs; };
}

TransferFn oracle_rewrite_transfer(const StyleOracle& oracle, std::size_t axis) {
  return [&oracle, axis](const std::vector<std::string>& inputs, const std::string&, const std::string& target) {
    std::vector<std::string> out;
    out.reserve(inputs.size());
    for (const auto& s : inputs) out.push_back(oracle.rewrite(s, axis, target));
    return out;
  };
}

std::vector<LabeledText> labeled_targets(const std::vector<CorpusRecord>& records, const StyleOracle& oracle,
                                         std::size_t axis) {
  std::vector<LabeledText> out;
  for (const auto& r : records) {
    if (!r.style_id) continue;
    const auto parts = split_style_id(*r.style_id);
    if (parts.size() != oracle.spec().axes.size()) throw EvalError("style_id does not match the style spec");
    out.push_back({r.target, parts[axis]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Separation
// ---------------------------------------------------------------------------

namespace {

double distance(const StyleVector& a, const StyleVector& b, Distance metric) {
  if (metric == Distance::Euclidean) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      const double d = static_cast<double>(a[k]) - b[k];
      s += d * d;
    }
    return std::sqrt(s);
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    dot += static_cast<double>(a[k]) * b[k];
    na += static_cast<double>(a[k]) * a[k];
    nb += static_cast<double>(b[k]) * b[k];
  }
  if (na == 0.0 || nb == 0.0) throw EvalError("cosine distance of a zero vector");
  return 1.0 - dot / std::sqrt(na * nb);
}

void check_separation_input(std::span<const StyleVector> vectors, std::span<const std::string> labels) {
  if (vectors.size() != labels.size()) throw EvalError("separation: one label per vector required");
  std::map<std::string, int> counts;
  for (const auto& l : labels) ++counts[l];
  if (counts.size() < 2) throw EvalError("separation needs at least two classes");
  for (const auto& [l, c] : counts)
    if (c < 2) throw EvalError("separation needs at least two vectors in class '" + l + "'");
  for (const auto& v : vectors)
    if (v.size() != vectors.front().size()) throw EvalError("separation: vectors differ in length");
}

SeparationReport finish_separation(double within, long n_within, double across, long n_across) {
  SeparationReport r;
  r.within_pairs = n_within;
  r.across_pairs = n_across;
  r.mean_within = within / static_cast<double>(n_within);
  r.mean_across = across / static_cast<double>(n_across);
  if (r.mean_within == 0.0) throw EvalError("separation undefined: mean within-class distance is zero");
  r.separation = (r.mean_across - r.mean_within) / r.mean_within * 100.0;
  return r;
}

}  // namespace

SeparationReport separation(std::span<const StyleVector> vectors, std::span<const std::string> labels,
                            Distance metric) {
  check_separation_input(vectors, labels);
  const std::size_t n = vectors.size();
  std::vector<double> within(n, 0.0), across(n, 0.0);
  std::vector<long> n_within(n, 0);
  // Row sums are reduced serially afterwards so the result does not depend on
  // the thread count.
#pragma omp parallel for schedule(dynamic, 16)
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = distance(vectors[i], vectors[j], metric);
      if (labels[i] == labels[j]) {
        within[i] += d;
        ++n_within[i];
      } else {
        across[i] += d;
      }
    }
  }
  double w = 0.0, a = 0.0;
  long nw = 0;
  for (std::size_t i = 0; i < n; ++i) {
    w += within[i];
    a += across[i];
    nw += n_within[i];
  }
  const long total = static_cast<long>(n) * static_cast<long>(n - 1) / 2;
  return finish_separation(w, nw, a, total - nw);
}

SeparationReport separation_reference(std::span<const StyleVector> vectors, std::span<const std::string> labels,
                                      Distance metric) {
  check_separation_input(vectors, labels);
  double w = 0.0, a = 0.0;
  long nw = 0, na = 0;
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    for (std::size_t j = i + 1; j < vectors.size(); ++j) {
      const double d = distance(vectors[i], vectors[j], metric);
      if (labels[i] == labels[j]) {
        w += d;
        ++nw;
      } else {
        a += d;
        ++na;
      }
    }
  }
  return finish_separation(w, nw, a, na);
}

nlohmann::json SeparationReport::to_json() const {
  return {{"mean_within", mean_within},
          {"mean_across", mean_across},
          {"separation", separation},
          {"within_pairs", within_pairs},
          {"across_pairs", across_pairs}};
}

void export_styles(const std::filesystem::path& matrix_path, const std::filesystem::path& labels_path,
                   std::span<const StyleVector> vectors, std::span<const std::string> labels,
                   const std::string& matrix_name) {
  if (vectors.size() != labels.size()) throw EvalError("export: one label per vector required");
  const std::size_t cols = vectors.empty() ? 0 : vectors.front().size();
  std::ofstream out(matrix_path, std::ios::binary);
  if (!out) throw EvalError("cannot write " + matrix_path.string());
  for (const auto& v : vectors) {
    if (v.size() != cols) throw EvalError("export: vectors differ in length");
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  }
  if (!out) throw EvalError("write failed: " + matrix_path.string());
  nlohmann::json side{{"rows", vectors.size()},
                      {"cols", cols},
                      {"dtype", "float32"},
                      {"byte_order", "little"},
                      {"matrix", matrix_name.empty() ? matrix_path.filename().string() : matrix_name},
                      {"labels", std::vector<std::string>(labels.begin(), labels.end())}};
  std::ofstream lo(labels_path);
  if (!lo) throw EvalError("cannot write " + labels_path.string());
  lo << side.dump(2) << "\n";
}

}  // namespace textsettr
