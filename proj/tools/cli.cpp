#include "cli.hpp"

#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "textsettr/corpus.hpp"
#include "textsettr/eval.hpp"
#include "textsettr/inference.hpp"
#include "textsettr/model.hpp"
#include "textsettr/training.hpp"

namespace textsettr::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Failure {
  int code;
  std::string message;
};

[[noreturn]] void fail(int code, std::string message) { throw Failure{code, std::move(message)}; }

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) fail(kUsage, "--" + what + " is required");
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) fail(kMissingFile, what + " file not found: " + path);
}

void require_out(const std::string& path) {
  if (path.empty()) fail(kUsage, "--out is required");
  const fs::path parent = fs::path(path).parent_path();
  std::error_code ec;
  if (!parent.empty() && !fs::is_directory(parent, ec))
    fail(kMissingFile, "output directory does not exist: " + parent.string());
}

fs::path temp_path(const fs::path& path) { return path.string() + ".tmp" + std::to_string(::getpid()); }

void write_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = temp_path(path);
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) fail(kFailure, "cannot write " + tmp.string());
    out << content;
    if (!out) fail(kFailure, "write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(kMissingFile, "cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (normalize_spaces(line).empty()) continue;
    lines.push_back(line);
  }
  return lines;
}

std::pair<double, double> parse_range(const std::string& text, const char* flag) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) fail(kUsage, std::string(flag) + " expects LO:HI, got '" + text + "'");
  try {
    std::size_t used = 0;
    const double lo = std::stod(text.substr(0, colon), &used);
    if (used != colon) throw std::invalid_argument("trailing");
    const std::string hi_text = text.substr(colon + 1);
    const double hi = std::stod(hi_text, &used);
    if (used != hi_text.size()) throw std::invalid_argument("trailing");
    if (!(lo >= 0.0 && lo <= hi && hi <= 1.0)) fail(kUsage, std::string(flag) + " needs 0 <= LO <= HI <= 1");
    return {lo, hi};
  } catch (const std::logic_error&) {
    fail(kUsage, std::string(flag) + " expects LO:HI, got '" + text + "'");
  }
}

json ranges_json(const TuningRanges& r) {
  return {{"add", {r.add_low, r.add_high}}, {"delete", {r.del_low, r.del_high}}};
}

json decode_json(const DecodeOptions& d) {
  return {{"mode", d.mode == DecodeOptions::Mode::Greedy ? "greedy" : "sample"},
          {"temperature", d.temperature},
          {"max_len", d.max_len}};
}

// Flags shared by the inference subcommands; unset values keep the config's.
struct Overrides {
  std::optional<double> lambda;
  std::string add_range, delete_range, mode, decode;
  std::optional<double> temperature;
  std::string source, target;

  void apply(TuningRanges& r) const {
    if (!add_range.empty()) std::tie(r.add_low, r.add_high) = parse_range(add_range, "--add-range");
    if (!delete_range.empty()) std::tie(r.del_low, r.del_high) = parse_range(delete_range, "--delete-range");
  }
  void apply(DecodeOptions& d) const {
    if (decode == "greedy") d.mode = DecodeOptions::Mode::Greedy;
    if (decode == "sample") d.mode = DecodeOptions::Mode::Sample;
    if (temperature) d.temperature = *temperature;
    if (!(d.temperature > 0.0)) fail(kUsage, "--temperature must be positive");
  }
  void apply(ExemplarConfig& c) const {
    if (lambda) c.lambda = *lambda;
    if (c.lambda < 0.0) fail(kUsage, "--lambda must be non-negative");
    apply(c.ranges);
    if (!mode.empty()) c.mode = parse_style_mode(mode);
    apply(c.decode);
    if (!source.empty()) c.source = source;
    if (!target.empty()) c.target = target;
    if (!c.find(c.source)) fail(kInvalidConfig, "unknown source class '" + c.source + "'");
    if (!c.find(c.target)) fail(kInvalidConfig, "unknown target class '" + c.target + "'");
  }
};

void add_overrides(CLI::App* cmd, Overrides& o, bool with_mode) {
  cmd->add_option("--lambda", o.lambda, "delta scale");
  cmd->add_option("--add-range", o.add_range, "add-rate range LO:HI");
  cmd->add_option("--delete-range", o.delete_range, "delete-rate range LO:HI");
  if (with_mode) cmd->add_option("--mode", o.mode, "delta or overwrite")->check(CLI::IsMember({"delta", "overwrite"}));
  cmd->add_option("--decode", o.decode, "greedy or sample")->check(CLI::IsMember({"greedy", "sample"}));
  cmd->add_option("--temperature", o.temperature, "sampling temperature");
  cmd->add_option("--source", o.source, "source class (default from the exemplar config)");
  cmd->add_option("--target", o.target, "target class (default from the exemplar config)");
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& seed, std::ostream& log) {
  if (seed) return *seed;
  const std::uint64_t s = (static_cast<std::uint64_t>(std::random_device{}()) << 32) ^ std::random_device{}();
  log << "no --seed given; generated seed " << s << "\n";
  return s;
}

void log_resolved(std::ostream& log, const std::string& command, const json& resolved) {
  log << json{{"command", command}, {"resolved", resolved}}.dump() << "\n";
}

template <class F>
auto with_code(int code, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Failure&) {
    throw;
  } catch (const std::exception& e) {
    fail(code, e.what());
  }
}

Checkpoint load_model(const std::string& path) {
  require_file(path, "checkpoint");
  return with_code(kInvalidConfig, [&] { return load_checkpoint(path); });
}

ExemplarConfig load_exemplars(const std::string& path) {
  require_file(path, "exemplars");
  return with_code(kInvalidConfig, [&] { return load_exemplar_config(path); });
}

std::string ndjson(const std::vector<TransferResult>& results) {
  std::string out;
  for (const auto& r : results) out += r.to_json().dump() + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

struct Common {
  std::string config, checkpoint, exemplars, input, out;
  std::optional<std::uint64_t> seed;
};

int cmd_gen_corpus(const Common& c, std::size_t documents, bool strip, const std::string& exemplars_out,
                   std::size_t per_class, std::ostream& log) {
  require_file(c.config, "config");
  require_out(c.out);
  if (!exemplars_out.empty()) require_out(exemplars_out);
  const SyntheticStyleSpec spec = with_code(kInvalidConfig, [&] { return load_style_spec(c.config); });
  const std::uint64_t seed = resolve_seed(c.seed, log);
  log_resolved(log, "gen-corpus", {{"config", c.config}, {"seed", seed}, {"documents", documents}, {"strip_labels", strip}});
  auto records = build_records(generate_synthetic_corpus(spec, documents, seed));

  std::optional<std::string> exemplar_text;
  if (!exemplars_out.empty()) {
    // Exemplars come from their own document stream, separate from the corpus.
    const auto pool = build_records(generate_synthetic_corpus(spec, std::max<std::size_t>(64, per_class * 2), Rng(seed).split(0xe8e).next_u64()));
    const auto& axis = spec.axes.front();
    ExemplarConfig ec;
    ec.name = axis.name;
    for (const auto& v : axis.values) {
      auto set = std::make_shared<ExemplarSet>();
      set->name = v;
      for (const auto& r : pool) {
        if (set->sentences.size() >= per_class) break;
        if (split_style_id(*r.style_id).front() == v) set->sentences.push_back(r.target);
      }
      if (set->sentences.size() < per_class) fail(kRuntime, "not enough exemplars for class " + v);
      ec.classes.push_back(std::move(set));
    }
    ec.source = axis.values[0];
    ec.target = axis.values[1];
    exemplar_text = ec.to_json().dump(2) + "\n";
  }
  if (strip) records = strip_labels(std::move(records));
  const fs::path tmp = temp_path(c.out);
  write_records(tmp, records);
  fs::rename(tmp, c.out);
  if (exemplar_text) write_atomic(exemplars_out, *exemplar_text);
  log << "wrote " << records.size() << " pairs to " << c.out << "\n";
  return kOk;
}

int cmd_train(const Common& c, const std::string& metrics_path, std::ostream& log) {
  require_file(c.config, "config");
  require_file(c.input, "input");
  require_out(c.out);
  if (!metrics_path.empty()) require_out(metrics_path);
  TrainConfig cfg = with_code(kInvalidConfig, [&] { return load_train_config(c.config); });
  cfg.seed = c.seed ? *c.seed : cfg.seed;
  const auto records = with_code(kInvalidConfig, [&] { return strip_labels(read_records(c.input)); });
  const Vocabulary vocab = build_vocabulary(records, static_cast<std::size_t>(cfg.model.vocab_size));
  cfg.model.vocab_size = static_cast<int>(vocab.size());
  std::size_t dropped = 0;
  const auto pairs = tokenize_pairs(records, vocab, cfg.model.max_seq_len, &dropped);
  with_code(kInvalidConfig, [&] {
    cfg.validate();
    return 0;
  });
  if (pairs.empty()) fail(kInvalidConfig, "no usable training pairs in " + c.input);
  log_resolved(log, "train", {{"config", cfg.to_json()}, {"input", c.input}, {"pairs", pairs.size()}, {"dropped", dropped}});

  std::string metrics;
  json meta;
  const Model<float> model = with_code(kRuntime, [&] {
    return train(cfg, pairs, [&](const StepMetrics& m) {
      const std::string line = m.to_json().dump();
      metrics += line + "\n";
      log << line << "\n";
    }, &meta);
  });
  meta["train_config"] = cfg.to_json();
  meta["pairs"] = pairs.size();
  const fs::path tmp = temp_path(c.out);
  save_checkpoint(tmp, model, vocab, meta);
  if (!metrics_path.empty()) write_atomic(metrics_path, metrics);
  fs::rename(tmp, c.out);
  log << "saved checkpoint " << c.out << "\n";
  return kOk;
}

int cmd_transfer(const Common& c, const Overrides& o, bool completion, std::ostream& log) {
  require_file(c.input, "input");
  require_out(c.out);
  const Checkpoint ck = load_model(c.checkpoint);
  ExemplarConfig ec = load_exemplars(c.exemplars);
  if (completion) ec.ranges = Restyler::kCompleteRanges;
  o.apply(ec);
  if (completion) ec.mode = StyleMode::Delta;
  const std::uint64_t seed = resolve_seed(c.seed, log);
  const auto lines = read_lines(c.input);
  log_resolved(log, completion ? "complete" : "transfer",
               {{"checkpoint", c.checkpoint}, {"exemplars", c.exemplars}, {"source", ec.source}, {"target", ec.target},
                {"lambda", ec.lambda}, {"ranges", ranges_json(ec.ranges)}, {"mode", style_mode_name(ec.mode)},
                {"decode", decode_json(ec.decode)}, {"seed", seed}, {"inputs", lines.size()}});
  const Restyler rs(ck.model, ck.vocab);
  std::vector<TransferRequest> reqs;
  for (const auto& line : lines) {
    TransferRequest r;
    r.input = line;
    r.source = ec.find(ec.source);
    r.target = ec.find(ec.target);
    r.lambda = ec.lambda;
    r.ranges = ec.ranges;
    r.mode = ec.mode;
    r.decode = ec.decode;
    reqs.push_back(std::move(r));
  }
  const auto results = with_code(kRuntime, [&] { return rs.transfer_many(reqs, seed); });
  write_atomic(c.out, ndjson(results));
  return kOk;
}

int cmd_shorten(const Common& c, std::ostream& log) {
  require_file(c.input, "input");
  require_out(c.out);
  const Checkpoint ck = load_model(c.checkpoint);
  const auto lines = read_lines(c.input);
  log_resolved(log, "shorten", {{"checkpoint", c.checkpoint}, {"ranges", ranges_json(Restyler::kShortenRanges)},
                                {"inputs", lines.size()}});
  const Restyler rs(ck.model, ck.vocab);
  std::vector<TransferResult> results;
  with_code(kRuntime, [&] {
    for (const auto& l : lines) results.push_back(rs.shorten(l));
    return 0;
  });
  write_atomic(c.out, ndjson(results));
  return kOk;
}

int cmd_augment(const Common& c, const Overrides& o, double sigma, std::ostream& log) {
  require_file(c.input, "input");
  require_out(c.out);
  if (!(sigma >= 0.0)) fail(kUsage, "--sigma must be non-negative");
  const Checkpoint ck = load_model(c.checkpoint);
  TuningRanges ranges{0.1, 0.3, 0.1, 0.3};
  o.apply(ranges);
  const std::uint64_t seed = resolve_seed(c.seed, log);
  const auto lines = read_lines(c.input);
  log_resolved(log, "augment", {{"checkpoint", c.checkpoint}, {"sigma", sigma}, {"ranges", ranges_json(ranges)},
                                {"seed", seed}, {"inputs", lines.size()}});
  const Restyler rs(ck.model, ck.vocab);
  std::vector<TransferResult> results;
  const Rng root(seed);
  with_code(kRuntime, [&] {
    for (std::size_t i = 0; i < lines.size(); ++i) {
      Rng rng = root.split(i);
      results.push_back(rs.augment(lines[i], sigma, ranges, rng));
    }
    return 0;
  });
  write_atomic(c.out, ndjson(results));
  return kOk;
}

int cmd_eval(const Common& c, const Overrides& o, const std::string& references, std::size_t limit,
             std::ostream& log) {
  require_file(c.config, "config");
  require_file(c.input, "input");
  if (!references.empty()) require_file(references, "references");
  require_out(c.out);
  const SyntheticStyleSpec spec = with_code(kInvalidConfig, [&] { return load_style_spec(c.config); });
  const Checkpoint ck = load_model(c.checkpoint);
  ExemplarConfig ec = load_exemplars(c.exemplars);
  o.apply(ec);
  const std::uint64_t seed = resolve_seed(c.seed, log);
  const StyleOracle oracle(spec);
  std::vector<std::string> classes;
  for (const auto& set : ec.classes) classes.push_back(set->name);
  const std::size_t axis = with_code(kInvalidConfig, [&] { return oracle.axis_of(classes); });
  auto tests = with_code(kInvalidConfig, [&] { return labeled_targets(read_records(c.input), oracle, axis); });
  if (limit > 0 && tests.size() > limit) tests.resize(limit);
  std::vector<std::string> refs;
  if (!references.empty()) {
    refs = read_lines(references);
    if (refs.size() < tests.size()) fail(kInvalidConfig, "references file has fewer lines than the test set");
    refs.resize(tests.size());
  }
  const json settings{{"checkpoint", c.checkpoint},
                      {"exemplars", c.exemplars},
                      {"lambda", ec.lambda},
                      {"ranges", ranges_json(ec.ranges)},
                      {"mode", style_mode_name(ec.mode)},
                      {"decode", decode_json(ec.decode)},
                      {"seed", seed},
                      {"examples", tests.size()}};
  log_resolved(log, "eval", settings);

  const Restyler rs(ck.model, ck.vocab);
  std::uint64_t direction = 0;
  const TransferFn model_fn = [&](const std::vector<std::string>& inputs, const std::string& src,
                                  const std::string& trg) {
    std::vector<TransferRequest> reqs;
    for (const auto& s : inputs) {
      TransferRequest r;
      r.input = s;
      r.source = ec.find(src);
      r.target = ec.find(trg);
      r.lambda = ec.lambda;
      r.ranges = ec.ranges;
      r.mode = ec.mode;
      r.decode = ec.decode;
      reqs.push_back(std::move(r));
    }
    std::vector<std::string> out;
    for (auto& res : rs.transfer_many(reqs, Rng(seed).split(direction++).next_u64())) out.push_back(std::move(res.output));
    return out;
  };
  EvalReport report = with_code(kRuntime, [&] { return evaluate_transfer(tests, classes, oracle, model_fn, refs); });
  report.settings = settings;
  const EvalReport ceiling = evaluate_transfer(tests, classes, oracle, oracle_rewrite_transfer(oracle, axis), refs);
  const EvalReport identity = evaluate_transfer(tests, classes, oracle, identity_transfer(), refs);
  json out = report.to_json();
  out["baselines"] = {{"rewrite_ceiling", ceiling.to_json()}, {"identity", identity.to_json()}};
  write_atomic(c.out, out.dump(2) + "\n");
  log << "accuracy " << report.accuracy << " content " << report.content << " g " << report.g_score << "\n";
  return kOk;
}

int cmd_export(const Common& c, std::size_t per_class, std::ostream& log) {
  require_file(c.input, "input");
  require_out(c.out);
  const Checkpoint ck = load_model(c.checkpoint);
  const auto records = with_code(kInvalidConfig, [&] { return read_records(c.input); });
  std::map<std::string, std::size_t> seen;
  std::vector<TokenSeq> seqs;
  std::vector<std::string> labels;
  for (const auto& r : records) {
    const std::string label = r.style_id.value_or("");
    if (per_class > 0 && seen[label] >= per_class) continue;
    TokenSeq t = ck.vocab.encode(r.target);
    if (t.empty() || static_cast<int>(t.size()) > ck.config.max_seq_len) continue;
    ++seen[label];
    seqs.push_back(std::move(t));
    labels.push_back(label);
  }
  log_resolved(log, "export-styles", {{"checkpoint", c.checkpoint}, {"input", c.input}, {"vectors", seqs.size()}});
  const auto styles = with_code(kRuntime, [&] { return extract_styles(ck.model, seqs); });
  const fs::path matrix = c.out;
  const fs::path sidecar = c.out + ".labels.json";
  const fs::path tmp_m = temp_path(matrix), tmp_s = temp_path(sidecar);
  export_styles(tmp_m, tmp_s, styles, labels, matrix.filename().string());
  fs::rename(tmp_m, matrix);
  fs::rename(tmp_s, sidecar);
  if (seen.size() >= 2) {
    try {
      log << "separation " << separation(styles, labels).to_json().dump() << "\n";
    } catch (const EvalError& e) {
      log << "separation unavailable: " << e.what() << "\n";
    }
  }
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& log) {
  CLI::App app{"Label-free text style transfer", "textsettr"};
  app.require_subcommand(1);
  Common c;
  Overrides o;

  auto common = [&](CLI::App* cmd, bool config, bool checkpoint, bool exemplars) {
    if (config) cmd->add_option("--config", c.config, "config file");
    if (checkpoint) cmd->add_option("--checkpoint", c.checkpoint, "model checkpoint");
    if (exemplars) cmd->add_option("--exemplars", c.exemplars, "exemplar/settings file");
    cmd->add_option("--input", c.input, "input file");
    cmd->add_option("--out", c.out, "output file");
    cmd->add_option("--seed", c.seed, "random seed");
  };

  std::size_t documents = 6000, per_class = 32;
  bool strip = false;
  std::string exemplars_out;
  auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic style corpus");
  common(gen, true, false, false);
  gen->add_option("--documents", documents, "number of documents");
  gen->add_flag("--strip-labels", strip, "omit style ids");
  gen->add_option("--exemplars-out", exemplars_out, "also write an exemplar config");
  gen->add_option("--per-class", per_class, "exemplars per class");

  std::string metrics;
  auto* tr = app.add_subcommand("train", "train a model");
  common(tr, true, false, false);
  tr->add_option("--metrics", metrics, "NDJSON metrics file");

  auto* tf = app.add_subcommand("transfer", "restyle input lines");
  common(tf, false, true, true);
  add_overrides(tf, o, true);

  auto* co = app.add_subcommand("complete", "style-aware completion");
  common(co, false, true, true);
  add_overrides(co, o, false);

  auto* sh = app.add_subcommand("shorten", "shorten input lines");
  common(sh, false, true, false);

  double sigma = 0.08;
  auto* au = app.add_subcommand("augment", "random style-noise augmentation");
  common(au, false, true, false);
  au->add_option("--sigma", sigma, "style noise standard deviation");
  au->add_option("--add-range", o.add_range, "add-rate range LO:HI");
  au->add_option("--delete-range", o.delete_range, "delete-rate range LO:HI");

  std::string references;
  std::size_t limit = 0;
  auto* ev = app.add_subcommand("eval", "oracle accuracy, self-BLEU and G-score");
  common(ev, true, true, true);
  add_overrides(ev, o, true);
  ev->add_option("--references", references, "reference outputs, one per test example");
  ev->add_option("--limit", limit, "evaluate at most this many test examples");

  std::size_t export_per_class = 0;
  auto* ex = app.add_subcommand("export-styles", "write style vectors and labels");
  common(ex, false, true, false);
  ex->add_option("--per-class", export_per_class, "vectors per label (0 = all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_corpus(c, documents, strip, exemplars_out, per_class, log);
    if (tr->parsed()) return cmd_train(c, metrics, log);
    if (tf->parsed()) return cmd_transfer(c, o, false, log);
    if (co->parsed()) return cmd_transfer(c, o, true, log);
    if (sh->parsed()) return cmd_shorten(c, log);
    if (au->parsed()) return cmd_augment(c, o, sigma, log);
    if (ev->parsed()) return cmd_eval(c, o, references, limit, log);
    if (ex->parsed()) return cmd_export(c, export_per_class, log);
  } catch (const Failure& f) {
    log << "error: " << f.message << "\n";
    return f.code;
  } catch (const InferenceError& e) {
    log << "error: " << e.what() << "\n";
    return kInvalidConfig;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}

}  // namespace textsettr::cli
