#include <doctest.h>

#include <fstream>
#include <sstream>

#include "../tools/cli.hpp"
#include "test_support.hpp"

using namespace textsettr;
using textsettr::testing::config_path;
using textsettr::testing::read_json;
using textsettr::testing::TempDir;

namespace {

int run_cli(std::vector<std::string> args, std::string* log_out = nullptr) {
  args.insert(args.begin(), "textsettr");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream log;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), log);
  if (log_out) *log_out = log.str();
  return code;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Corpus, exemplars and a 3-step checkpoint shared by the end-to-end cases.
struct Pipeline {
  TempDir dir{"cli"};
  std::string corpus = (dir / "corpus.jsonl").string();
  std::string test = (dir / "test.jsonl").string();
  std::string exemplars = (dir / "ex.json").string();
  std::string train_cfg = (dir / "train.json").string();
  std::string ckpt = (dir / "m.tstr").string();
  std::string inputs = (dir / "inputs.txt").string();

  Pipeline() {
    const std::string style = config_path("us_uk_style.json").string();
    REQUIRE(run_cli({"gen-corpus", "--config", style, "--seed", "1", "--documents", "60", "--out", corpus,
                     "--exemplars-out", exemplars, "--per-class", "8"}) == cli::kOk);
    REQUIRE(run_cli({"gen-corpus", "--config", style, "--seed", "2", "--documents", "10", "--out", test}) ==
            cli::kOk);
    std::ofstream(train_cfg) << R"({"tasks":["N"],"steps":3,"tokens_per_batch":128,"seed":3,"log_every":1,
      "model":{"d_model":16,"num_layers":1,"num_heads":2,"ffn_dim":24,"vocab_size":400,"max_seq_len":64}})";
    REQUIRE(run_cli({"train", "--config", train_cfg, "--input", corpus, "--out", ckpt}) == cli::kOk);
    std::ofstream(inputs) << "we saw the colour of the lorry .\n\nmy mom went to the movie .\n";
  }
};

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors") {
    CHECK(run_cli({}) == cli::kUsage);
    CHECK(run_cli({"fly"}) == cli::kUsage);
    CHECK(run_cli({"transfer", "--bogus", "1"}) == cli::kUsage);
    CHECK(run_cli({"transfer", "--input"}) == cli::kUsage);
  }

  TEST_CASE("missing files fail before any output is written") {
    TempDir dir("cli_missing");
    const auto out = dir / "out.jsonl";
    std::ofstream(dir / "in.txt") << "hello .\n";
    CHECK(run_cli({"transfer", "--checkpoint", (dir / "nope.tstr").string(), "--exemplars",
                   config_path("us_uk_exemplars.json").string(), "--input", (dir / "in.txt").string(), "--out",
                   out.string()}) == cli::kMissingFile);
    CHECK_FALSE(std::filesystem::exists(out));
    CHECK(run_cli({"gen-corpus", "--config", (dir / "none.json").string(), "--out", out.string()}) ==
          cli::kMissingFile);
    CHECK(run_cli({"gen-corpus", "--config", config_path("us_uk_style.json").string(), "--out",
                   (dir / "no_dir" / "x.jsonl").string()}) != cli::kOk);
    for (const auto& e : std::filesystem::directory_iterator(dir.path()))
      CHECK(e.path().filename() == "in.txt");
  }

  TEST_CASE("invalid configs get their own code") {
    TempDir dir("cli_invalid");
    std::ofstream(dir / "bad.json") << R"({"axes": "nope"})";
    CHECK(run_cli({"gen-corpus", "--config", (dir / "bad.json").string(), "--seed", "1", "--out",
                   (dir / "o.jsonl").string()}) == cli::kInvalidConfig);
    CHECK_FALSE(std::filesystem::exists(dir / "o.jsonl"));
  }

  TEST_CASE("gen-corpus is seeded and logs a generated seed") {
    TempDir dir("cli_gen");
    const std::string style = config_path("us_uk_style.json").string();
    const auto a = (dir / "a.jsonl").string(), b = (dir / "b.jsonl").string(), c = (dir / "c.jsonl").string();
    REQUIRE(run_cli({"gen-corpus", "--config", style, "--seed", "9", "--documents", "20", "--out", a}) == cli::kOk);
    REQUIRE(run_cli({"gen-corpus", "--config", style, "--seed", "9", "--documents", "20", "--out", b}) == cli::kOk);
    CHECK(slurp(a) == slurp(b));
    std::string log;
    REQUIRE(run_cli({"gen-corpus", "--config", style, "--documents", "20", "--out", c}, &log) == cli::kOk);
    CHECK(log.find("\"seed\"") != std::string::npos);
  }

  TEST_CASE("end to end: transfer, complete, shorten, augment, eval, export") {
    Pipeline p;
    const auto corpus_before = slurp(p.corpus);
    const auto inputs_before = slurp(p.inputs);

    const auto out = (p.dir / "t.jsonl").string();
    REQUIRE(run_cli({"transfer", "--checkpoint", p.ckpt, "--exemplars", p.exemplars, "--input", p.inputs, "--out",
                     out, "--seed", "5", "--lambda", "2", "--add-range", "0.1:0.3"}) == cli::kOk);
    std::ifstream in(out);
    std::string line;
    int records = 0;
    while (std::getline(in, line)) {
      const auto j = nlohmann::json::parse(line);
      for (const char* k : {"input", "output", "measured_add_rate", "measured_delete_rate", "style_norms"})
        CHECK(j.contains(k));
      ++records;
    }
    CHECK(records == 2);

    for (const char* cmd : {"complete", "augment"}) {
      const auto o = (p.dir / (std::string(cmd) + ".jsonl")).string();
      std::vector<std::string> args{cmd, "--checkpoint", p.ckpt, "--input", p.inputs, "--out", o, "--seed", "1"};
      if (std::string(cmd) == "complete") {
        args.push_back("--exemplars");
        args.push_back(p.exemplars);
      }
      CHECK(run_cli(args) == cli::kOk);
      CHECK(std::filesystem::exists(o));
    }
    CHECK(run_cli({"shorten", "--checkpoint", p.ckpt, "--input", p.inputs, "--out", (p.dir / "s.jsonl").string()}) ==
          cli::kOk);

    CHECK(run_cli({"transfer", "--checkpoint", p.ckpt, "--exemplars", p.exemplars, "--input", p.inputs, "--out",
                   out, "--add-range", "0.5:0.1"}) == cli::kUsage);
    CHECK(run_cli({"transfer", "--checkpoint", p.ckpt, "--exemplars", p.exemplars, "--input", p.inputs, "--out",
                   out, "--target", "mars"}) == cli::kInvalidConfig);

    const std::string style = config_path("us_uk_style.json").string();
    const auto r1 = (p.dir / "r1.json").string(), r2 = (p.dir / "r2.json").string();
    for (const auto& r : {r1, r2})
      REQUIRE(run_cli({"eval", "--config", style, "--checkpoint", p.ckpt, "--exemplars", p.exemplars, "--input",
                       p.test, "--out", r, "--seed", "4", "--lambda", "1.5", "--decode", "sample"}) == cli::kOk);
    CHECK(slurp(r1) == slurp(r2));
    const auto report = read_json(r1);
    CHECK(report["settings"]["lambda"] == 1.5);
    CHECK(report["settings"]["decode"]["mode"] == "sample");
    CHECK(report["baselines"]["rewrite_ceiling"]["accuracy"] == 100.0);
    CHECK(report["baselines"]["identity"]["content"].get<double>() == doctest::Approx(100.0));
    CHECK(report["directions"].size() == 2);

    const auto mat = (p.dir / "styles.f32").string();
    REQUIRE(run_cli({"export-styles", "--checkpoint", p.ckpt, "--input", p.test, "--out", mat, "--per-class", "5"}) ==
            cli::kOk);
    const auto side = read_json(mat + ".labels.json");
    CHECK(side["matrix"] == "styles.f32");
    CHECK(side["rows"] == 10);
    CHECK(std::filesystem::file_size(mat) == 10u * 16u * sizeof(float));

    CHECK(slurp(p.corpus) == corpus_before);
    CHECK(slurp(p.inputs) == inputs_before);
  }

  TEST_CASE("train logs its resolved config and honours --seed") {
    Pipeline p;
    const auto other = (p.dir / "m2.tstr").string();
    std::string log;
    REQUIRE(run_cli({"train", "--config", p.train_cfg, "--input", p.corpus, "--out", other, "--seed", "8"}, &log) ==
            cli::kOk);
    CHECK(log.find("\"resolved\"") != std::string::npos);
    const Checkpoint a = load_checkpoint(p.ckpt), b = load_checkpoint(other);
    CHECK(a.metadata["train_config"]["seed"] == 3);
    CHECK(b.metadata["train_config"]["seed"] == 8);
    CHECK(model_digest(a.model) != model_digest(b.model));
  }
}
