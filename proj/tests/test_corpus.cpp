#include <doctest.h>

#include <set>

#include "test_support.hpp"
#include "textsettr/corpus.hpp"
#include "textsettr/tokenizer.hpp"

using namespace textsettr;
using textsettr::testing::data_path;
using textsettr::testing::config_path;

namespace {

const char* kTinySpec = R"({
  "seed": 3, "base_vocab_size": 60, "sentence_length_range": [8, 16], "sentences_per_document": [2, 4],
  "marker_rate": 0.3,
  "axes": [
    {"name": "dialect", "values": ["us", "uk"],
     "lexicon": [["color", "colour"], ["truck", "lorry"], ["fall", "autumn"]]},
    {"name": "register", "values": ["plain", "fancy"],
     "lexicon": [["buy", "purchase"], ["help", "assist"]],
     "punctuation": [{}, {",": ";"}]}
  ]
})";

}  // namespace

TEST_SUITE("corpus") {
  TEST_CASE("preprocessing matches the Python transcription on the fixture") {
    const auto fx = textsettr::testing::read_json(data_path("a4_fixture.json"));
    const auto& lines = fx["lines"];
    REQUIRE(lines.size() == 200);
    for (std::size_t i = 0; i < lines.size(); ++i) {
      const std::string raw = lines[i].get<std::string>();
      CAPTURE(raw);
      CHECK(preprocess_review_line(raw) == fx["preprocessed"][i].get<std::string>());
      CHECK(acceptable_line(preprocess_review_line(raw)) == fx["acceptable"][i].get<bool>());
      if (fx["clipped"][i].is_null())
        CHECK_THROWS_AS(clip_to_last_period(raw), CorpusError);
      else
        CHECK(clip_to_last_period(raw) == fx["clipped"][i].get<std::string>());
    }
  }

  TEST_CASE("adjacent pairs match the Python transcription") {
    const auto fx = textsettr::testing::read_json(data_path("a4_fixture.json"));
    std::size_t total = 0;
    for (std::size_t r = 0; r < fx["reviews"].size(); ++r) {
      const auto got = adjacent_lines(fx["reviews"][r].get<std::string>());
      const auto& want = fx["pairs"][r];
      REQUIRE(got.size() == want.size());
      for (std::size_t k = 0; k < got.size(); ++k) {
        CHECK(got[k].first == want[k][0].get<std::string>());
        CHECK(got[k].second == want[k][1].get<std::string>());
      }
      total += got.size();
    }
    CHECK(total > 10);
  }

  TEST_CASE("html unescaping matches html.unescape on the covered entities") {
    const auto fx = textsettr::testing::read_json(data_path("a4_fixture.json"));
    for (const auto& c : fx["unescape"]) CHECK(html_unescape(c[0].get<std::string>()) == c[1].get<std::string>());
  }

  TEST_CASE("acceptable_line bounds") {
    CHECK_FALSE(acceptable_line(""));
    CHECK_FALSE(acceptable_line(std::string(29, 'a')));
    CHECK(acceptable_line(std::string(30, 'a')));
    CHECK(acceptable_line(std::string(99, 'a')));
    CHECK_FALSE(acceptable_line(std::string(100, 'a')));
    CHECK_FALSE(acceptable_line(std::string(40, 'a') + "#"));
    CHECK_FALSE(acceptable_line(std::string(40, 'a') + "A"));
  }

  TEST_CASE("a single-line review yields nothing") { CHECK(adjacent_lines("one line only. that is long enough for sure.").empty()); }

  TEST_CASE("style spec parsing and validation") {
    const auto spec = parse_style_spec(kTinySpec);
    CHECK(spec.axes.size() == 2);
    CHECK(spec.axes[1].punctuation[1].at(',') == ';');
    CHECK_THROWS_AS(parse_style_spec(R"({"axes": []})"), CorpusError);
    CHECK_THROWS_AS(parse_style_spec(R"({"axes": [{"name": "a", "values": ["x", "y"], "lexicon": [["w", "w"]]}]})"),
                    CorpusError);
    CHECK_THROWS_AS(parse_style_spec(R"({"axes": [{"name": "a", "values": ["x", "y"], "lexicon": [["w"]]}]})"),
                    CorpusError);
    CHECK_THROWS_AS(parse_style_spec("not json"), CorpusError);
    CHECK_NOTHROW(load_style_spec(config_path("us_uk_style.json")));
  }

  TEST_CASE("generation is deterministic and every line survives extraction") {
    const auto spec = parse_style_spec(kTinySpec);
    const auto a = generate_synthetic_corpus(spec, 50, 9);
    const auto b = generate_synthetic_corpus(spec, 50, 9);
    REQUIRE(a.size() == 50);
    for (std::size_t d = 0; d < a.size(); ++d) {
      CHECK(a[d].lines == b[d].lines);
      CHECK(a[d].style_id == b[d].style_id);
      CHECK(extract_adjacent_pairs(a[d]).size() == a[d].lines.size() - 1);
      CHECK(split_style_id(*a[d].style_id).size() == 2);
    }
    const auto c = generate_synthetic_corpus(spec, 50, 10);
    CHECK(c[0].lines != a[0].lines);
  }

  TEST_CASE("generated lines carry only their own style's markers") {
    const auto spec = parse_style_spec(kTinySpec);
    for (const auto& doc : generate_synthetic_corpus(spec, 80, 4)) {
      const auto values = split_style_id(*doc.style_id);
      for (const auto& [ctx, tgt] : extract_adjacent_pairs(doc)) {
        for (std::size_t a = 0; a < spec.axes.size(); ++a) {
          const auto& ax = spec.axes[a];
          const auto own = static_cast<std::size_t>(std::find(ax.values.begin(), ax.values.end(), values[a]) - ax.values.begin());
          bool marked = false;
          for (const auto& w : split_words(tgt)) {
            for (const auto& row : ax.lexicon) {
              for (std::size_t v = 0; v < row.size(); ++v) {
                if (row[v] != w) continue;
                CHECK(v == own);
                marked = true;
              }
            }
          }
          CHECK(marked);
        }
      }
    }
  }

  TEST_CASE("records round trip and labels can be stripped") {
    const auto spec = parse_style_spec(kTinySpec);
    const auto records = build_records(generate_synthetic_corpus(spec, 20, 1));
    REQUIRE_FALSE(records.empty());
    textsettr::testing::TempDir dir("corpus");
    write_records(dir / "r.jsonl", records);
    const auto back = read_records(dir / "r.jsonl");
    REQUIRE(back.size() == records.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
      CHECK(back[i].context == records[i].context);
      CHECK(back[i].target == records[i].target);
      CHECK(back[i].style_id == records[i].style_id);
    }
    for (const auto& r : strip_labels(back)) CHECK_FALSE(r.style_id.has_value());
    CHECK_THROWS_AS(read_records(dir / "missing.jsonl"), CorpusError);
  }

  TEST_CASE("the shipped style corpus is large enough") {
    const auto spec = load_style_spec(config_path("us_uk_style.json"));
    const auto records = build_records(generate_synthetic_corpus(spec, 6000, 1));
    CHECK(records.size() >= 20000);
  }
}
