#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "test_support.hpp"
#include "textsettr/inference.hpp"

using namespace textsettr;
using textsettr::testing::config_path;
using textsettr::testing::tiny_config;

namespace {

Vocabulary tiny_vocab() {
  std::vector<std::string> toks{"<unk>", "<s>", "</s>"};
  for (int i = 3; i < 20; ++i) toks.push_back("w" + std::to_string(i));
  return Vocabulary::from_tokens(toks);
}

std::shared_ptr<ExemplarSet> make_set(std::string name, std::vector<std::string> s) {
  return std::make_shared<ExemplarSet>(ExemplarSet{std::move(name), std::move(s)});
}

StyleVector random_vec(Rng& rng, std::size_t d) {
  StyleVector v(d);
  for (auto& x : v) x = static_cast<float>(rng.normal(0.0, 3.0));
  return v;
}

struct Fixture {
  Model<float> model = Model<float>::initialized(tiny_config(), 21);
  Vocabulary vocab = tiny_vocab();
  std::shared_ptr<ExemplarSet> a = make_set("a", {"w3 w4 w5", "w6 w7", "w3 w8 w9 w10"});
  std::shared_ptr<ExemplarSet> b = make_set("b", {"w11 w12", "w13 w14 w15", "w16 w17 w18 w19"});
};

}  // namespace

TEST_SUITE("inference") {
  TEST_CASE("target_style algebra over random triples") {
    Rng rng(1);
    for (int t = 0; t < 1000; ++t) {
      const std::size_t d = 1 + rng.below(64);
      const StyleVector x = random_vec(rng, d), s = random_vec(rng, d), g = random_vec(rng, d);
      const double lambda = rng.uniform(0.0, 10.0);
      CHECK(target_style(x, s, g, 0.0) == x);
      CHECK(target_style(x, s, s, lambda) == x);
      const StyleVector one = target_style(x, s, g, lambda);
      const StyleVector two = target_style(x, s, g, 2.0 * lambda);
      for (std::size_t k = 0; k < d; ++k) {
        const double lhs = static_cast<double>(two[k]) - x[k];
        const double rhs = 2.0 * (static_cast<double>(one[k]) - x[k]);
        CHECK(std::abs(lhs - rhs) <= 1e-5 * (1.0 + std::abs(lhs)));
      }
    }
    CHECK_THROWS_AS(target_style({1, 2}, {1}, {1, 2}, 1.0), InferenceError);
  }

  TEST_CASE("exemplar means: permutation invariant, duplication weighted") {
    Fixture f;
    const StyleVector base = mean_exemplar_style(f.model, f.vocab, *f.a);
    auto perm = *f.a;
    std::reverse(perm.sentences.begin(), perm.sentences.end());
    const StyleVector p = mean_exemplar_style(f.model, f.vocab, perm);
    for (std::size_t k = 0; k < base.size(); ++k) CHECK(p[k] == doctest::Approx(base[k]).epsilon(1e-6));

    auto twice = *f.a;
    twice.sentences.insert(twice.sentences.end(), f.a->sentences.begin(), f.a->sentences.end());
    const StyleVector t = mean_exemplar_style(f.model, f.vocab, twice);
    for (std::size_t k = 0; k < base.size(); ++k) CHECK(t[k] == doctest::Approx(base[k]).epsilon(1e-6));

    // One sentence repeated three times weighs three.
    auto heavy = *f.a;
    heavy.sentences.push_back(f.a->sentences[0]);
    heavy.sentences.push_back(f.a->sentences[0]);
    const StyleVector h = mean_exemplar_style(f.model, f.vocab, heavy);
    const StyleVector v0 = extract_style(f.model, f.vocab.encode(f.a->sentences[0]));
    for (std::size_t k = 0; k < base.size(); ++k)
      CHECK(h[k] == doctest::Approx((3.0 * base[k] + 2.0 * v0[k]) / 5.0).epsilon(1e-5));

    CHECK_THROWS_AS(mean_exemplar_style(f.model, f.vocab, ExemplarSet{"e", {}}), InferenceError);
    ExemplarSet big{"big", std::vector<std::string>(ExemplarSet::kMaxExemplars + 1, "w3")};
    CHECK_THROWS_AS(big.validate(), InferenceError);
  }

  TEST_CASE("style cache keys on model and exemplar set") {
    Fixture f;
    StyleCache cache;
    const StyleVector v1 = cache.get(f.model, 1, f.vocab, *f.a);
    CHECK(cache.get(f.model, 1, f.vocab, *f.a) == v1);
    CHECK(cache.size() == 1);
    cache.get(f.model, 1, f.vocab, *f.b);
    CHECK(cache.size() == 2);
    const auto other = Model<float>::initialized(tiny_config(), 22);
    const StyleVector v2 = cache.get(other, 2, f.vocab, *f.a);
    CHECK(cache.size() == 3);
    CHECK(v2 != v1);
    cache.clear();
    CHECK(cache.size() == 0);
  }

  TEST_CASE("overwrite and delta styles differ") {
    Fixture f;
    Restyler r(f.model, f.vocab);
    TransferRequest req;
    req.input = "w3 w9 w12";
    req.source = f.a;
    req.target = f.b;
    req.lambda = 2.0;
    const StyleVector vx = extract_style(f.model, r.tokenize(req.input));
    const StyleVector delta = r.request_style(req, vx);
    req.mode = StyleMode::Overwrite;
    const StyleVector over = r.request_style(req, vx);
    CHECK(delta != over);
    CHECK(over == r.exemplar_style(*f.b));
    CHECK(delta == target_style(vx, r.exemplar_style(*f.a), r.exemplar_style(*f.b), 2.0));
  }

  TEST_CASE("transfer is seeded and transfer_many matches it") {
    Fixture f;
    Restyler r(f.model, f.vocab);
    std::vector<TransferRequest> reqs;
    for (const char* in : {"w3 w4", "w5 w6 w7", "w8", "w9 w10 w11 w12"}) {
      TransferRequest q;
      q.input = in;
      q.source = f.a;
      q.target = f.b;
      q.decode.mode = DecodeOptions::Mode::Sample;
      q.decode.max_len = 10;
      reqs.push_back(q);
    }
    reqs[1].decode.mode = DecodeOptions::Mode::Greedy;
    const auto many = r.transfer_many(reqs, 77);
    REQUIRE(many.size() == reqs.size());
    for (std::size_t i = 0; i < reqs.size(); ++i) {
      Rng rng = Rng(77).split(i);
      const TransferResult one = r.transfer(reqs[i], rng);
      CHECK(one.output == many[i].output);
      CHECK(one.to_json() == many[i].to_json());
    }
    CHECK(r.transfer_many(reqs, 77)[0].output == many[0].output);
  }

  TEST_CASE("augment: sigma 0 is zero-delta transfer, seeded otherwise") {
    Fixture f;
    Restyler r(f.model, f.vocab);
    const TuningRanges ranges{0.1, 0.3, 0.1, 0.3};
    TransferRequest q;
    q.input = "w3 w7 w11 w15";
    q.source = f.a;
    q.target = f.b;
    q.lambda = 0.0;
    q.ranges = ranges;
    Rng r0(1), r1(2);
    CHECK(r.augment(q.input, 0.0, ranges, r0).output == r.transfer(q, r1).output);
    Rng a(5), b(5);
    CHECK(r.augment(q.input, 0.5, ranges, a).output == r.augment(q.input, 0.5, ranges, b).output);
    CHECK_THROWS_AS(r.augment(q.input, -1.0, ranges, a), InferenceError);
  }

  TEST_CASE("shorten uses the input's own style") {
    Fixture f;
    Restyler r(f.model, f.vocab);
    const TransferResult res = r.shorten("w3 w4 w5 w6");
    CHECK(res.delta_norm == 0.0);
    CHECK(res.target_style_norm == res.input_style_norm);
    CHECK(res.input_style_norm == doctest::Approx(l2_norm(extract_style(f.model, f.vocab.encode("w3 w4 w5 w6")))));
  }

  TEST_CASE("bad inputs are rejected, never truncated") {
    Fixture f;
    Restyler r(f.model, f.vocab);
    CHECK_THROWS_AS(r.tokenize(""), InferenceError);
    CHECK_THROWS_AS(r.tokenize("   "), InferenceError);
    std::string longer;
    for (int i = 0; i < 13; ++i) longer += "w3 ";
    CHECK_THROWS_AS(r.tokenize(longer), InferenceError);
    TransferRequest q;
    q.input = "w3";
    q.source = f.a;
    q.target = f.b;
    q.ranges = {0.5, 0.1, 0.0, 0.0};
    Rng rng(1);
    CHECK_THROWS_AS(r.transfer(q, rng), InferenceError);
  }

  TEST_CASE("exemplar config files") {
    const ExemplarConfig c = load_exemplar_config(config_path("us_uk_exemplars.json"));
    CHECK(c.find(c.source) != nullptr);
    CHECK(c.find(c.target) != nullptr);
    CHECK(c.find("nope") == nullptr);
    CHECK(c.find(c.source)->sentences.size() == 32);
    CHECK(ExemplarConfig::from_json(c.to_json()).to_json() == c.to_json());
    auto j = c.to_json();
    j["lambda"] = -1;
    CHECK_THROWS_AS(ExemplarConfig::from_json(j), InferenceError);
    j = c.to_json();
    j["target"] = "mars";
    CHECK_THROWS_AS(ExemplarConfig::from_json(j), InferenceError);
    CHECK(parse_style_mode("overwrite") == StyleMode::Overwrite);
    CHECK_THROWS_AS(parse_style_mode("sideways"), InferenceError);
  }

  TEST_CASE("result json layout") {
    TransferResult r;
    r.input = "a";
    r.output = "b";
    const auto j = r.to_json();
    for (const char* k : {"input", "output", "measured_add_rate", "measured_delete_rate", "style_norms"})
      CHECK(j.contains(k));
  }
}
