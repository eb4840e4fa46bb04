#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "textsettr/autograd.hpp"
#include "textsettr/rng.hpp"

using namespace textsettr;
using TapeD = Tape<double>;
using Var = TapeD::Var;

namespace {

Parameter<double> rand_param(const std::string& name, int r, int c, Rng& rng, double scale = 1.0) {
  Parameter<double> p(name, r, c);
  for (auto& v : p.value) v = scale * rng.normal();
  return p;
}

using Builder = std::function<Var(TapeD&, std::vector<Var>&)>;

// r^T y c with random r and c.
Var weighted_sum(TapeD& t, Var y, Rng& rng) {
  std::vector<double> c(static_cast<std::size_t>(t.cols(y))), r(static_cast<std::size_t>(t.rows(y)));
  for (auto& v : c) v = rng.normal();
  for (auto& v : r) v = rng.normal();
  Var proj = t.matmul(y, t.input(t.cols(y), 1, c));
  return t.matmul(t.input(1, t.rows(y), r), proj);
}

void gradcheck(std::vector<Parameter<double>>& params, const Builder& build, double tol = 1e-6) {
  auto loss_of = [&](bool record, TapeD*& keep) {
    auto* t = new TapeD(record);
    std::vector<Var> vars;
    for (auto& p : params) vars.push_back(t->param(p));
    Var l = build(*t, vars);
    keep = t;
    return l;
  };
  TapeD* tape = nullptr;
  Var l = loss_of(true, tape);
  tape->backward(l);
  for (auto& p : params) {
    const auto* g = tape->grad(p);
    REQUIRE(g != nullptr);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p.value[i];
      const double h = 1e-5;
      TapeD* tp = nullptr;
      p.value[i] = orig + h;
      Var lp = loss_of(false, tp);
      const double fp = tp->scalar(lp);
      delete tp;
      p.value[i] = orig - h;
      Var lm = loss_of(false, tp);
      const double fm = tp->scalar(lm);
      delete tp;
      p.value[i] = orig;
      const double num = (fp - fm) / (2 * h);
      INFO(p.name << "[" << i << "]");
      CHECK(std::abs((*g)[i] - num) <= tol * std::max(1.0, std::abs(num)));
    }
  }
  delete tape;
}

}  // namespace

TEST_SUITE("autograd") {
  TEST_CASE("linear, gelu and layer norm gradients") {
    Rng rng(1);
    std::vector<Parameter<double>> ps{rand_param("x", 5, 4, rng), rand_param("w", 4, 6, rng),
                                      rand_param("b", 1, 6, rng), rand_param("g", 1, 6, rng),
                                      rand_param("beta", 1, 6, rng)};
    Rng wr(2);
    gradcheck(ps, [&](TapeD& t, std::vector<Var>& v) {
      Rng r = wr;
      Var h = t.gelu(t.linear(v[0], v[1], v[2]));
      return weighted_sum(t, t.layer_norm(h, v[3], v[4]), r);
    });
  }

  TEST_CASE("add, scale and gather_rows gradients") {
    Rng rng(3);
    std::vector<Parameter<double>> ps{rand_param("table", 7, 3, rng), rand_param("y", 4, 3, rng)};
    Rng wr(4);
    gradcheck(ps, [&](TapeD& t, std::vector<Var>& v) {
      Rng r = wr;
      Var g = t.gather_rows(v[0], {1, 3, 1, 6});
      return weighted_sum(t, t.scale(t.add(g, v[1]), 0.7), r);
    });
  }

  TEST_CASE("attention gradients, causal and full, packed segments") {
    for (bool causal : {false, true}) {
      Rng rng(5);
      std::vector<Parameter<double>> ps{rand_param("q", 5, 8, rng), rand_param("kv", 6, 16, rng)};
      const Segments qs = Segments::from_lengths(std::vector<int>{2, 3});
      const Segments ks = causal ? qs : Segments::from_lengths(std::vector<int>{4, 2});
      if (causal) ps[1] = rand_param("kv", 5, 16, rng);
      Rng wr(6);
      gradcheck(ps, [&](TapeD& t, std::vector<Var>& v) {
        Rng r = wr;
        return weighted_sum(t, t.attention(v[0], 0, v[1], 0, v[1], 8, 8, 2, qs, ks, causal), r);
      });
    }
  }

  TEST_CASE("segment ops gradients") {
    Rng rng(7);
    std::vector<Parameter<double>> ps{rand_param("x", 6, 3, rng), rand_param("s", 2, 3, rng),
                                      rand_param("h", 2, 3, rng)};
    const Segments seg = Segments::from_lengths(std::vector<int>{4, 2});
    Rng wr(8);
    gradcheck(ps, [&](TapeD& t, std::vector<Var>& v) {
      Rng r = wr;
      Var y = t.segment_add(v[0], seg, v[1]);
      Var p = t.prepend_rows(y, seg, v[2]);
      Var m = t.segment_mean(p, prepend_segments(seg));
      return t.add(weighted_sum(t, p, r), weighted_sum(t, m, r));
    });
  }

  TEST_CASE("cross entropy gradient and value") {
    Rng rng(9);
    std::vector<Parameter<double>> ps{rand_param("logits", 4, 5, rng)};
    gradcheck(ps, [&](TapeD& t, std::vector<Var>& v) { return t.cross_entropy(v[0], {0, 4, 2, 2}); });

    TapeD t(false);
    Var z = t.input(2, 3, {0, 0, 0, 0, 0, 0});
    CHECK(t.scalar(t.cross_entropy(z, {0, 2})) == doctest::Approx(std::log(3.0)));
  }

  TEST_CASE("reused parameter accumulates gradient from every use") {
    Parameter<double> p("w", 1, 1);
    p.value = {3.0};
    TapeD t;
    Var a = t.param(p);
    CHECK(t.param(p) == a);
    Var y = t.matmul(a, a);  // w^2
    t.backward(y);
    CHECK((*t.grad(p))[0] == doctest::Approx(6.0));
  }

  TEST_CASE("segments") {
    const Segments s = Segments::from_lengths(std::vector<int>{3, 0, 2});
    CHECK(s.count() == 3);
    CHECK(s.total() == 5);
    CHECK(s.begin(2) == 3);
    CHECK(s.length(1) == 0);
    const Segments p = prepend_segments(s);
    CHECK(p.total() == 8);
    CHECK(p.length(1) == 1);
  }
}
