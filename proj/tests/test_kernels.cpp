#include <doctest.h>

#include <cmath>
#include <vector>

#include "textsettr/kernels.hpp"
#include "textsettr/rng.hpp"

using namespace textsettr;
namespace k = textsettr::kernels;

namespace {

template <class T>
std::vector<T> randn(Rng& rng, std::size_t n) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.normal());
  return v;
}

template <class T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace

TEST_SUITE("kernels") {
  TEST_CASE_TEMPLATE("gemm variants match the serial reference", T, float, double) {
    Rng rng(1);
    const double tol = std::is_same_v<T, float> ? 1e-4 : 1e-12;
    for (auto [n, kk, m] : {std::tuple{1, 1, 1}, {7, 13, 5}, {64, 48, 96}, {130, 3, 257}}) {
      const auto a = randn<T>(rng, static_cast<std::size_t>(n) * kk);
      const auto b = randn<T>(rng, static_cast<std::size_t>(kk) * m);
      const auto c0 = randn<T>(rng, static_cast<std::size_t>(n) * m);
      for (bool acc : {false, true}) {
        auto c1 = c0, c2 = c0;
        k::gemm(n, kk, m, a.data(), b.data(), c1.data(), acc);
        k::reference::gemm(n, kk, m, a.data(), b.data(), c2.data(), acc);
        CHECK(max_abs_diff(c1, c2) < tol);

        const auto bt = randn<T>(rng, static_cast<std::size_t>(m) * kk);
        c1 = c0, c2 = c0;
        k::gemm_bt(n, kk, m, a.data(), bt.data(), c1.data(), acc);
        k::reference::gemm_bt(n, kk, m, a.data(), bt.data(), c2.data(), acc);
        CHECK(max_abs_diff(c1, c2) < tol);

        const auto b2 = randn<T>(rng, static_cast<std::size_t>(n) * m);
        std::vector<T> d1(static_cast<std::size_t>(kk) * m, T(1)), d2 = d1;
        k::gemm_at(n, kk, m, a.data(), b2.data(), d1.data(), acc);
        k::reference::gemm_at(n, kk, m, a.data(), b2.data(), d2.data(), acc);
        CHECK(max_abs_diff(d1, d2) < tol);
      }
    }
  }

  TEST_CASE("gemm rows do not depend on the other rows in the call") {
    Rng rng(2);
    const int n = 37, kk = 19, m = 23;
    const auto a = randn<float>(rng, n * kk);
    const auto b = randn<float>(rng, kk * m);
    std::vector<float> full(n * m), one(m);
    k::gemm(n, kk, m, a.data(), b.data(), full.data(), false);
    for (int i = 0; i < n; ++i) {
      k::gemm(1, kk, m, a.data() + i * kk, b.data(), one.data(), false);
      for (int j = 0; j < m; ++j) CHECK(one[j] == full[i * m + j]);
    }
  }

  TEST_CASE_TEMPLATE("layer norm and softmax match the reference", T, float, double) {
    Rng rng(3);
    const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-12;
    const int n = 41, m = 67;
    const auto x = randn<T>(rng, n * m);
    const auto g = randn<T>(rng, m);
    const auto b = randn<T>(rng, m);
    std::vector<T> y1(n * m), y2(n * m), mu1(n), mu2(n), rs1(n), rs2(n);
    k::layer_norm_forward(n, m, x.data(), g.data(), b.data(), y1.data(), mu1.data(), rs1.data());
    k::reference::layer_norm_forward(n, m, x.data(), g.data(), b.data(), y2.data(), mu2.data(), rs2.data());
    CHECK(max_abs_diff(y1, y2) < tol);
    CHECK(max_abs_diff(rs1, rs2) < tol);

    auto s1 = x, s2 = x;
    for (auto& v : s1) v *= T(30);
    s2 = s1;
    k::softmax_rows(n, m, s1.data());
    k::reference::softmax_rows(n, m, s2.data());
    CHECK(max_abs_diff(s1, s2) < tol);
    for (int i = 0; i < n; ++i) {
      double sum = 0.0;
      for (int j = 0; j < m; ++j) sum += s1[i * m + j];
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    }
  }

  TEST_CASE_TEMPLATE("attention matches the reference", T, float, double) {
    Rng rng(4);
    const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-12;
    const int lq = 9, lk = 11, dh = 8, stride = 24;
    const auto q = randn<T>(rng, lq * stride);
    const auto kv = randn<T>(rng, lk * stride);
    for (int offset : {lk, 2, 0}) {
      std::vector<T> p1(lq * lk), p2(lq * lk), o1(lq * dh), o2(lq * dh);
      k::attention_head_forward(lq, lk, dh, q.data(), stride, kv.data(), stride, kv.data() + dh, stride, offset,
                                p1.data(), o1.data(), dh);
      k::reference::attention_head_forward(lq, lk, dh, q.data(), stride, kv.data(), stride, kv.data() + dh, stride,
                                           offset, p2.data(), o2.data(), dh);
      CHECK(max_abs_diff(p1, p2) < tol);
      CHECK(max_abs_diff(o1, o2) < tol);
      if (offset < lk)
        for (int i = 0; i < lq; ++i)
          for (int j = i + offset + 1; j < lk; ++j) CHECK(p1[i * lk + j] == T(0));
    }
  }

  TEST_CASE("exp_fast stays within a few ulp of std::exp") {
    double worst = 0.0;
    for (float x = -87.0f; x < 88.0f; x += 0.0137f) {
      const double want = std::exp(static_cast<double>(x));
      worst = std::max(worst, std::abs(k::exp_fast(x) - want) / want);
    }
    CHECK(worst < 1e-6);
    CHECK(k::exp_fast(-1000.0f) >= 0.0f);
    CHECK(std::isfinite(k::exp_fast(1000.0f)));
    CHECK(k::exp_fast(1.5) == std::exp(1.5));
  }

  TEST_CASE("gelu matches its closed form and derivative") {
    Rng rng(5);
    const int n = 10000;
    const auto x = randn<double>(rng, n);
    std::vector<double> y(n), dx(n, 0.0), ones(n, 1.0);
    k::gelu_forward(n, x.data(), y.data());
    k::gelu_backward(n, x.data(), ones.data(), dx.data());
    const double c = std::sqrt(2.0 / M_PI);
    auto f = [&](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))); };
    for (int i = 0; i < n; i += 97) {
      CHECK(y[i] == doctest::Approx(f(x[i])).epsilon(1e-12));
      const double h = 1e-6;
      CHECK(dx[i] == doctest::Approx((f(x[i] + h) - f(x[i] - h)) / (2 * h)).epsilon(1e-6));
    }
    std::vector<float> xf(x.begin(), x.end()), yf(n);
    k::gelu_forward(n, xf.data(), yf.data());
    for (int i = 0; i < n; ++i) CHECK(std::abs(yf[i] - y[i]) < 1e-5);
  }

  TEST_CASE("column sums and bias") {
    const int n = 3, m = 2;
    std::vector<float> x{1, 2, 3, 4, 5, 6}, out{10, 20}, bias{1, -1};
    k::column_sums(n, m, x.data(), out.data());
    CHECK(out == std::vector<float>{19, 32});
    k::add_bias(n, m, x.data(), bias.data());
    CHECK(x == std::vector<float>{2, 1, 4, 3, 6, 5});
  }
}
