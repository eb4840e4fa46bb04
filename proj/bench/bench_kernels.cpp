// OpenMP kernels against their serial references. Set OMP_NUM_THREADS to
// compare thread counts; on one core the two sides should roughly tie.

#include <benchmark/benchmark.h>

#include <vector>

#include "textsettr/eval.hpp"
#include "textsettr/kernels.hpp"
#include "textsettr/rng.hpp"

namespace k = textsettr::kernels;
using textsettr::Rng;

namespace {

std::vector<float> randn(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

// Shapes of a d_model=128 step: 4096 token rows against a 128x384 fused QKV.
template <bool kParallel>
void BM_Gemm(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0)), kk = 128, m = 384;
  const auto a = randn(static_cast<std::size_t>(n) * kk, 1), b = randn(static_cast<std::size_t>(kk) * m, 2);
  std::vector<float> c(static_cast<std::size_t>(n) * m);
  for (auto _ : state) {
    if constexpr (kParallel)
      k::gemm(n, kk, m, a.data(), b.data(), c.data(), false);
    else
      k::reference::gemm(n, kk, m, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2L * n * kk * m);
}

template <bool kParallel>
void BM_GemmBt(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0)), kk = 128, m = 2000;
  const auto a = randn(static_cast<std::size_t>(n) * kk, 1), b = randn(static_cast<std::size_t>(m) * kk, 2);
  std::vector<float> c(static_cast<std::size_t>(n) * m);
  for (auto _ : state) {
    if constexpr (kParallel)
      k::gemm_bt(n, kk, m, a.data(), b.data(), c.data(), false);
    else
      k::reference::gemm_bt(n, kk, m, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2L * n * kk * m);
}

template <bool kParallel>
void BM_LayerNorm(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0)), m = 128;
  const auto x = randn(static_cast<std::size_t>(n) * m, 3), g = randn(m, 4), b = randn(m, 5);
  std::vector<float> y(x.size()), mean(n), rstd(n);
  for (auto _ : state) {
    if constexpr (kParallel)
      k::layer_norm_forward(n, m, x.data(), g.data(), b.data(), y.data(), mean.data(), rstd.data());
    else
      k::reference::layer_norm_forward(n, m, x.data(), g.data(), b.data(), y.data(), mean.data(), rstd.data());
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * n * m);
}

template <bool kParallel>
void BM_Softmax(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0)), m = 2000;
  const auto x0 = randn(static_cast<std::size_t>(n) * m, 6);
  auto x = x0;
  for (auto _ : state) {
    state.PauseTiming();
    x = x0;
    state.ResumeTiming();
    if constexpr (kParallel)
      k::softmax_rows(n, m, x.data());
    else
      k::reference::softmax_rows(n, m, x.data());
    benchmark::DoNotOptimize(x.data());
  }
  state.SetItemsProcessed(state.iterations() * n * m);
}

template <bool kParallel>
void BM_Attention(benchmark::State& state) {
  const int len = static_cast<int>(state.range(0)), dh = 32, stride = 3 * 128;
  const auto qkv = randn(static_cast<std::size_t>(len) * stride, 7);
  std::vector<float> probs(static_cast<std::size_t>(len) * len), out(static_cast<std::size_t>(len) * dh);
  for (auto _ : state) {
    if constexpr (kParallel)
      k::attention_head_forward(len, len, dh, qkv.data(), stride, qkv.data() + 128, stride, qkv.data() + 256, stride,
                                0, probs.data(), out.data(), dh);
    else
      k::reference::attention_head_forward(len, len, dh, qkv.data(), stride, qkv.data() + 128, stride,
                                           qkv.data() + 256, stride, 0, probs.data(), out.data(), dh);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool kParallel>
void BM_Separation(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(8);
  std::vector<textsettr::StyleVector> vs(n, textsettr::StyleVector(64));
  std::vector<std::string> labels;
  for (auto& v : vs) {
    for (auto& x : v) x = static_cast<float>(rng.normal());
    labels.push_back(rng.bernoulli(0.5) ? "a" : "b");
  }
  for (auto _ : state) {
    const auto r = kParallel ? textsettr::separation(vs, labels) : textsettr::separation_reference(vs, labels);
    benchmark::DoNotOptimize(r.separation);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(n * (n - 1) / 2));
}

}  // namespace

BENCHMARK(BM_Gemm<true>)->Name("gemm/omp")->Arg(1024)->Arg(4096);
BENCHMARK(BM_Gemm<false>)->Name("gemm/reference")->Arg(1024)->Arg(4096);
BENCHMARK(BM_GemmBt<true>)->Name("gemm_bt/omp")->Arg(1024);
BENCHMARK(BM_GemmBt<false>)->Name("gemm_bt/reference")->Arg(1024);
BENCHMARK(BM_LayerNorm<true>)->Name("layer_norm/omp")->Arg(4096);
BENCHMARK(BM_LayerNorm<false>)->Name("layer_norm/reference")->Arg(4096);
BENCHMARK(BM_Softmax<true>)->Name("softmax/omp")->Arg(1024);
BENCHMARK(BM_Softmax<false>)->Name("softmax/reference")->Arg(1024);
BENCHMARK(BM_Attention<true>)->Name("attention/omp")->Arg(64);
BENCHMARK(BM_Attention<false>)->Name("attention/reference")->Arg(64);
BENCHMARK(BM_Separation<true>)->Name("separation/omp")->Arg(2000);
BENCHMARK(BM_Separation<false>)->Name("separation/reference")->Arg(2000);

BENCHMARK_MAIN();
