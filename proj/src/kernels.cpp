#include "textsettr/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

namespace textsettr::kernels {

namespace {

constexpr long kParallelWork = 1L << 15;

bool worth_parallel(long work) { return work >= kParallelWork; }

// Register-blocked micro-kernel: a kMR x kNR tile of C accumulates
// sum_p A[r, p] * Bpanel[p, :], with B pre-packed into zero-padded panels of
// kNR columns. Every row of C goes through the same instruction sequence, so
// a row's value does not depend on its neighbours or on the thread count.
template <class T>
struct Simd {
  static constexpr int kLanes = 64 / static_cast<int>(sizeof(T));
  typedef T V __attribute__((vector_size(64)));
};

constexpr int kMR = 6;
template <class T>
constexpr int kNR = 2 * Simd<T>::kLanes;

template <class T>
inline typename Simd<T>::V load_vec(const T* p) {
  typename Simd<T>::V v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

template <class T>
inline void store_vec(T* p, typename Simd<T>::V v) {
  std::memcpy(p, &v, sizeof v);
}

template <class T>
void micro_kernel(int k, const T* a, long lda, const T* panel, T* tile) {
  using V = typename Simd<T>::V;
  constexpr int L = Simd<T>::kLanes;
  constexpr int NR = kNR<T>;
  V c0[kMR], c1[kMR];
#pragma GCC unroll 6
  for (int r = 0; r < kMR; ++r) {
    c0[r] = load_vec(tile + r * NR);
    c1[r] = load_vec(tile + r * NR + L);
  }
  for (int p = 0; p < k; ++p) {
    const V b0 = load_vec(panel + static_cast<long>(p) * NR);
    const V b1 = load_vec(panel + static_cast<long>(p) * NR + L);
#pragma GCC unroll 6
    for (int r = 0; r < kMR; ++r) {
      const T av = a[r * lda + p];
      c0[r] += av * b0;
      c1[r] += av * b1;
    }
  }
#pragma GCC unroll 6
  for (int r = 0; r < kMR; ++r) {
    store_vec(tile + r * NR, c0[r]);
    store_vec(tile + r * NR + L, c1[r]);
  }
}

// Packs B (k x m, or its transpose stored m x k) into panels [panel][p][kNR].
template <class T, bool Transposed>
std::vector<T> pack_b(int k, int m, const T* b) {
  constexpr int NR = kNR<T>;
  const int panels = (m + NR - 1) / NR;
  std::vector<T> packed(static_cast<std::size_t>(panels) * k * NR, T(0));
  for (int q = 0; q < panels; ++q) {
    T* dst = packed.data() + static_cast<long>(q) * k * NR;
    const int j0 = q * NR;
    const int cols = std::min(NR, m - j0);
    for (int p = 0; p < k; ++p)
      for (int j = 0; j < cols; ++j)
        dst[static_cast<long>(p) * NR + j] =
            Transposed ? b[static_cast<long>(j0 + j) * k + p] : b[static_cast<long>(p) * m + j0 + j];
  }
  return packed;
}

template <class T>
void tile_rows(int n, int k, int m, const T* a, const T* packed, T* c, bool accumulate, int rb, int q) {
  constexpr int NR = kNR<T>;
  const int i0 = rb * kMR;
  const int rows = std::min(kMR, n - i0);
  const int j0 = q * NR;
  const int cols = std::min(NR, m - j0);
  alignas(64) T tile[kMR * NR];
  for (int r = 0; r < kMR; ++r)
    for (int j = 0; j < NR; ++j)
      tile[r * NR + j] = (accumulate && r < rows && j < cols) ? c[static_cast<long>(i0 + r) * m + j0 + j] : T(0);
  const T* a_blk = a + static_cast<long>(i0) * k;
  std::vector<T> a_pad;
  if (rows < kMR) {
    // Short blocks read zero rows so every row sees identical arithmetic.
    a_pad.assign(static_cast<std::size_t>(kMR) * k, T(0));
    std::copy(a_blk, a_blk + static_cast<long>(rows) * k, a_pad.begin());
    a_blk = a_pad.data();
  }
  micro_kernel(k, a_blk, k, packed + static_cast<long>(q) * k * NR, tile);
  for (int r = 0; r < rows; ++r)
    std::copy(tile + r * NR, tile + r * NR + cols, c + static_cast<long>(i0 + r) * m + j0);
}

template <class T>
void gemm_packed(int n, int k, int m, const T* a, const T* packed, T* c, bool accumulate) {
  constexpr int NR = kNR<T>;
  const int row_blocks = (n + kMR - 1) / kMR;
  const int panels = (m + NR - 1) / NR;
  const bool parallel = worth_parallel(static_cast<long>(n) * k * m);
  if (static_cast<long>(k) * NR * panels * static_cast<long>(sizeof(T)) <= (1L << 20)) {
    // Packed B fits in L2: sweep row blocks, each over all panels.
#pragma omp parallel for schedule(static) if (parallel)
    for (int rb = 0; rb < row_blocks; ++rb)
      for (int q = 0; q < panels; ++q) tile_rows(n, k, m, a, packed, c, accumulate, rb, q);
  } else {
    // Long inner dimension: keep one panel hot while sweeping row blocks.
    for (int q = 0; q < panels; ++q) {
#pragma omp parallel for schedule(static) if (parallel)
      for (int rb = 0; rb < row_blocks; ++rb) tile_rows(n, k, m, a, packed, c, accumulate, rb, q);
    }
  }
}

template <class T>
void transpose(int rows, int cols, const T* src, T* dst) {
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) dst[static_cast<long>(j) * rows + i] = src[static_cast<long>(i) * cols + j];
}

}  // namespace

template <class T>
void gemm(int n, int k, int m, const T* a, const T* b, T* c, bool accumulate) {
  if (n <= 0 || m <= 0) return;
  const std::vector<T> packed = pack_b<T, false>(k, m, b);
  gemm_packed(n, k, m, a, packed.data(), c, accumulate);
}

template <class T>
void gemm_bt(int n, int k, int m, const T* a, const T* b, T* c, bool accumulate) {
  if (n <= 0 || m <= 0) return;
  const std::vector<T> packed = pack_b<T, true>(k, m, b);
  gemm_packed(n, k, m, a, packed.data(), c, accumulate);
}

template <class T>
void gemm_at(int n, int k, int m, const T* a, const T* b, T* c, bool accumulate) {
  if (k <= 0 || m <= 0) return;
  if (n <= 0) {
    if (!accumulate) std::fill(c, c + static_cast<long>(k) * m, T(0));
    return;
  }
  std::vector<T> at(static_cast<std::size_t>(n) * k);
  transpose(n, k, a, at.data());
  const std::vector<T> packed = pack_b<T, false>(n, m, b);
  gemm_packed(k, n, m, at.data(), packed.data(), c, accumulate);
}

template <class T>
void add_bias(int n, int m, T* x, const T* bias) {
#pragma omp parallel for schedule(static) if (worth_parallel(static_cast<long>(n) * m * 8))
  for (int i = 0; i < n; ++i) {
    T* row = x + static_cast<long>(i) * m;
#pragma omp simd
    for (int j = 0; j < m; ++j) row[j] += bias[j];
  }
}

template <class T>
void column_sums(int n, int m, const T* x, T* out) {
  for (int i = 0; i < n; ++i) {
    const T* row = x + static_cast<long>(i) * m;
#pragma omp simd
    for (int j = 0; j < m; ++j) out[j] += row[j];
  }
}

namespace {
template <class T>
constexpr T kNormEps = T(1e-5);
}

template <class T>
void layer_norm_forward(int n, int m, const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd) {
#pragma omp parallel for schedule(static) if (worth_parallel(static_cast<long>(n) * m * 8))
  for (int i = 0; i < n; ++i) {
    const T* xr = x + static_cast<long>(i) * m;
    T* yr = y + static_cast<long>(i) * m;
    T mu = 0;
#pragma omp simd reduction(+ : mu)
    for (int j = 0; j < m; ++j) mu += xr[j];
    mu /= m;
    T var = 0;
#pragma omp simd reduction(+ : var)
    for (int j = 0; j < m; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= m;
    const T rs = T(1) / std::sqrt(var + kNormEps<T>);
#pragma omp simd
    for (int j = 0; j < m; ++j) yr[j] = (xr[j] - mu) * rs * gamma[j] + beta[j];
    if (mean) mean[i] = mu;
    if (rstd) rstd[i] = rs;
  }
}

template <class T>
void layer_norm_backward(int n, int m, const T* dy, const T* x, const T* gamma, const T* mean, const T* rstd, T* dx,
                         T* dgamma, T* dbeta) {
  if (dx) {
#pragma omp parallel for schedule(static) if (worth_parallel(static_cast<long>(n) * m * 8))
    for (int i = 0; i < n; ++i) {
      const T* xr = x + static_cast<long>(i) * m;
      const T* dyr = dy + static_cast<long>(i) * m;
      T* dxr = dx + static_cast<long>(i) * m;
      const T mu = mean[i];
      const T rs = rstd[i];
      T sum_g = 0;
      T sum_gx = 0;
#pragma omp simd reduction(+ : sum_g, sum_gx)
      for (int j = 0; j < m; ++j) {
        const T g = dyr[j] * gamma[j];
        sum_g += g;
        sum_gx += g * (xr[j] - mu) * rs;
      }
      sum_g /= m;
      sum_gx /= m;
#pragma omp simd
      for (int j = 0; j < m; ++j) {
        const T xhat = (xr[j] - mu) * rs;
        dxr[j] += rs * (dyr[j] * gamma[j] - sum_g - xhat * sum_gx);
      }
    }
  }
  if (dgamma || dbeta) {
    for (int i = 0; i < n; ++i) {
      const T* xr = x + static_cast<long>(i) * m;
      const T* dyr = dy + static_cast<long>(i) * m;
      const T mu = mean[i];
      const T rs = rstd[i];
      if (dgamma) {
#pragma omp simd
        for (int j = 0; j < m; ++j) dgamma[j] += dyr[j] * (xr[j] - mu) * rs;
      }
      if (dbeta) {
#pragma omp simd
        for (int j = 0; j < m; ++j) dbeta[j] += dyr[j];
      }
    }
  }
}

namespace {
template <class T>
constexpr T kGeluC = T(0.7978845608028654);  // sqrt(2 / pi)
template <class T>
constexpr T kGeluA = T(0.044715);
}  // namespace

template <class T>
void gelu_forward(int count, const T* x, T* y) {
  constexpr int kChunk = 4096;
  const int chunks = (count + kChunk - 1) / kChunk;
#pragma omp parallel for schedule(static) if (worth_parallel(static_cast<long>(count) * 16))
  for (int c = 0; c < chunks; ++c) {
    const int end = std::min(count, (c + 1) * kChunk);
#pragma omp simd
    for (int i = c * kChunk; i < end; ++i) {
      const T v = x[i];
      y[i] = T(0.5) * v * (T(1) + tanh_fast(kGeluC<T> * (v + kGeluA<T> * v * v * v)));
    }
  }
}

template <class T>
void gelu_backward(int count, const T* x, const T* dy, T* dx) {
  constexpr int kChunk = 4096;
  const int chunks = (count + kChunk - 1) / kChunk;
#pragma omp parallel for schedule(static) if (worth_parallel(static_cast<long>(count) * 16))
  for (int c = 0; c < chunks; ++c) {
    const int end = std::min(count, (c + 1) * kChunk);
#pragma omp simd
    for (int i = c * kChunk; i < end; ++i) {
      const T v = x[i];
      const T t = tanh_fast(kGeluC<T> * (v + kGeluA<T> * v * v * v));
      const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * kGeluC<T> * (T(1) + T(3) * kGeluA<T> * v * v);
      dx[i] += dy[i] * d;
    }
  }
}

template <class T>
void softmax_rows(int n, int m, T* x) {
#pragma omp parallel for schedule(static) if (worth_parallel(static_cast<long>(n) * m * 8))
  for (int i = 0; i < n; ++i) {
    T* row = x + static_cast<long>(i) * m;
    T mx = row[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (int j = 0; j < m; ++j) {
      row[j] = exp_fast(row[j] - mx);
      sum += row[j];
    }
    const T inv = T(1) / sum;
#pragma omp simd
    for (int j = 0; j < m; ++j) row[j] *= inv;
  }
}

template <class T>
void attention_head_forward(int lq, int lk, int dh, const T* q, int q_stride, const T* k, int k_stride, const T* v,
                            int v_stride, int causal_offset, T* probs, T* out, int out_stride) {
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (int i = 0; i < lq; ++i) {
    const T* qi = q + static_cast<long>(i) * q_stride;
    T* pi = probs + static_cast<long>(i) * lk;
    const int visible = std::min(lk, i + causal_offset + 1);
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < visible; ++j) {
      const T* kj = k + static_cast<long>(j) * k_stride;
      T s = 0;
#pragma omp simd reduction(+ : s)
      for (int d = 0; d < dh; ++d) s += qi[d] * kj[d];
      pi[j] = s * scale;
      mx = std::max(mx, pi[j]);
    }
    T sum = 0;
    for (int j = 0; j < visible; ++j) {
      pi[j] = exp_fast(pi[j] - mx);
      sum += pi[j];
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < visible; ++j) pi[j] *= inv;
    for (int j = visible; j < lk; ++j) pi[j] = 0;

    T* oi = out + static_cast<long>(i) * out_stride;
    std::fill(oi, oi + dh, T(0));
    for (int j = 0; j < visible; ++j) {
      const T* vj = v + static_cast<long>(j) * v_stride;
      const T p = pi[j];
#pragma omp simd
      for (int d = 0; d < dh; ++d) oi[d] += p * vj[d];
    }
  }
}

template <class T>
void attention_head_backward(int lq, int lk, int dh, const T* q, int q_stride, const T* k, int k_stride, const T* v,
                             int v_stride, const T* probs, const T* dout, int dout_stride, T* dq, T* dk, T* dv,
                             T* scratch) {
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (int i = 0; i < lq; ++i) {
    const T* pi = probs + static_cast<long>(i) * lk;
    const T* doi = dout + static_cast<long>(i) * dout_stride;
    const T* qi = q + static_cast<long>(i) * q_stride;
    T dot_pd = 0;
    for (int j = 0; j < lk; ++j) {
      const T p = pi[j];
      if (p == T(0)) {
        scratch[j] = 0;
        continue;
      }
      const T* vj = v + static_cast<long>(j) * v_stride;
      T dp = 0;
#pragma omp simd reduction(+ : dp)
      for (int d = 0; d < dh; ++d) dp += doi[d] * vj[d];
      scratch[j] = dp;
      dot_pd += p * dp;
      if (dv) {
        T* dvj = dv + static_cast<long>(j) * v_stride;
#pragma omp simd
        for (int d = 0; d < dh; ++d) dvj[d] += p * doi[d];
      }
    }
    T* dqi = dq ? dq + static_cast<long>(i) * q_stride : nullptr;
    for (int j = 0; j < lk; ++j) {
      const T p = pi[j];
      if (p == T(0)) continue;
      const T ds = p * (scratch[j] - dot_pd) * scale;
      const T* kj = k + static_cast<long>(j) * k_stride;
      if (dqi) {
#pragma omp simd
        for (int d = 0; d < dh; ++d) dqi[d] += ds * kj[d];
      }
      if (dk) {
        T* dkj = dk + static_cast<long>(j) * k_stride;
#pragma omp simd
        for (int d = 0; d < dh; ++d) dkj[d] += ds * qi[d];
      }
    }
  }
}

// ---------------------------------------------------------------------------

namespace reference {

template <class T>
void gemm(int n, int k, int m, const T* a, const T* b, T* c, bool accumulate) {
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      T s = accumulate ? c[static_cast<long>(i) * m + j] : T(0);
      for (int p = 0; p < k; ++p) s += a[static_cast<long>(i) * k + p] * b[static_cast<long>(p) * m + j];
      c[static_cast<long>(i) * m + j] = s;
    }
}

template <class T>
void gemm_bt(int n, int k, int m, const T* a, const T* b, T* c, bool accumulate) {
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      T s = accumulate ? c[static_cast<long>(i) * m + j] : T(0);
      for (int p = 0; p < k; ++p) s += a[static_cast<long>(i) * k + p] * b[static_cast<long>(j) * k + p];
      c[static_cast<long>(i) * m + j] = s;
    }
}

template <class T>
void gemm_at(int n, int k, int m, const T* a, const T* b, T* c, bool accumulate) {
  for (int p = 0; p < k; ++p)
    for (int j = 0; j < m; ++j) {
      T s = accumulate ? c[static_cast<long>(p) * m + j] : T(0);
      for (int i = 0; i < n; ++i) s += a[static_cast<long>(i) * k + p] * b[static_cast<long>(i) * m + j];
      c[static_cast<long>(p) * m + j] = s;
    }
}

template <class T>
void layer_norm_forward(int n, int m, const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd) {
  for (int i = 0; i < n; ++i) {
    const T* xr = x + static_cast<long>(i) * m;
    double mu = 0;
    for (int j = 0; j < m; ++j) mu += xr[j];
    mu /= m;
    double var = 0;
    for (int j = 0; j < m; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= m;
    const double rs = 1.0 / std::sqrt(var + 1e-5);
    for (int j = 0; j < m; ++j) y[static_cast<long>(i) * m + j] = static_cast<T>((xr[j] - mu) * rs * gamma[j] + beta[j]);
    if (mean) mean[i] = static_cast<T>(mu);
    if (rstd) rstd[i] = static_cast<T>(rs);
  }
}

template <class T>
void softmax_rows(int n, int m, T* x) {
  for (int i = 0; i < n; ++i) {
    T* row = x + static_cast<long>(i) * m;
    const T mx = *std::max_element(row, row + m);
    double sum = 0;
    for (int j = 0; j < m; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
    for (int j = 0; j < m; ++j) row[j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / sum);
  }
}

template <class T>
void attention_head_forward(int lq, int lk, int dh, const T* q, int q_stride, const T* k, int k_stride, const T* v,
                            int v_stride, int causal_offset, T* probs, T* out, int out_stride) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> s(static_cast<std::size_t>(lk));
  for (int i = 0; i < lq; ++i) {
    const int visible = std::min(lk, i + causal_offset + 1);
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < visible; ++j) {
      double dot = 0;
      for (int d = 0; d < dh; ++d) dot += static_cast<double>(q[static_cast<long>(i) * q_stride + d]) * k[static_cast<long>(j) * k_stride + d];
      s[static_cast<std::size_t>(j)] = dot * scale;
      mx = std::max(mx, s[static_cast<std::size_t>(j)]);
    }
    double sum = 0;
    for (int j = 0; j < visible; ++j) sum += std::exp(s[static_cast<std::size_t>(j)] - mx);
    for (int j = 0; j < lk; ++j)
      probs[static_cast<long>(i) * lk + j] = j < visible ? static_cast<T>(std::exp(s[static_cast<std::size_t>(j)] - mx) / sum) : T(0);
    for (int d = 0; d < dh; ++d) {
      double acc = 0;
      for (int j = 0; j < visible; ++j)
        acc += static_cast<double>(probs[static_cast<long>(i) * lk + j]) * v[static_cast<long>(j) * v_stride + d];
      out[static_cast<long>(i) * out_stride + d] = static_cast<T>(acc);
    }
  }
}

}  // namespace reference

#define TEXTSETTR_INSTANTIATE_KERNELS(T)                                                                          \
  template void gemm<T>(int, int, int, const T*, const T*, T*, bool);                                            \
  template void gemm_bt<T>(int, int, int, const T*, const T*, T*, bool);                                         \
  template void gemm_at<T>(int, int, int, const T*, const T*, T*, bool);                                         \
  template void add_bias<T>(int, int, T*, const T*);                                                             \
  template void column_sums<T>(int, int, const T*, T*);                                                          \
  template void layer_norm_forward<T>(int, int, const T*, const T*, const T*, T*, T*, T*);                       \
  template void layer_norm_backward<T>(int, int, const T*, const T*, const T*, const T*, const T*, T*, T*, T*);  \
  template void gelu_forward<T>(int, const T*, T*);                                                              \
  template void gelu_backward<T>(int, const T*, const T*, T*);                                                   \
  template void softmax_rows<T>(int, int, T*);                                                                   \
  template void attention_head_forward<T>(int, int, int, const T*, int, const T*, int, const T*, int, int, T*,   \
                                          T*, int);                                                              \
  template void attention_head_backward<T>(int, int, int, const T*, int, const T*, int, const T*, int, const T*, \
                                           const T*, int, T*, T*, T*, T*);                                       \
  template void reference::gemm<T>(int, int, int, const T*, const T*, T*, bool);                                 \
  template void reference::gemm_bt<T>(int, int, int, const T*, const T*, T*, bool);                              \
  template void reference::gemm_at<T>(int, int, int, const T*, const T*, T*, bool);                              \
  template void reference::layer_norm_forward<T>(int, int, const T*, const T*, const T*, T*, T*, T*);            \
  template void reference::softmax_rows<T>(int, int, T*);                                                        \
  template void reference::attention_head_forward<T>(int, int, int, const T*, int, const T*, int, const T*, int, \
                                                     int, T*, T*, int);

TEXTSETTR_INSTANTIATE_KERNELS(float)
TEXTSETTR_INSTANTIATE_KERNELS(double)

#undef TEXTSETTR_INSTANTIATE_KERNELS

}  // namespace textsettr::kernels
