#pragma once

// Dense row-major kernels behind the transformer. Every kernel parallelizes
// over independent output rows only, so results do not depend on the thread
// count and a row's value does not depend on which other rows share the call.
// `reference` holds plain serial versions used as test oracles and as the
// benchmark baseline.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <type_traits>

namespace textsettr::kernels {

/// exp that vectorizes: Cody-Waite range reduction plus a degree-6 minimax
/// polynomial for float (about 2 ulp, inputs clamped to the normal range);
/// std::exp for double.
template <class T>
inline T exp_fast(T x) {
  if constexpr (std::is_same_v<T, float>) {
    x = x < -87.3f ? -87.3f : (x > 88.3f ? 88.3f : x);
    const float n = std::floor(x * 1.44269504088896341f + 0.5f);
    const float r = x - n * 0.693359375f + n * 2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    const auto bits = static_cast<std::uint32_t>(static_cast<std::int32_t>(n) + 127) << 23;
    return p * std::bit_cast<float>(bits);
  } else {
    return std::exp(x);
  }
}

/// tanh through exp_fast.
template <class T>
inline T tanh_fast(T x) {
  return T(1) - T(2) / (exp_fast(T(2) * x) + T(1));
}

/// C[n x m] (+)= A[n x k] * B[k x m]
template <class T>
void gemm(int n, int k, int m, const T* a, const T* b, T* c, bool accumulate);

/// C[n x m] (+)= A[n x k] * B^T, with B stored [m x k]
template <class T>
void gemm_bt(int n, int k, int m, const T* a, const T* b, T* c, bool accumulate);

/// C[k x m] (+)= A^T * B, with A [n x k] and B [n x m]
template <class T>
void gemm_at(int n, int k, int m, const T* a, const T* b, T* c, bool accumulate);

/// x[i, :] += bias for every row.
template <class T>
void add_bias(int n, int m, T* x, const T* bias);

/// out[j] += sum_i x[i, j]
template <class T>
void column_sums(int n, int m, const T* x, T* out);

/// y = (x - mean) * rstd * gamma + beta per row. mean/rstd (length n) are
/// saved for the backward pass.
template <class T>
void layer_norm_forward(int n, int m, const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd);

/// Accumulates into dx, dgamma, dbeta (any may be null).
template <class T>
void layer_norm_backward(int n, int m, const T* dy, const T* x, const T* gamma, const T* mean, const T* rstd, T* dx,
                         T* dgamma, T* dbeta);

/// tanh-approximated GELU.
template <class T>
void gelu_forward(int count, const T* x, T* y);

/// dx += dy * gelu'(x)
template <class T>
void gelu_backward(int count, const T* x, const T* dy, T* dx);

/// In-place numerically stable softmax over each row.
template <class T>
void softmax_rows(int n, int m, T* x);

/// Scaled dot-product attention for one head of one sequence.
/// q: lq rows, k/v: lk rows, each row `dh` wide with the given strides.
/// Query i sees keys j <= i + causal_offset; pass causal_offset >= lk for
/// full attention. probs receives the lq x lk attention matrix.
template <class T>
void attention_head_forward(int lq, int lk, int dh, const T* q, int q_stride, const T* k, int k_stride, const T* v,
                            int v_stride, int causal_offset, T* probs, T* out, int out_stride);

/// Backward of attention_head_forward given the saved probs. Accumulates into
/// dq, dk, dv (same strides as the forward inputs). `scratch` needs lk entries.
template <class T>
void attention_head_backward(int lq, int lk, int dh, const T* q, int q_stride, const T* k, int k_stride, const T* v,
                             int v_stride, const T* probs, const T* dout, int dout_stride, T* dq, T* dk, T* dv,
                             T* scratch);

namespace reference {

template <class T>
void gemm(int n, int k, int m, const T* a, const T* b, T* c, bool accumulate);
template <class T>
void gemm_bt(int n, int k, int m, const T* a, const T* b, T* c, bool accumulate);
template <class T>
void gemm_at(int n, int k, int m, const T* a, const T* b, T* c, bool accumulate);
template <class T>
void layer_norm_forward(int n, int m, const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd);
template <class T>
void softmax_rows(int n, int m, T* x);
template <class T>
void attention_head_forward(int lq, int lk, int dh, const T* q, int q_stride, const T* k, int k_stride, const T* v,
                            int v_stride, int causal_offset, T* probs, T* out, int out_stride);

}  // namespace reference

}  // namespace textsettr::kernels
