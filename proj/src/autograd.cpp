#include "textsettr/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "textsettr/kernels.hpp"

namespace textsettr {

namespace k = kernels;

Segments Segments::from_lengths(std::span<const int> lengths) {
  Segments s;
  s.offsets.reserve(lengths.size() + 1);
  for (int len : lengths) s.offsets.push_back(s.offsets.back() + len);
  return s;
}

Segments prepend_segments(const Segments& seg) {
  Segments out;
  out.offsets.resize(seg.offsets.size());
  for (std::size_t i = 0; i < seg.offsets.size(); ++i) out.offsets[i] = seg.offsets[i] + static_cast<int>(i);
  return out;
}

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("tape: ") + what);
}

}  // namespace

template <class T>
typename Tape<T>::Var Tape<T>::push(int rows, int cols, bool needs_grad) {
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.value.assign(static_cast<std::size_t>(rows) * cols, T(0));
  n.needs_grad = record_ && needs_grad;
  nodes_.push_back(std::move(n));
  return static_cast<Var>(nodes_.size() - 1);
}

template <class T>
const T* Tape<T>::data(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v)];
  return n.external ? n.external : n.value.data();
}

template <class T>
T* Tape<T>::grad_buf(Var v) {
  Node& n = nodes_[static_cast<std::size_t>(v)];
  if (n.grad.empty()) n.grad.assign(static_cast<std::size_t>(n.rows) * n.cols, T(0));
  return n.grad.data();
}

template <class T>
typename Tape<T>::Var Tape<T>::input(int rows, int cols, std::vector<T> data) {
  require(data.size() == static_cast<std::size_t>(rows) * cols, "input shape");
  Var v = push(0, 0, false);
  Node& n = nodes_.back();
  n.rows = rows;
  n.cols = cols;
  n.value = std::move(data);
  return v;
}

template <class T>
typename Tape<T>::Var Tape<T>::param(const Parameter<T>& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return it->second;
  Var v = push(0, 0, true);
  Node& n = nodes_.back();
  n.rows = p.rows;
  n.cols = p.cols;
  n.external = p.value.data();
  param_nodes_.emplace(&p, v);
  return v;
}

template <class T>
const std::vector<T>* Tape<T>::grad(const Parameter<T>& p) const {
  auto it = param_nodes_.find(&p);
  if (it == param_nodes_.end()) return nullptr;
  const Node& n = nodes_[static_cast<std::size_t>(it->second)];
  return n.grad.empty() ? nullptr : &n.grad;
}

template <class T>
std::span<const T> Tape<T>::grad(Var v) const {
  return nodes_[static_cast<std::size_t>(v)].grad;
}

template <class T>
typename Tape<T>::Var Tape<T>::matmul(Var x, Var w) {
  const int n = rows(x), kk = cols(x), m = cols(w);
  require(rows(w) == kk, "matmul shape");
  Var out = push(n, m, needs(x) || needs(w));
  k::gemm(n, kk, m, data(x), data(w), mut(out), false);
  if (needs(out)) {
    nodes_.back().back = [this, x, w, out, n, kk, m] {
      const T* g = grad_buf(out);
      if (needs(x)) k::gemm_bt(n, m, kk, g, data(w), grad_buf(x), true);
      if (needs(w)) k::gemm_at(n, kk, m, data(x), g, grad_buf(w), true);
    };
  }
  return out;
}

template <class T>
typename Tape<T>::Var Tape<T>::linear(Var x, Var w, Var b) {
  const int n = rows(x), kk = cols(x), m = cols(w);
  require(rows(w) == kk && rows(b) * cols(b) == m, "linear shape");
  Var out = push(n, m, needs(x) || needs(w) || needs(b));
  k::gemm(n, kk, m, data(x), data(w), mut(out), false);
  k::add_bias(n, m, mut(out), data(b));
  if (needs(out)) {
    nodes_.back().back = [this, x, w, b, out, n, kk, m] {
      const T* g = grad_buf(out);
      if (needs(x)) k::gemm_bt(n, m, kk, g, data(w), grad_buf(x), true);
      if (needs(w)) k::gemm_at(n, kk, m, data(x), g, grad_buf(w), true);
      if (needs(b)) k::column_sums(n, m, g, grad_buf(b));
    };
  }
  return out;
}

template <class T>
typename Tape<T>::Var Tape<T>::add(Var a, Var b) {
  require(rows(a) == rows(b) && cols(a) == cols(b), "add shape");
  const std::size_t size = static_cast<std::size_t>(rows(a)) * cols(a);
  Var out = push(rows(a), cols(a), needs(a) || needs(b));
  const T* pa = data(a);
  const T* pb = data(b);
  T* po = mut(out);
  for (std::size_t i = 0; i < size; ++i) po[i] = pa[i] + pb[i];
  if (needs(out)) {
    nodes_.back().back = [this, a, b, out, size] {
      const T* g = grad_buf(out);
      for (Var p : {a, b}) {
        if (!needs(p)) continue;
        T* gp = grad_buf(p);
        for (std::size_t i = 0; i < size; ++i) gp[i] += g[i];
      }
    };
  }
  return out;
}

template <class T>
typename Tape<T>::Var Tape<T>::scale(Var a, T s) {
  const std::size_t size = static_cast<std::size_t>(rows(a)) * cols(a);
  Var out = push(rows(a), cols(a), needs(a));
  const T* pa = data(a);
  T* po = mut(out);
  for (std::size_t i = 0; i < size; ++i) po[i] = pa[i] * s;
  if (needs(out)) {
    nodes_.back().back = [this, a, out, size, s] {
      const T* g = grad_buf(out);
      T* ga = grad_buf(a);
      for (std::size_t i = 0; i < size; ++i) ga[i] += g[i] * s;
    };
  }
  return out;
}

template <class T>
typename Tape<T>::Var Tape<T>::layer_norm(Var x, Var gamma, Var beta) {
  const int n = rows(x), m = cols(x);
  require(rows(gamma) * cols(gamma) == m && rows(beta) * cols(beta) == m, "layer_norm shape");
  Var out = push(n, m, needs(x) || needs(gamma) || needs(beta));
  std::vector<T> mean(static_cast<std::size_t>(n)), rstd(static_cast<std::size_t>(n));
  k::layer_norm_forward(n, m, data(x), data(gamma), data(beta), mut(out), mean.data(), rstd.data());
  if (needs(out)) {
    nodes_.back().back = [this, x, gamma, beta, out, n, m, mean = std::move(mean), rstd = std::move(rstd)] {
      k::layer_norm_backward(n, m, grad_buf(out), data(x), data(gamma), mean.data(), rstd.data(),
                             needs(x) ? grad_buf(x) : nullptr, needs(gamma) ? grad_buf(gamma) : nullptr,
                             needs(beta) ? grad_buf(beta) : nullptr);
    };
  }
  return out;
}

template <class T>
typename Tape<T>::Var Tape<T>::gelu(Var x) {
  const int count = rows(x) * cols(x);
  Var out = push(rows(x), cols(x), needs(x));
  k::gelu_forward(count, data(x), mut(out));
  if (needs(out)) {
    nodes_.back().back = [this, x, out, count] { k::gelu_backward(count, data(x), grad_buf(out), grad_buf(x)); };
  }
  return out;
}

template <class T>
typename Tape<T>::Var Tape<T>::gather_rows(Var table, std::vector<int> idx) {
  const int m = cols(table);
  const int n = static_cast<int>(idx.size());
  for (int r : idx) require(r >= 0 && r < rows(table), "gather_rows index");
  Var out = push(n, m, needs(table));
  const T* src = data(table);
  T* dst = mut(out);
  for (int i = 0; i < n; ++i)
    std::copy_n(src + static_cast<long>(idx[static_cast<std::size_t>(i)]) * m, m, dst + static_cast<long>(i) * m);
  if (needs(out)) {
    nodes_.back().back = [this, table, out, idx = std::move(idx), n, m] {
      const T* g = grad_buf(out);
      T* gt = grad_buf(table);
      for (int i = 0; i < n; ++i) {
        T* row = gt + static_cast<long>(idx[static_cast<std::size_t>(i)]) * m;
        const T* gi = g + static_cast<long>(i) * m;
        for (int j = 0; j < m; ++j) row[j] += gi[j];
      }
    };
  }
  return out;
}

template <class T>
typename Tape<T>::Var Tape<T>::attention(Var q, int q_col, Var kk, int k_col, Var v, int v_col, int width, int heads,
                                         const Segments& q_seg, const Segments& k_seg, bool causal) {
  require(width % heads == 0, "attention heads");
  require(q_seg.count() == k_seg.count(), "attention segment count");
  require(q_seg.total() == rows(q) && k_seg.total() == rows(kk) && rows(kk) == rows(v), "attention rows");
  require(q_col + width <= cols(q) && k_col + width <= cols(kk) && v_col + width <= cols(v), "attention cols");
  const int dh = width / heads;
  const int nseg = q_seg.count();
  const int jobs = nseg * heads;

  // probs for job (s, h) start at prob_off[s] + h * lq * lk.
  std::vector<long> prob_off(static_cast<std::size_t>(nseg) + 1, 0);
  for (int s = 0; s < nseg; ++s)
    prob_off[static_cast<std::size_t>(s) + 1] =
        prob_off[static_cast<std::size_t>(s)] + static_cast<long>(heads) * q_seg.length(s) * k_seg.length(s);
  std::vector<T> probs(static_cast<std::size_t>(prob_off.back()));

  Var out = push(rows(q), width, needs(q) || needs(kk) || needs(v));
  const int qs = cols(q), ks = cols(kk), vs = cols(v);
  const T* pq = data(q);
  const T* pk = data(kk);
  const T* pv = data(v);
  T* po = mut(out);
#pragma omp parallel for schedule(dynamic)
  for (int job = 0; job < jobs; ++job) {
    const int s = job / heads, h = job % heads;
    const int lq = q_seg.length(s), lk = k_seg.length(s);
    if (lq == 0) continue;
    const int causal_offset = causal ? 0 : lk;
    k::attention_head_forward(lq, lk, dh, pq + static_cast<long>(q_seg.begin(s)) * qs + q_col + h * dh, qs,
                              pk + static_cast<long>(k_seg.begin(s)) * ks + k_col + h * dh, ks,
                              pv + static_cast<long>(k_seg.begin(s)) * vs + v_col + h * dh, vs, causal_offset,
                              probs.data() + prob_off[static_cast<std::size_t>(s)] + static_cast<long>(h) * lq * lk,
                              po + static_cast<long>(q_seg.begin(s)) * width + h * dh, width);
  }

  if (needs(out)) {
    nodes_.back().back = [this, self = out, q, q_col, kk, k_col, v, v_col, width, heads, dh, q_seg, k_seg, jobs,
                 prob_off = std::move(prob_off), probs = std::move(probs)]() {
      const int qs = cols(q), ks = cols(kk), vs = cols(v);
      const T* g = grad_buf(self);
      // Buffers are allocated before the parallel region.
      T* gq = needs(q) ? grad_buf(q) : nullptr;
      T* gk = needs(kk) ? grad_buf(kk) : nullptr;
      T* gv = needs(v) ? grad_buf(v) : nullptr;
      const T* pq = data(q);
      const T* pk = data(kk);
      const T* pv = data(v);
      int max_lk = 0;
      for (int s = 0; s < k_seg.count(); ++s) max_lk = std::max(max_lk, k_seg.length(s));
#pragma omp parallel
      {
        std::vector<T> scratch(static_cast<std::size_t>(max_lk) + 1);
#pragma omp for schedule(dynamic)
        for (int job = 0; job < jobs; ++job) {
          const int s = job / heads, h = job % heads;
          const int lq = q_seg.length(s), lk = k_seg.length(s);
          if (lq == 0) continue;
          const long qo = static_cast<long>(q_seg.begin(s)) * qs + q_col + h * dh;
          const long ko = static_cast<long>(k_seg.begin(s)) * ks + k_col + h * dh;
          const long vo = static_cast<long>(k_seg.begin(s)) * vs + v_col + h * dh;
          k::attention_head_backward(
              lq, lk, dh, pq + qo, qs, pk + ko, ks, pv + vo, vs,
              probs.data() + prob_off[static_cast<std::size_t>(s)] + static_cast<long>(h) * lq * lk,
              g + static_cast<long>(q_seg.begin(s)) * width + h * dh, width, gq ? gq + qo : nullptr,
              gk ? gk + ko : nullptr, gv ? gv + vo : nullptr, scratch.data());
        }
      }
    };
  }
  return out;
}

template <class T>
typename Tape<T>::Var Tape<T>::segment_mean(Var x, const Segments& seg) {
  require(seg.total() == rows(x), "segment_mean rows");
  const int m = cols(x);
  const int nseg = seg.count();
  for (int s = 0; s < nseg; ++s) require(seg.length(s) > 0, "segment_mean of empty segment");
  Var out = push(nseg, m, needs(x));
  const T* px = data(x);
  T* po = mut(out);
  for (int s = 0; s < nseg; ++s) {
    T* row = po + static_cast<long>(s) * m;
    for (int r = seg.begin(s); r < seg.begin(s) + seg.length(s); ++r)
      for (int j = 0; j < m; ++j) row[j] += px[static_cast<long>(r) * m + j];
    const T inv = T(1) / static_cast<T>(seg.length(s));
    for (int j = 0; j < m; ++j) row[j] *= inv;
  }
  if (needs(out)) {
    nodes_.back().back = [this, x, out, seg, m, nseg] {
      const T* g = grad_buf(out);
      T* gx = grad_buf(x);
      for (int s = 0; s < nseg; ++s) {
        const T inv = T(1) / static_cast<T>(seg.length(s));
        for (int r = seg.begin(s); r < seg.begin(s) + seg.length(s); ++r)
          for (int j = 0; j < m; ++j) gx[static_cast<long>(r) * m + j] += g[static_cast<long>(s) * m + j] * inv;
      }
    };
  }
  return out;
}

template <class T>
typename Tape<T>::Var Tape<T>::segment_add(Var x, const Segments& seg, Var per_segment) {
  require(seg.total() == rows(x) && rows(per_segment) == seg.count() && cols(per_segment) == cols(x),
          "segment_add shape");
  const int m = cols(x);
  Var out = push(rows(x), m, needs(x) || needs(per_segment));
  const T* px = data(x);
  const T* ps = data(per_segment);
  T* po = mut(out);
  for (int s = 0; s < seg.count(); ++s)
    for (int r = seg.begin(s); r < seg.begin(s) + seg.length(s); ++r)
      for (int j = 0; j < m; ++j) po[static_cast<long>(r) * m + j] = px[static_cast<long>(r) * m + j] + ps[static_cast<long>(s) * m + j];
  if (needs(out)) {
    nodes_.back().back = [this, x, per_segment, out, seg, m] {
      const T* g = grad_buf(out);
      if (needs(x)) {
        T* gx = grad_buf(x);
        const std::size_t size = static_cast<std::size_t>(seg.total()) * m;
        for (std::size_t i = 0; i < size; ++i) gx[i] += g[i];
      }
      if (needs(per_segment)) {
        T* gs = grad_buf(per_segment);
        for (int s = 0; s < seg.count(); ++s)
          for (int r = seg.begin(s); r < seg.begin(s) + seg.length(s); ++r)
            for (int j = 0; j < m; ++j) gs[static_cast<long>(s) * m + j] += g[static_cast<long>(r) * m + j];
      }
    };
  }
  return out;
}

template <class T>
typename Tape<T>::Var Tape<T>::prepend_rows(Var x, const Segments& seg, Var head) {
  require(seg.total() == rows(x) && rows(head) == seg.count() && cols(head) == cols(x), "prepend_rows shape");
  const int m = cols(x);
  const Segments out_seg = prepend_segments(seg);
  Var out = push(out_seg.total(), m, needs(x) || needs(head));
  const T* px = data(x);
  const T* ph = data(head);
  T* po = mut(out);
  for (int s = 0; s < seg.count(); ++s) {
    std::copy_n(ph + static_cast<long>(s) * m, m, po + static_cast<long>(out_seg.begin(s)) * m);
    std::copy_n(px + static_cast<long>(seg.begin(s)) * m, static_cast<long>(seg.length(s)) * m,
                po + static_cast<long>(out_seg.begin(s) + 1) * m);
  }
  if (needs(out)) {
    nodes_.back().back = [this, x, head, out, seg, out_seg, m] {
      const T* g = grad_buf(out);
      T* gx = needs(x) ? grad_buf(x) : nullptr;
      T* gh = needs(head) ? grad_buf(head) : nullptr;
      for (int s = 0; s < seg.count(); ++s) {
        const T* gs = g + static_cast<long>(out_seg.begin(s)) * m;
        if (gh)
          for (int j = 0; j < m; ++j) gh[static_cast<long>(s) * m + j] += gs[j];
        if (gx) {
          const long count = static_cast<long>(seg.length(s)) * m;
          T* dst = gx + static_cast<long>(seg.begin(s)) * m;
          for (long i = 0; i < count; ++i) dst[i] += gs[m + i];
        }
      }
    };
  }
  return out;
}

template <class T>
typename Tape<T>::Var Tape<T>::cross_entropy(Var logits, std::vector<int> targets) {
  const int n = rows(logits), m = cols(logits);
  require(static_cast<int>(targets.size()) == n && n > 0, "cross_entropy targets");
  for (int t : targets) require(t >= 0 && t < m, "cross_entropy target id");
  Var out = push(1, 1, needs(logits));
  const T* pl = data(logits);
  std::vector<T> lse(static_cast<std::size_t>(n));
  T total = 0;
  for (int i = 0; i < n; ++i) {
    const T* row = pl + static_cast<long>(i) * m;
    const T mx = *std::max_element(row, row + m);
    T s = 0;
#pragma omp simd reduction(+ : s)
    for (int j = 0; j < m; ++j) s += k::exp_fast(row[j] - mx);
    lse[static_cast<std::size_t>(i)] = mx + std::log(s);
    total += lse[static_cast<std::size_t>(i)] - row[targets[static_cast<std::size_t>(i)]];
  }
  mut(out)[0] = total / static_cast<T>(n);
  if (needs(out)) {
    nodes_.back().back = [this, logits, out, n, m, targets = std::move(targets), lse = std::move(lse)] {
      const T g = grad_buf(out)[0] / static_cast<T>(n);
      const T* pl = data(logits);
      T* gl = grad_buf(logits);
#pragma omp parallel for schedule(static) if (static_cast<long>(n) * m > 65536)
      for (int i = 0; i < n; ++i) {
        const T* row = pl + static_cast<long>(i) * m;
        T* grow = gl + static_cast<long>(i) * m;
        const T l = lse[static_cast<std::size_t>(i)];
        for (int j = 0; j < m; ++j) grow[j] += g * k::exp_fast(row[j] - l);
        grow[targets[static_cast<std::size_t>(i)]] -= g;
      }
    };
  }
  return out;
}

template <class T>
typename Tape<T>::Var Tape<T>::sum(std::span<const Var> scalars) {
  bool any = false;
  T total = 0;
  for (Var s : scalars) {
    require(rows(s) == 1 && cols(s) == 1, "sum of non-scalar");
    any = any || needs(s);
    total += data(s)[0];
  }
  Var out = push(1, 1, any);
  mut(out)[0] = total;
  if (needs(out)) {
    nodes_.back().back = [this, out, parts = std::vector<Var>(scalars.begin(), scalars.end())] {
      const T g = grad_buf(out)[0];
      for (Var s : parts)
        if (needs(s)) grad_buf(s)[0] += g;
    };
  }
  return out;
}

template <class T>
void Tape<T>::backward(Var loss) {
  require(record_, "backward on a non-recording tape");
  require(rows(loss) == 1 && cols(loss) == 1, "backward from non-scalar");
  if (!needs(loss)) return;
  grad_buf(loss)[0] = T(1);
  for (Var v = loss; v >= 0; --v) {
    Node& n = nodes_[static_cast<std::size_t>(v)];
    if (n.back && !n.grad.empty()) n.back();
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace textsettr
