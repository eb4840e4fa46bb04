#pragma once

#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace textsettr {

/// A named dense row-major weight matrix (vectors are 1 x n).
template <class T>
struct Parameter {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::vector<T> value;

  Parameter() = default;
  Parameter(std::string n, int r, int c) : name(std::move(n)), rows(r), cols(c), value(static_cast<std::size_t>(r) * c) {}
  std::size_t size() const { return value.size(); }
};

/// Boundaries of variable-length sequences packed back to back along the row
/// axis: sequence i occupies rows [offsets[i], offsets[i+1]).
struct Segments {
  std::vector<int> offsets{0};

  static Segments from_lengths(std::span<const int> lengths);
  int count() const { return static_cast<int>(offsets.size()) - 1; }
  int begin(int i) const { return offsets[static_cast<std::size_t>(i)]; }
  int length(int i) const { return offsets[static_cast<std::size_t>(i) + 1] - offsets[static_cast<std::size_t>(i)]; }
  int total() const { return offsets.back(); }
};

/// Reverse-mode autodiff over 2-D row-major values. Gradients of parameters
/// live on the tape, so models stay const during forward and backward.
/// A tape built with record=false only evaluates (inference).
template <class T>
class Tape {
 public:
  using Var = int;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var input(int rows, int cols, std::vector<T> data);
  /// The same Parameter always maps to the same node.
  Var param(const Parameter<T>& p);

  Var matmul(Var x, Var w);
  Var linear(Var x, Var w, Var b);
  Var add(Var a, Var b);
  Var scale(Var a, T s);
  Var layer_norm(Var x, Var gamma, Var beta);
  Var gelu(Var x);
  Var gather_rows(Var table, std::vector<int> rows);

  /// Multi-head scaled dot-product attention between packed sequences.
  /// Query/key/value blocks are `width` columns starting at the given column
  /// of their nodes, so fused projections can be sliced without copies.
  /// Query segment i attends to key segment i only.
  Var attention(Var q, int q_col, Var k, int k_col, Var v, int v_col, int width, int heads, const Segments& q_seg,
                const Segments& k_seg, bool causal);

  /// One row per segment: the mean of that segment's rows.
  Var segment_mean(Var x, const Segments& seg);
  /// Adds row i of `per_segment` to every row of segment i.
  Var segment_add(Var x, const Segments& seg, Var per_segment);
  /// Inserts row i of `head` in front of segment i. The result has segments of
  /// length + 1 (see prepend_segments).
  Var prepend_rows(Var x, const Segments& seg, Var head);

  /// Mean token cross-entropy of logits rows against target ids.
  Var cross_entropy(Var logits, std::vector<int> targets);
  Var sum(std::span<const Var> scalars);

  void backward(Var loss);

  int rows(Var v) const { return nodes_[static_cast<std::size_t>(v)].rows; }
  int cols(Var v) const { return nodes_[static_cast<std::size_t>(v)].cols; }
  const T* data(Var v) const;
  std::span<const T> value(Var v) const { return {data(v), static_cast<std::size_t>(rows(v)) * cols(v)}; }
  T scalar(Var v) const { return data(v)[0]; }

  /// Gradient accumulated for a parameter, or nullptr when it did not take part.
  const std::vector<T>* grad(const Parameter<T>& p) const;
  std::span<const T> grad(Var v) const;

 private:
  struct Node {
    int rows = 0;
    int cols = 0;
    std::vector<T> value;
    const T* external = nullptr;
    std::vector<T> grad;
    bool needs_grad = false;
    std::function<void()> back;
  };

  Var push(int rows, int cols, bool needs_grad);
  T* mut(Var v) { return nodes_[static_cast<std::size_t>(v)].value.data(); }
  T* grad_buf(Var v);
  bool needs(Var v) const { return nodes_[static_cast<std::size_t>(v)].needs_grad; }

  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, Var> param_nodes_;
};

/// Segments of prepend_rows' result.
Segments prepend_segments(const Segments& seg);

}  // namespace textsettr
