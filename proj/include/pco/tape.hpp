#pragma once

#include <functional>
#include <vector>

#include "pco/tensor.hpp"

// Reverse-mode autodiff over dense double tensors, define-by-run.
//
// Usage: make a Tape, register inputs with tape.leaf(value), combine them
// with the free-function ops below, then tape.backward(root) for a scalar
// root. Ops whose inputs carry no tape handle run untracked and return
// plain constants, so evaluation-only code pays no recording cost.
//
// Every op checks its output for NaN/Inf and throws NonFiniteError rather
// than letting bad values propagate; backward applies the same check to
// each node's accumulated gradient.

namespace pco::ad {

// L2 norms are computed as sqrt(sum(x^2) + kNormEps) so the gradient is
// defined when a row is exactly zero.
inline constexpr double kNormEps = 1e-12;
// Elementwise divide requires denominators >= kDivEps.
inline constexpr double kDivEps = 1e-12;

class GradMap {
 public:
  // Gradient of the backward root w.r.t. `t`. Zero tensor if `t` was not
  // reached from the root. Throws TapeError for tensors from another tape.
  Tensor at(const Tensor& t) const;
  bool reached(const Tensor& t) const;

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<std::vector<double>> grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Records `value` as a differentiable input; data is shared, not copied.
  Tensor leaf(const Tensor& value);

  // Reverse sweep from a scalar root recorded on this tape. Visits nodes in
  // strict reverse insertion order exactly once. Deterministic.
  GradMap backward(const Tensor& root) const;

  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  friend struct OpAccess;
  friend class GradMap;
  struct Node {
    const char* op;
    std::int64_t numel;
    std::function<void(const std::vector<double>& gout,
                       std::vector<std::vector<double>>& grads)>
        back;  // empty for leaves
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Op family. Unless stated otherwise inputs must share one tape (constants
// mix freely) and shapes must match exactly.
// ---------------------------------------------------------------------------

// b.shape may equal a.shape or any trailing suffix of it (bias-style
// broadcast over the leading axes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);

// Strictly same-shape elementwise product.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);

// a: (..., m, k) x b: (k, n) -> (..., m, n).
Tensor matmul(const Tensor& a, const Tensor& b);
// Per-batch products for attention. bmm: (B,m,k)x(B,k,n) -> (B,m,n);
// bmm_nt: (B,m,k)x(B,n,k) -> (B,m,n), i.e. a . b^T.
Tensor bmm(const Tensor& a, const Tensor& b);
Tensor bmm_nt(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& x);              // -> scalar
Tensor mean_axis(const Tensor& x, int axis);

// (..., d) -> (...): sqrt(sum over last axis of x^2 + kNormEps).
Tensor l2_norm_last(const Tensor& x);
Tensor sqrt_elem(const Tensor& x);
Tensor div_elem(const Tensor& a, const Tensor& b);
// x: (..., d) divided rowwise by s: (...). Denominators >= kDivEps.
Tensor rows_div(const Tensor& x, const Tensor& s);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form
Tensor softmax_last(const Tensor& x);
// x: (..., d), gamma/beta: (d). Normalizes over the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// table: (V, d), ids: any shape -> ids.shape + [d].
Tensor embedding_lookup(const Tensor& table, const IntTensor& ids);
Tensor concat(const Tensor& a, const Tensor& b, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);
Tensor reshape(const Tensor& x, Shape shape);

// x: (..., d), weights: (...) -> (d). Weighted mean over rows:
// sum_r w_r x_r / sum_r w_r. Weights are data, not differentiable, and the
// weight total must be positive.
Tensor masked_mean(const Tensor& x, const Tensor& weights);

// Convenience: x scaled to unit L2 norm over the last axis (epsilon-guarded).
Tensor normalize_rows(const Tensor& x);

}  // namespace pco::ad
