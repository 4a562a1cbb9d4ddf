#include "pco/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace pco::ad {

namespace {

using Grads = std::vector<std::vector<double>>;
using BackFn = std::function<void(const std::vector<double>&, Grads&)>;
using DataPtr = std::shared_ptr<const std::vector<double>>;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

std::vector<double>& grad_buf(Grads& grads, int id, std::size_t n) {
  auto& buf = grads[static_cast<std::size_t>(id)];
  if (buf.empty()) buf.assign(n, 0.0);
  return buf;
}

void require_finite(const char* op, const std::vector<double>& values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string("non-finite value produced by op '") + op + "'");
    }
  }
}

// Number of leading repetitions of b when broadcast as a trailing suffix of a.
std::int64_t suffix_rows(const char* op, const Shape& a, const Shape& b) {
  if (b.size() > a.size()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                     " do not conform");
  }
  std::size_t off = a.size() - b.size();
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (a[off + i] != b[i]) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " do not conform");
    }
  }
  return shape_numel(a) / shape_numel(b);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not conform");
  }
}

void require_nonempty(const char* op, const Tensor& t) {
  if (t.empty()) throw ShapeError(std::string(op) + ": empty tensor input");
}

}  // namespace

// Shared private access for the free-function ops.
struct OpAccess {
  static Tape* common_tape(const char* op, std::initializer_list<const Tensor*> inputs) {
    Tape* tape = nullptr;
    for (const Tensor* t : inputs) {
      if (!t->on_tape()) continue;
      if (tape && tape != t->tape()) {
        throw TapeError(std::string(op) + ": inputs recorded on different tapes");
      }
      tape = t->tape();
    }
    return tape;
  }

  static int node_of(const Tensor& t) { return t.node_; }
  static DataPtr data_of(const Tensor& t) { return t.data_; }

  static Tensor make(Tape* tape, const char* op, Shape shape, std::vector<double> values,
                     BackFn back) {
    require_finite(op, values);
    Tensor out(std::move(shape), std::move(values));
    if (tape) {
      tape->nodes_.push_back(Tape::Node{op, out.size(), std::move(back)});
      out.tape_ = tape;
      out.node_ = static_cast<int>(tape->nodes_.size()) - 1;
    }
    return out;
  }

  // Result sharing the input's data buffer (reshape).
  static Tensor make_view(Tape* tape, const char* op, Shape shape, const Tensor& src,
                          BackFn back) {
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = src.data_;
    if (tape) {
      tape->nodes_.push_back(Tape::Node{op, out.size(), std::move(back)});
      out.tape_ = tape;
      out.node_ = static_cast<int>(tape->nodes_.size()) - 1;
    }
    return out;
  }
};

namespace {

Tape* tape_of(const char* op, std::initializer_list<const Tensor*> inputs) {
  return OpAccess::common_tape(op, inputs);
}

}  // namespace

Tensor Tape::leaf(const Tensor& value) {
  if (value.empty()) throw TapeError("leaf: empty tensor");
  if (value.on_tape()) throw TapeError("leaf: value is already recorded on a tape");
  require_finite("leaf", *OpAccess::data_of(value));
  Tensor out = value;
  nodes_.push_back(Node{"leaf", out.size(), {}});
  out.tape_ = this;
  out.node_ = static_cast<int>(nodes_.size()) - 1;
  return out;
}

GradMap Tape::backward(const Tensor& root) const {
  if (nodes_.empty()) throw TapeError("backward: tape is empty");
  if (root.tape() != this) throw TapeError("backward: root is not recorded on this tape");
  if (root.size() != 1) {
    throw TapeError("backward: root must be scalar, got shape " + shape_str(root.shape()));
  }
  GradMap gm;
  gm.tape_ = this;
  gm.grads_.assign(nodes_.size(), {});
  gm.grads_[static_cast<std::size_t>(root.node())] = {1.0};
  for (int i = root.node(); i >= 0; --i) {
    const auto& g = gm.grads_[static_cast<std::size_t>(i)];
    if (g.empty()) continue;  // not reached from the root
    const Node& node = nodes_[static_cast<std::size_t>(i)];
    for (double v : g) {
      if (!std::isfinite(v)) {
        throw NonFiniteError(std::string("non-finite gradient at op '") + node.op + "'");
      }
    }
    if (node.back) node.back(g, gm.grads_);
  }
  return gm;
}

Tensor GradMap::at(const Tensor& t) const {
  if (!tape_) throw TapeError("gradient map is empty");
  if (t.tape() != tape_) throw TapeError("gradient lookup for tensor from another tape");
  const auto& buf = grads_[static_cast<std::size_t>(t.node())];
  if (buf.empty()) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), buf);
}

bool GradMap::reached(const Tensor& t) const {
  return tape_ && t.tape() == tape_ && !grads_[static_cast<std::size_t>(t.node())].empty();
}

// ---------------------------------------------------------------------------
// elementwise and broadcast ops
// ---------------------------------------------------------------------------

namespace {

Tensor add_like(const char* op, const Tensor& a, const Tensor& b, double sign) {
  require_nonempty(op, a);
  require_nonempty(op, b);
  const std::int64_t rows = suffix_rows(op, a.shape(), b.shape());
  const std::int64_t bn = b.size();
  Tape* tape = tape_of(op, {&a, &b});

  std::vector<double> out(static_cast<std::size_t>(a.size()));
  {
    const auto av = a.data();
    const auto bv = b.data();
    std::size_t idx = 0;
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t j = 0; j < bn; ++j, ++idx) {
        out[idx] = av[idx] + sign * bv[static_cast<std::size_t>(j)];
      }
    }
  }

  BackFn back;
  if (tape) {
    const int ia = OpAccess::node_of(a);
    const int ib = OpAccess::node_of(b);
    const std::size_t an = static_cast<std::size_t>(a.size());
    back = [ia, ib, rows, bn, an, sign](const std::vector<double>& g, Grads& grads) {
      if (ia >= 0) {
        auto& da = grad_buf(grads, ia, an);
        for (std::size_t i = 0; i < an; ++i) da[i] += g[i];
      }
      if (ib >= 0) {
        auto& db = grad_buf(grads, ib, static_cast<std::size_t>(bn));
        std::size_t idx = 0;
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t j = 0; j < bn; ++j, ++idx) {
            db[static_cast<std::size_t>(j)] += sign * g[idx];
          }
        }
      }
    };
  }
  return OpAccess::make(tape, op, a.shape(), std::move(out), std::move(back));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_like("add", a, b, 1.0); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_like("sub", a, b, -1.0); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_nonempty("mul", a);
  require_same_shape("mul", a, b);
  Tape* tape = tape_of("mul", {&a, &b});
  const std::size_t n = static_cast<std::size_t>(a.size());

  std::vector<double> out(n);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];

  BackFn back;
  if (tape) {
    const int ia = OpAccess::node_of(a);
    const int ib = OpAccess::node_of(b);
    DataPtr ad = OpAccess::data_of(a);
    DataPtr bd = OpAccess::data_of(b);
    back = [ia, ib, ad, bd, n](const std::vector<double>& g, Grads& grads) {
      if (ia >= 0) {
        auto& da = grad_buf(grads, ia, n);
        for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * (*bd)[i];
      }
      if (ib >= 0) {
        auto& db = grad_buf(grads, ib, n);
        for (std::size_t i = 0; i < n; ++i) db[i] += g[i] * (*ad)[i];
      }
    };
  }
  return OpAccess::make(tape, "mul", a.shape(), std::move(out), std::move(back));
}

Tensor scale(const Tensor& x, double c) {
  require_nonempty("scale", x);
  Tape* tape = tape_of("scale", {&x});
  const std::size_t n = static_cast<std::size_t>(x.size());
  std::vector<double> out(n);
  const auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = c * xv[i];

  BackFn back;
  if (tape) {
    const int ix = OpAccess::node_of(x);
    back = [ix, c, n](const std::vector<double>& g, Grads& grads) {
      auto& dx = grad_buf(grads, ix, n);
      for (std::size_t i = 0; i < n; ++i) dx[i] += c * g[i];
    };
  }
  return OpAccess::make(tape, "scale", x.shape(), std::move(out), std::move(back));
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

namespace {

// All products run in axpy (i-k-j) form with a contiguous inner loop, so they
// vectorize without reassociating any reduction; transposes make the
// dot-product variants fit the same form.

// C (m x n) += A (m x k) . B (k x n)
void gemm_acc(const double* __restrict A, const double* __restrict B, double* __restrict C,
              int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = A + static_cast<std::ptrdiff_t>(i) * k;
    double* crow = C + static_cast<std::ptrdiff_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double a = arow[kk];
      const double* brow = B + static_cast<std::ptrdiff_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

// BT (cols x rows) = B (rows x cols)
void transpose_into(const double* __restrict B, double* __restrict BT, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      BT[static_cast<std::ptrdiff_t>(c) * rows + r] = B[static_cast<std::ptrdiff_t>(r) * cols + c];
    }
  }
}

// C (k x n) += A^T . G, with A (m x k), G (m x n)
void gemm_tn_acc(const double* __restrict A, const double* __restrict G, double* __restrict C,
                 int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = A + static_cast<std::ptrdiff_t>(i) * k;
    const double* grow = G + static_cast<std::ptrdiff_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double a = arow[kk];
      double* crow = C + static_cast<std::ptrdiff_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += a * grow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_nonempty("matmul", a);
  require_nonempty("matmul", b);
  if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.shape()[0]) {
    throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " do not conform");
  }
  const int m = a.shape()[static_cast<std::size_t>(a.rank() - 2)];
  const int k = a.shape().back();
  const int n = b.shape()[1];
  const std::int64_t batch = a.size() / (static_cast<std::int64_t>(m) * k);
  Shape out_shape = a.shape();
  out_shape.back() = n;

  Tape* tape = tape_of("matmul", {&a, &b});
  std::vector<double> out(static_cast<std::size_t>(batch) * m * n, 0.0);
  {
    const double* A = a.data().data();
    const double* B = b.data().data();
    for (std::int64_t bt = 0; bt < batch; ++bt) {
      gemm_acc(A + bt * m * k, B, out.data() + bt * static_cast<std::int64_t>(m) * n, m, k, n);
    }
  }

  BackFn back;
  if (tape) {
    const int ia = OpAccess::node_of(a);
    const int ib = OpAccess::node_of(b);
    DataPtr ad = OpAccess::data_of(a);
    DataPtr bd = OpAccess::data_of(b);
    back = [ia, ib, ad, bd, batch, m, k, n](const std::vector<double>& g, Grads& grads) {
      if (ia >= 0) {
        // da = G . B^T
        std::vector<double> bt_buf(static_cast<std::size_t>(n) * k);
        transpose_into(bd->data(), bt_buf.data(), k, n);
        auto& da = grad_buf(grads, ia, static_cast<std::size_t>(batch) * m * k);
        for (std::int64_t bt = 0; bt < batch; ++bt) {
          gemm_acc(g.data() + bt * static_cast<std::int64_t>(m) * n, bt_buf.data(),
                   da.data() + bt * static_cast<std::int64_t>(m) * k, m, n, k);
        }
      }
      if (ib >= 0) {
        auto& db = grad_buf(grads, ib, static_cast<std::size_t>(k) * n);
        for (std::int64_t bt = 0; bt < batch; ++bt) {
          gemm_tn_acc(ad->data() + bt * static_cast<std::int64_t>(m) * k,
                      g.data() + bt * static_cast<std::int64_t>(m) * n, db.data(), m, k, n);
        }
      }
    };
  }
  return OpAccess::make(tape, "matmul", std::move(out_shape), std::move(out), std::move(back));
}

namespace {

void check_bmm_shapes(const char* op, const Tensor& a, const Tensor& b, bool transpose_b) {
  bool ok = a.rank() == 3 && b.rank() == 3 && a.shape()[0] == b.shape()[0];
  if (ok) {
    ok = transpose_b ? a.shape()[2] == b.shape()[2] : a.shape()[2] == b.shape()[1];
  }
  if (!ok) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not conform");
  }
}

}  // namespace

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_nonempty("bmm", a);
  require_nonempty("bmm", b);
  check_bmm_shapes("bmm", a, b, false);
  const int batch = a.shape()[0];
  const int m = a.shape()[1];
  const int k = a.shape()[2];
  const int n = b.shape()[2];
  Tape* tape = tape_of("bmm", {&a, &b});

  std::vector<double> out(static_cast<std::size_t>(batch) * m * n, 0.0);
  {
    const double* A = a.data().data();
    const double* B = b.data().data();
    for (int bt = 0; bt < batch; ++bt) {
      gemm_acc(A + static_cast<std::ptrdiff_t>(bt) * m * k,
               B + static_cast<std::ptrdiff_t>(bt) * k * n,
               out.data() + static_cast<std::ptrdiff_t>(bt) * m * n, m, k, n);
    }
  }

  BackFn back;
  if (tape) {
    const int ia = OpAccess::node_of(a);
    const int ib = OpAccess::node_of(b);
    DataPtr ad = OpAccess::data_of(a);
    DataPtr bd = OpAccess::data_of(b);
    back = [ia, ib, ad, bd, batch, m, k, n](const std::vector<double>& g, Grads& grads) {
      if (ia >= 0) {
        // da[bt] = G . B[bt]^T
        std::vector<double> bt_buf(static_cast<std::size_t>(n) * k);
        auto& da = grad_buf(grads, ia, static_cast<std::size_t>(batch) * m * k);
        for (int bt = 0; bt < batch; ++bt) {
          transpose_into(bd->data() + static_cast<std::ptrdiff_t>(bt) * k * n, bt_buf.data(), k, n);
          gemm_acc(g.data() + static_cast<std::ptrdiff_t>(bt) * m * n, bt_buf.data(),
                   da.data() + static_cast<std::ptrdiff_t>(bt) * m * k, m, n, k);
        }
      }
      if (ib >= 0) {
        auto& db = grad_buf(grads, ib, static_cast<std::size_t>(batch) * k * n);
        for (int bt = 0; bt < batch; ++bt) {
          gemm_tn_acc(ad->data() + static_cast<std::ptrdiff_t>(bt) * m * k,
                      g.data() + static_cast<std::ptrdiff_t>(bt) * m * n,
                      db.data() + static_cast<std::ptrdiff_t>(bt) * k * n, m, k, n);
        }
      }
    };
  }
  Shape out_shape{batch, m, n};
  return OpAccess::make(tape, "bmm", std::move(out_shape), std::move(out), std::move(back));
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  require_nonempty("bmm_nt", a);
  require_nonempty("bmm_nt", b);
  check_bmm_shapes("bmm_nt", a, b, true);
  const int batch = a.shape()[0];
  const int m = a.shape()[1];
  const int k = a.shape()[2];
  const int n = b.shape()[1];
  Tape* tape = tape_of("bmm_nt", {&a, &b});

  std::vector<double> out(static_cast<std::size_t>(batch) * m * n, 0.0);
  {
    const double* A = a.data().data();
    const double* B = b.data().data();
    std::vector<double> bt_buf(static_cast<std::size_t>(k) * n);
    for (int bt = 0; bt < batch; ++bt) {
      transpose_into(B + static_cast<std::ptrdiff_t>(bt) * n * k, bt_buf.data(), n, k);
      gemm_acc(A + static_cast<std::ptrdiff_t>(bt) * m * k, bt_buf.data(),
               out.data() + static_cast<std::ptrdiff_t>(bt) * m * n, m, k, n);
    }
  }

  BackFn back;
  if (tape) {
    const int ia = OpAccess::node_of(a);
    const int ib = OpAccess::node_of(b);
    DataPtr ad = OpAccess::data_of(a);
    DataPtr bd = OpAccess::data_of(b);
    back = [ia, ib, ad, bd, batch, m, k, n](const std::vector<double>& g, Grads& grads) {
      if (ia >= 0) {
        // da[bt] = G . B
        auto& da = grad_buf(grads, ia, static_cast<std::size_t>(batch) * m * k);
        for (int bt = 0; bt < batch; ++bt) {
          gemm_acc(g.data() + static_cast<std::ptrdiff_t>(bt) * m * n,
                   bd->data() + static_cast<std::ptrdiff_t>(bt) * n * k,
                   da.data() + static_cast<std::ptrdiff_t>(bt) * m * k, m, n, k);
        }
      }
      if (ib >= 0) {
        // db[bt] = G^T . A
        auto& db = grad_buf(grads, ib, static_cast<std::size_t>(batch) * n * k);
        for (int bt = 0; bt < batch; ++bt) {
          gemm_tn_acc(g.data() + static_cast<std::ptrdiff_t>(bt) * m * n,
                      ad->data() + static_cast<std::ptrdiff_t>(bt) * m * k,
                      db.data() + static_cast<std::ptrdiff_t>(bt) * n * k, m, n, k);
        }
      }
    };
  }
  Shape out_shape{batch, m, n};
  return OpAccess::make(tape, "bmm_nt", std::move(out_shape), std::move(out), std::move(back));
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  require_nonempty("sum", x);
  Tape* tape = tape_of("sum", {&x});
  double total = 0.0;
  for (double v : x.data()) total += v;

  BackFn back;
  if (tape) {
    const int ix = OpAccess::node_of(x);
    const std::size_t n = static_cast<std::size_t>(x.size());
    back = [ix, n](const std::vector<double>& g, Grads& grads) {
      auto& dx = grad_buf(grads, ix, n);
      for (std::size_t i = 0; i < n; ++i) dx[i] += g[0];
    };
  }
  return OpAccess::make(tape, "sum", Shape{}, {total}, std::move(back));
}

Tensor mean_axis(const Tensor& x, int axis) {
  require_nonempty("mean_axis", x);
  if (axis < 0 || axis >= x.rank()) {
    throw ShapeError("mean_axis: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(x.shape()));
  }
  const auto& s = x.shape();
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= s[static_cast<std::size_t>(i)];
  const std::int64_t len = s[static_cast<std::size_t>(axis)];
  Shape out_shape;
  for (int i = 0; i < x.rank(); ++i) {
    if (i != axis) out_shape.push_back(s[static_cast<std::size_t>(i)]);
  }
  Tape* tape = tape_of("mean_axis", {&x});

  std::vector<double> out(static_cast<std::size_t>(outer * inner), 0.0);
  const auto xv = x.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t a = 0; a < len; ++a) {
      const std::int64_t base = (o * len + a) * inner;
      for (std::int64_t in = 0; in < inner; ++in) {
        out[static_cast<std::size_t>(o * inner + in)] += xv[static_cast<std::size_t>(base + in)];
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(len);
  for (double& v : out) v *= inv;

  BackFn back;
  if (tape) {
    const int ix = OpAccess::node_of(x);
    const std::size_t n = static_cast<std::size_t>(x.size());
    back = [ix, n, outer, inner, len, inv](const std::vector<double>& g, Grads& grads) {
      auto& dx = grad_buf(grads, ix, n);
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t a = 0; a < len; ++a) {
          const std::int64_t base = (o * len + a) * inner;
          for (std::int64_t in = 0; in < inner; ++in) {
            dx[static_cast<std::size_t>(base + in)] +=
                inv * g[static_cast<std::size_t>(o * inner + in)];
          }
        }
      }
    };
  }
  return OpAccess::make(tape, "mean_axis", std::move(out_shape), std::move(out), std::move(back));
}

Tensor l2_norm_last(const Tensor& x) {
  require_nonempty("l2_norm_last", x);
  if (x.rank() < 1) throw ShapeError("l2_norm_last: scalar input");
  const int d = x.shape().back();
  const std::int64_t rows = x.size() / d;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  Tape* tape = tape_of("l2_norm_last", {&x});

  std::vector<double> out(static_cast<std::size_t>(rows));
  const auto xv = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    double acc = kNormEps;
    const std::size_t base = static_cast<std::size_t>(r) * d;
    for (int j = 0; j < d; ++j) acc += xv[base + j] * xv[base + j];
    out[static_cast<std::size_t>(r)] = std::sqrt(acc);
  }

  BackFn back;
  if (tape) {
    const int ix = OpAccess::node_of(x);
    DataPtr xd = OpAccess::data_of(x);
    auto norms = std::make_shared<std::vector<double>>(out);
    back = [ix, xd, norms, rows, d](const std::vector<double>& g, Grads& grads) {
      auto& dx = grad_buf(grads, ix, static_cast<std::size_t>(rows) * d);
      for (std::int64_t r = 0; r < rows; ++r) {
        const double gr = g[static_cast<std::size_t>(r)] / (*norms)[static_cast<std::size_t>(r)];
        const std::size_t base = static_cast<std::size_t>(r) * d;
        for (int j = 0; j < d; ++j) dx[base + j] += gr * (*xd)[base + j];
      }
    };
  }
  return OpAccess::make(tape, "l2_norm_last", std::move(out_shape), std::move(out),
                        std::move(back));
}

// ---------------------------------------------------------------------------
// elementwise nonlinearities
// ---------------------------------------------------------------------------

Tensor sqrt_elem(const Tensor& x) {
  require_nonempty("sqrt", x);
  Tape* tape = tape_of("sqrt", {&x});
  const std::size_t n = static_cast<std::size_t>(x.size());
  std::vector<double> out(n);
  const auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = std::sqrt(xv[i]);

  BackFn back;
  if (tape) {
    const int ix = OpAccess::node_of(x);
    auto saved = std::make_shared<std::vector<double>>(out);
    back = [ix, saved, n](const std::vector<double>& g, Grads& grads) {
      auto& dx = grad_buf(grads, ix, n);
      for (std::size_t i = 0; i < n; ++i) dx[i] += 0.5 * g[i] / (*saved)[i];
    };
  }
  return OpAccess::make(tape, "sqrt", x.shape(), std::move(out), std::move(back));
}

Tensor div_elem(const Tensor& a, const Tensor& b) {
  require_nonempty("div", a);
  require_same_shape("div", a, b);
  const std::size_t n = static_cast<std::size_t>(a.size());
  const auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (bv[i] < kDivEps) throw DomainError("div: denominator below epsilon");
  }
  Tape* tape = tape_of("div", {&a, &b});
  std::vector<double> out(n);
  const auto av = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] / bv[i];

  BackFn back;
  if (tape) {
    const int ia = OpAccess::node_of(a);
    const int ib = OpAccess::node_of(b);
    DataPtr ad = OpAccess::data_of(a);
    DataPtr bd = OpAccess::data_of(b);
    back = [ia, ib, ad, bd, n](const std::vector<double>& g, Grads& grads) {
      if (ia >= 0) {
        auto& da = grad_buf(grads, ia, n);
        for (std::size_t i = 0; i < n; ++i) da[i] += g[i] / (*bd)[i];
      }
      if (ib >= 0) {
        auto& db = grad_buf(grads, ib, n);
        for (std::size_t i = 0; i < n; ++i) {
          db[i] -= g[i] * (*ad)[i] / ((*bd)[i] * (*bd)[i]);
        }
      }
    };
  }
  return OpAccess::make(tape, "div", a.shape(), std::move(out), std::move(back));
}

Tensor rows_div(const Tensor& x, const Tensor& s) {
  require_nonempty("rows_div", x);
  require_nonempty("rows_div", s);
  if (x.rank() < 1) throw ShapeError("rows_div: scalar numerator");
  Shape row_shape(x.shape().begin(), x.shape().end() - 1);
  if (s.shape() != row_shape) {
    throw ShapeError("rows_div: shapes " + shape_str(x.shape()) + " and " + shape_str(s.shape()) +
                     " do not conform");
  }
  const int d = x.shape().back();
  const std::int64_t rows = x.size() / d;
  const auto sv = s.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    if (sv[static_cast<std::size_t>(r)] < kDivEps) {
      throw DomainError("rows_div: denominator below epsilon");
    }
  }
  Tape* tape = tape_of("rows_div", {&x, &s});

  std::vector<double> out(static_cast<std::size_t>(x.size()));
  const auto xv = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double inv = 1.0 / sv[static_cast<std::size_t>(r)];
    const std::size_t base = static_cast<std::size_t>(r) * d;
    for (int j = 0; j < d; ++j) out[base + j] = xv[base + j] * inv;
  }

  BackFn back;
  if (tape) {
    const int ix = OpAccess::node_of(x);
    const int is = OpAccess::node_of(s);
    DataPtr xd = OpAccess::data_of(x);
    DataPtr sd = OpAccess::data_of(s);
    back = [ix, is, xd, sd, rows, d](const std::vector<double>& g, Grads& grads) {
      if (ix >= 0) {
        auto& dx = grad_buf(grads, ix, static_cast<std::size_t>(rows) * d);
        for (std::int64_t r = 0; r < rows; ++r) {
          const double inv = 1.0 / (*sd)[static_cast<std::size_t>(r)];
          const std::size_t base = static_cast<std::size_t>(r) * d;
          for (int j = 0; j < d; ++j) dx[base + j] += g[base + j] * inv;
        }
      }
      if (is >= 0) {
        auto& ds = grad_buf(grads, is, static_cast<std::size_t>(rows));
        for (std::int64_t r = 0; r < rows; ++r) {
          const double sr = (*sd)[static_cast<std::size_t>(r)];
          const std::size_t base = static_cast<std::size_t>(r) * d;
          double acc = 0.0;
          for (int j = 0; j < d; ++j) acc += g[base + j] * (*xd)[base + j];
          ds[static_cast<std::size_t>(r)] -= acc / (sr * sr);
        }
      }
    };
  }
  return OpAccess::make(tape, "rows_div", x.shape(), std::move(out), std::move(back));
}

Tensor relu(const Tensor& x) {
  require_nonempty("relu", x);
  Tape* tape = tape_of("relu", {&x});
  const std::size_t n = static_cast<std::size_t>(x.size());
  std::vector<double> out(n);
  const auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;

  BackFn back;
  if (tape) {
    const int ix = OpAccess::node_of(x);
    DataPtr xd = OpAccess::data_of(x);
    back = [ix, xd, n](const std::vector<double>& g, Grads& grads) {
      auto& dx = grad_buf(grads, ix, n);
      for (std::size_t i = 0; i < n; ++i) {
        if ((*xd)[i] > 0.0) dx[i] += g[i];
      }
    };
  }
  return OpAccess::make(tape, "relu", x.shape(), std::move(out), std::move(back));
}

Tensor gelu(const Tensor& x) {
  require_nonempty("gelu", x);
  Tape* tape = tape_of("gelu", {&x});
  const std::size_t n = static_cast<std::size_t>(x.size());
  std::vector<double> out(n);
  const auto xv = x.data();
  auto cdf = std::make_shared<std::vector<double>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double c = 0.5 * (1.0 + std::erf(xv[i] * kInvSqrt2));
    (*cdf)[i] = c;
    out[i] = xv[i] * c;
  }

  BackFn back;
  if (tape) {
    const int ix = OpAccess::node_of(x);
    DataPtr xd = OpAccess::data_of(x);
    back = [ix, xd, cdf, n](const std::vector<double>& g, Grads& grads) {
      auto& dx = grad_buf(grads, ix, n);
      for (std::size_t i = 0; i < n; ++i) {
        const double xi = (*xd)[i];
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xi * xi);
        dx[i] += g[i] * ((*cdf)[i] + xi * pdf);
      }
    };
  }
  return OpAccess::make(tape, "gelu", x.shape(), std::move(out), std::move(back));
}

Tensor softmax_last(const Tensor& x) {
  require_nonempty("softmax", x);
  if (x.rank() < 1) throw ShapeError("softmax: scalar input");
  const int d = x.shape().back();
  const std::int64_t rows = x.size() / d;
  Tape* tape = tape_of("softmax", {&x});

  std::vector<double> out(static_cast<std::size_t>(x.size()));
  const auto xv = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * d;
    double mx = xv[base];
    for (int j = 1; j < d; ++j) mx = std::max(mx, xv[base + j]);
    double total = 0.0;
    for (int j = 0; j < d; ++j) {
      const double e = std::exp(xv[base + j] - mx);
      out[base + j] = e;
      total += e;
    }
    const double inv = 1.0 / total;
    for (int j = 0; j < d; ++j) out[base + j] *= inv;
  }

  BackFn back;
  if (tape) {
    const int ix = OpAccess::node_of(x);
    auto saved = std::make_shared<std::vector<double>>(out);
    back = [ix, saved, rows, d](const std::vector<double>& g, Grads& grads) {
      auto& dx = grad_buf(grads, ix, static_cast<std::size_t>(rows) * d);
      for (std::int64_t r = 0; r < rows; ++r) {
        const std::size_t base = static_cast<std::size_t>(r) * d;
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += g[base + j] * (*saved)[base + j];
        for (int j = 0; j < d; ++j) {
          dx[base + j] += (*saved)[base + j] * (g[base + j] - dot);
        }
      }
    };
  }
  return OpAccess::make(tape, "softmax", x.shape(), std::move(out), std::move(back));
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_nonempty("layer_norm", x);
  if (x.rank() < 1) throw ShapeError("layer_norm: scalar input");
  const int d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gamma/beta shapes " + shape_str(gamma.shape()) + " and " +
                     shape_str(beta.shape()) + " do not match feature dim " + std::to_string(d));
  }
  const std::int64_t rows = x.size() / d;
  Tape* tape = tape_of("layer_norm", {&x, &gamma, &beta});

  std::vector<double> out(static_cast<std::size_t>(x.size()));
  auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.size()));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xv[base + j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = xv[base + j] - mean;
      var += c * c;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(r)] = inv;
    for (int j = 0; j < d; ++j) {
      const double h = (xv[base + j] - mean) * inv;
      (*xhat)[base + j] = h;
      out[base + j] = h * gv[j] + bv[j];
    }
  }

  BackFn back;
  if (tape) {
    const int ix = OpAccess::node_of(x);
    const int ig = OpAccess::node_of(gamma);
    const int ib = OpAccess::node_of(beta);
    DataPtr gd = OpAccess::data_of(gamma);
    back = [ix, ig, ib, gd, xhat, inv_std, rows, d](const std::vector<double>& g, Grads& grads) {
      if (ix >= 0) {
        auto& dx = grad_buf(grads, ix, static_cast<std::size_t>(rows) * d);
        for (std::int64_t r = 0; r < rows; ++r) {
          const std::size_t base = static_cast<std::size_t>(r) * d;
          double m1 = 0.0, m2 = 0.0;
          for (int j = 0; j < d; ++j) {
            const double dh = g[base + j] * (*gd)[static_cast<std::size_t>(j)];
            m1 += dh;
            m2 += dh * (*xhat)[base + j];
          }
          m1 /= d;
          m2 /= d;
          const double inv = (*inv_std)[static_cast<std::size_t>(r)];
          for (int j = 0; j < d; ++j) {
            const double dh = g[base + j] * (*gd)[static_cast<std::size_t>(j)];
            dx[base + j] += inv * (dh - m1 - (*xhat)[base + j] * m2);
          }
        }
      }
      if (ig >= 0) {
        auto& dg = grad_buf(grads, ig, static_cast<std::size_t>(d));
        for (std::int64_t r = 0; r < rows; ++r) {
          const std::size_t base = static_cast<std::size_t>(r) * d;
          for (int j = 0; j < d; ++j) {
            dg[static_cast<std::size_t>(j)] += g[base + j] * (*xhat)[base + j];
          }
        }
      }
      if (ib >= 0) {
        auto& db = grad_buf(grads, ib, static_cast<std::size_t>(d));
        for (std::int64_t r = 0; r < rows; ++r) {
          const std::size_t base = static_cast<std::size_t>(r) * d;
          for (int j = 0; j < d; ++j) db[static_cast<std::size_t>(j)] += g[base + j];
        }
      }
    };
  }
  return OpAccess::make(tape, "layer_norm", x.shape(), std::move(out), std::move(back));
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

Tensor embedding_lookup(const Tensor& table, const IntTensor& ids) {
  require_nonempty("embedding_lookup", table);
  if (table.rank() != 2) {
    throw ShapeError("embedding_lookup: table must be rank 2, got " + shape_str(table.shape()));
  }
  const int vocab = table.shape()[0];
  const int d = table.shape()[1];
  for (int id : ids.data) {
    if (id < 0 || id >= vocab) {
      throw DomainError("embedding_lookup: id " + std::to_string(id) + " out of range [0," +
                        std::to_string(vocab) + ")");
    }
  }
  Shape out_shape = ids.shape;
  out_shape.push_back(d);
  Tape* tape = tape_of("embedding_lookup", {&table});

  const std::size_t count = ids.data.size();
  std::vector<double> out(count * static_cast<std::size_t>(d));
  const auto tv = table.data();
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t src = static_cast<std::size_t>(ids.data[i]) * d;
    std::copy_n(tv.data() + src, d, out.data() + i * static_cast<std::size_t>(d));
  }

  BackFn back;
  if (tape) {
    const int it = OpAccess::node_of(table);
    auto saved_ids = std::make_shared<std::vector<int>>(ids.data);
    const std::size_t tn = static_cast<std::size_t>(table.size());
    back = [it, saved_ids, tn, d](const std::vector<double>& g, Grads& grads) {
      auto& dt = grad_buf(grads, it, tn);
      for (std::size_t i = 0; i < saved_ids->size(); ++i) {
        const std::size_t dst = static_cast<std::size_t>((*saved_ids)[i]) * d;
        const std::size_t src = i * static_cast<std::size_t>(d);
        for (int j = 0; j < d; ++j) dt[dst + j] += g[src + j];
      }
    };
  }
  return OpAccess::make(tape, "embedding_lookup", std::move(out_shape), std::move(out),
                        std::move(back));
}

namespace {

void axis_factors(const Shape& s, int axis, std::int64_t& outer, std::int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) {
    inner *= s[static_cast<std::size_t>(i)];
  }
}

}  // namespace

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  require_nonempty("concat", a);
  require_nonempty("concat", b);
  bool ok = a.rank() == b.rank() && axis >= 0 && axis < a.rank();
  if (ok) {
    for (int i = 0; i < a.rank(); ++i) {
      if (i != axis && a.shape()[static_cast<std::size_t>(i)] != b.shape()[static_cast<std::size_t>(i)]) {
        ok = false;
      }
    }
  }
  if (!ok) {
    throw ShapeError("concat: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " do not conform on axis " + std::to_string(axis));
  }
  const int la = a.shape()[static_cast<std::size_t>(axis)];
  const int lb = b.shape()[static_cast<std::size_t>(axis)];
  std::int64_t outer, inner;
  axis_factors(a.shape(), axis, outer, inner);
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] = la + lb;
  Tape* tape = tape_of("concat", {&a, &b});

  std::vector<double> out(static_cast<std::size_t>(outer) * (la + lb) * inner);
  {
    const auto av = a.data();
    const auto bv = b.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      double* dst = out.data() + o * static_cast<std::int64_t>(la + lb) * inner;
      std::copy_n(av.data() + o * la * inner, la * inner, dst);
      std::copy_n(bv.data() + o * lb * inner, lb * inner, dst + la * inner);
    }
  }

  BackFn back;
  if (tape) {
    const int ia = OpAccess::node_of(a);
    const int ib = OpAccess::node_of(b);
    back = [ia, ib, outer, inner, la, lb](const std::vector<double>& g, Grads& grads) {
      if (ia >= 0) {
        auto& da = grad_buf(grads, ia, static_cast<std::size_t>(outer * la * inner));
        for (std::int64_t o = 0; o < outer; ++o) {
          const double* src = g.data() + o * static_cast<std::int64_t>(la + lb) * inner;
          double* dst = da.data() + o * la * inner;
          for (std::int64_t i = 0; i < la * inner; ++i) dst[i] += src[i];
        }
      }
      if (ib >= 0) {
        auto& db = grad_buf(grads, ib, static_cast<std::size_t>(outer * lb * inner));
        for (std::int64_t o = 0; o < outer; ++o) {
          const double* src = g.data() + (o * static_cast<std::int64_t>(la + lb) + la) * inner;
          double* dst = db.data() + o * lb * inner;
          for (std::int64_t i = 0; i < lb * inner; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return OpAccess::make(tape, "concat", std::move(out_shape), std::move(out), std::move(back));
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
  require_nonempty("slice", x);
  if (axis < 0 || axis >= x.rank() || start < 0 || len <= 0 ||
      start + len > x.shape()[static_cast<std::size_t>(axis)]) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") on axis " + std::to_string(axis) +
                     " invalid for shape " + shape_str(x.shape()));
  }
  const int full = x.shape()[static_cast<std::size_t>(axis)];
  std::int64_t outer, inner;
  axis_factors(x.shape(), axis, outer, inner);
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  Tape* tape = tape_of("slice", {&x});

  std::vector<double> out(static_cast<std::size_t>(outer) * len * inner);
  {
    const auto xv = x.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(xv.data() + (o * full + start) * inner, len * inner,
                  out.data() + o * len * inner);
    }
  }

  BackFn back;
  if (tape) {
    const int ix = OpAccess::node_of(x);
    const std::size_t xn = static_cast<std::size_t>(x.size());
    back = [ix, xn, outer, inner, full, start, len](const std::vector<double>& g, Grads& grads) {
      auto& dx = grad_buf(grads, ix, xn);
      for (std::int64_t o = 0; o < outer; ++o) {
        const double* src = g.data() + o * len * inner;
        double* dst = dx.data() + (o * full + start) * inner;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(len) * inner; ++i) dst[i] += src[i];
      }
    };
  }
  return OpAccess::make(tape, "slice", std::move(out_shape), std::move(out), std::move(back));
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_nonempty("reshape", x);
  if (shape_numel(shape) != x.size()) {
    throw ShapeError("reshape: shapes " + shape_str(x.shape()) + " and " + shape_str(shape) +
                     " have different element counts");
  }
  Tape* tape = tape_of("reshape", {&x});
  BackFn back;
  if (tape) {
    const int ix = OpAccess::node_of(x);
    const std::size_t n = static_cast<std::size_t>(x.size());
    back = [ix, n](const std::vector<double>& g, Grads& grads) {
      auto& dx = grad_buf(grads, ix, n);
      for (std::size_t i = 0; i < n; ++i) dx[i] += g[i];
    };
  }
  return OpAccess::make_view(tape, "reshape", std::move(shape), x, std::move(back));
}

Tensor masked_mean(const Tensor& x, const Tensor& weights) {
  require_nonempty("masked_mean", x);
  require_nonempty("masked_mean", weights);
  if (weights.on_tape()) throw TapeError("masked_mean: weights must be constants");
  if (x.rank() < 1) throw ShapeError("masked_mean: scalar input");
  Shape row_shape(x.shape().begin(), x.shape().end() - 1);
  if (weights.shape() != row_shape) {
    throw ShapeError("masked_mean: shapes " + shape_str(x.shape()) + " and " +
                     shape_str(weights.shape()) + " do not conform");
  }
  const int d = x.shape().back();
  const std::int64_t rows = x.size() / d;
  const auto wv = weights.data();
  double total = 0.0;
  for (double w : wv) total += w;
  if (!(total > 0.0)) throw DomainError("masked_mean: weight total must be positive");
  Tape* tape = tape_of("masked_mean", {&x});

  std::vector<double> out(static_cast<std::size_t>(d), 0.0);
  const auto xv = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double w = wv[static_cast<std::size_t>(r)];
    if (w == 0.0) continue;
    const std::size_t base = static_cast<std::size_t>(r) * d;
    for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(j)] += w * xv[base + j];
  }
  const double inv = 1.0 / total;
  for (double& v : out) v *= inv;

  BackFn back;
  if (tape) {
    const int ix = OpAccess::node_of(x);
    DataPtr wd = OpAccess::data_of(weights);
    back = [ix, wd, rows, d, inv](const std::vector<double>& g, Grads& grads) {
      auto& dx = grad_buf(grads, ix, static_cast<std::size_t>(rows) * d);
      for (std::int64_t r = 0; r < rows; ++r) {
        const double w = (*wd)[static_cast<std::size_t>(r)] * inv;
        if (w == 0.0) continue;
        const std::size_t base = static_cast<std::size_t>(r) * d;
        for (int j = 0; j < d; ++j) dx[base + j] += w * g[static_cast<std::size_t>(j)];
      }
    };
  }
  return OpAccess::make(tape, "masked_mean", Shape{d}, std::move(out), std::move(back));
}

Tensor normalize_rows(const Tensor& x) { return rows_div(x, l2_norm_last(x)); }

}  // namespace pco::ad
