#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "hge/tensor.hpp"

// Reverse-mode automatic differentiation on a tape of dense double tensors.
// Each op records its forward value and a closure that accumulates adjoints
// into the inputs' gradient slots; gradients add, never overwrite, so a value
// reused twice receives both contributions. Every op validates shapes on
// entry and finiteness on exit.

namespace hge::ad {

// A named trainable tensor. The gradient persists across tape lifetimes and
// is zeroed explicitly at the start of each optimization step.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

  void zero_grad() { grad.zero(); }
};

// Row-range description of a batch of variable-size sets packed into one flat
// row block. pair_off gives, per set, the offset of its |S|x|S| score block
// in the flattened attention-score layout.
struct SegmentSpec {
  std::vector<int> row_off;            // n_segments+1 prefix sums of set sizes
  std::vector<std::int64_t> pair_off;  // n_segments+1 prefix sums of size^2

  static std::shared_ptr<const SegmentSpec> from_sizes(
      const std::vector<int>& sizes) {
    auto s = std::make_shared<SegmentSpec>();
    s->row_off.resize(sizes.size() + 1);
    s->pair_off.resize(sizes.size() + 1);
    s->row_off[0] = 0;
    s->pair_off[0] = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      if (sizes[i] <= 0) throw std::invalid_argument("segment: empty set");
      s->row_off[i + 1] = s->row_off[i] + sizes[i];
      s->pair_off[i + 1] =
          s->pair_off[i] + static_cast<std::int64_t>(sizes[i]) * sizes[i];
    }
    return s;
  }

  int segments() const { return static_cast<int>(row_off.size()) - 1; }
  int total_rows() const { return row_off.back(); }
  int size(int seg) const { return row_off[seg + 1] - row_off[seg]; }
};

using SegmentsPtr = std::shared_ptr<const SegmentSpec>;

class Tape;

struct Var {
  Tape* tape = nullptr;
  int idx = -1;

  bool valid() const { return tape != nullptr && idx >= 0; }
  const Tensor& val() const;
};

class Tape {
public:
  Var leaf(Parameter& p) {
    Var v = alloc(p.value, "leaf");
    set_backward(v, [this, i = v.idx, pp = &p]() {
      accumulate(pp->grad, grad(i));
    });
    return v;
  }

  Var constant(Tensor t) { return alloc(std::move(t), "constant"); }

  const Tensor& val(int i) const { return slots_[i].value; }
  Tensor& grad(int i) { return slots_[i].grad; }

  // Pushes a checked forward value; backward is attached afterwards (leaves
  // and constants simply never attach one).
  Var alloc(Tensor value, const char* op_name) {
    if (!value.all_finite())
      throw std::runtime_error(std::string("non-finite output in op ") +
                               op_name);
    Slot s;
    s.value = std::move(value);
    slots_.push_back(std::move(s));
    return Var{this, static_cast<int>(slots_.size()) - 1};
  }

  void set_backward(const Var& v, std::function<void()> fn) {
    slots_[v.idx].backward = std::move(fn);
  }

  // Seeds d(root)/d(root) = 1 and sweeps the tape in reverse, accumulating
  // adjoints into every reachable Parameter's grad.
  void backward(const Var& root) {
    if (root.tape != this) throw std::logic_error("backward: foreign var");
    if (!val(root.idx).is_scalar())
      throw std::invalid_argument("backward: root must be scalar, got " +
                                  val(root.idx).shape_str());
    for (auto& s : slots_) s.grad = Tensor(s.value.shape);
    grad(root.idx).fill(1.0);
    for (int i = static_cast<int>(slots_.size()) - 1; i >= 0; --i) {
      if (slots_[i].backward) slots_[i].backward();
    }
  }

  std::size_t size() const { return slots_.size(); }

  static void accumulate(Tensor& dst, const Tensor& src) {
    for (std::size_t k = 0; k < dst.size(); ++k) dst.data[k] += src.data[k];
  }

private:
  struct Slot {
    Tensor value;
    Tensor grad;
    std::function<void()> backward;
  };

  // deque keeps slot references stable while the tape grows
  std::deque<Slot> slots_;
};

inline const Tensor& Var::val() const { return tape->val(idx); }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b, const char* op) {
  if (a.tape != b.tape)
    throw std::logic_error(std::string(op) + ": vars from different tapes");
  return *a.tape;
}

inline void require_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                a.shape_str() + " vs " + b.shape_str());
}

}  // namespace detail

// ---- dense linear algebra -------------------------------------------------

// C = A * B, (n x k)(k x m)
inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "matmul");
  const Tensor& A = t.val(a.idx);
  const Tensor& B = t.val(b.idx);
  if (A.cols() != B.rows())
    throw std::invalid_argument("matmul: inner dims differ, " + A.shape_str() +
                                " vs " + B.shape_str());
  const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  Tensor C({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = A.row_ptr(i);
    double* ci = C.row_ptr(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = B.row_ptr(p);
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
  Var out = t.alloc(std::move(C), "matmul");
  t.set_backward(out, [&t, a, b, oi = out.idx, n, k, m]() {
    const Tensor& dC = t.grad(oi);
    const Tensor& A = t.val(a.idx);
    const Tensor& B = t.val(b.idx);
    Tensor& dA = t.grad(a.idx);
    Tensor& dB = t.grad(b.idx);
    for (std::size_t i = 0; i < n; ++i) {
      const double* dci = dC.row_ptr(i);
      const double* ai = A.row_ptr(i);
      double* dai = dA.row_ptr(i);
      for (std::size_t p = 0; p < k; ++p) {
        const double* bp = B.row_ptr(p);
        double acc = 0.0;
        for (std::size_t j = 0; j < m; ++j) acc += dci[j] * bp[j];
        dai[p] += acc;
        double* dbp = dB.row_ptr(p);
        const double av = ai[p];
        for (std::size_t j = 0; j < m; ++j) dbp[j] += av * dci[j];
      }
    }
  });
  return out;
}

inline Var transpose(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = t.val(a.idx);
  const std::size_t n = A.rows(), m = A.cols();
  Tensor B({m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) B.at(j, i) = A.at(i, j);
  Var out = t.alloc(std::move(B), "transpose");
  t.set_backward(out, [&t, a, oi = out.idx, n, m]() {
    const Tensor& dB = t.grad(oi);
    Tensor& dA = t.grad(a.idx);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) dA.at(i, j) += dB.at(j, i);
  });
  return out;
}

// y = x W + b with b broadcast over rows
inline Var linear(Var x, Var w, Var b) {
  Tape& t = detail::same_tape(x, w, "linear");
  const Tensor& X = t.val(x.idx);
  const Tensor& W = t.val(w.idx);
  const Tensor& B = t.val(b.idx);
  if (X.cols() != W.rows() || B.size() != W.cols())
    throw std::invalid_argument("linear: shape mismatch " + X.shape_str() +
                                " * " + W.shape_str() + " + " + B.shape_str());
  const std::size_t n = X.rows(), k = X.cols(), m = W.cols();
  Tensor Y({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    double* yi = Y.row_ptr(i);
    for (std::size_t j = 0; j < m; ++j) yi[j] = B.data[j];
    const double* xi = X.row_ptr(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = xi[p];
      const double* wp = W.row_ptr(p);
      for (std::size_t j = 0; j < m; ++j) yi[j] += xv * wp[j];
    }
  }
  Var out = t.alloc(std::move(Y), "linear");
  t.set_backward(out, [&t, x, w, b, oi = out.idx, n, k, m]() {
    const Tensor& dY = t.grad(oi);
    const Tensor& X = t.val(x.idx);
    const Tensor& W = t.val(w.idx);
    Tensor& dX = t.grad(x.idx);
    Tensor& dW = t.grad(w.idx);
    Tensor& dB = t.grad(b.idx);
    for (std::size_t i = 0; i < n; ++i) {
      const double* dyi = dY.row_ptr(i);
      const double* xi = X.row_ptr(i);
      double* dxi = dX.row_ptr(i);
      for (std::size_t j = 0; j < m; ++j) dB.data[j] += dyi[j];
      for (std::size_t p = 0; p < k; ++p) {
        const double* wp = W.row_ptr(p);
        double acc = 0.0;
        for (std::size_t j = 0; j < m; ++j) acc += dyi[j] * wp[j];
        dxi[p] += acc;
        double* dwp = dW.row_ptr(p);
        const double xv = xi[p];
        for (std::size_t j = 0; j < m; ++j) dwp[j] += xv * dyi[j];
      }
    }
  });
  return out;
}

// ---- elementwise ------------------------------------------------------------

namespace detail {

template <typename FwdFn, typename BwdFn>
Var binary_elementwise(Var a, Var b, const char* name, FwdFn fwd, BwdFn bwd) {
  Tape& t = same_tape(a, b, name);
  const Tensor& A = t.val(a.idx);
  const Tensor& B = t.val(b.idx);
  require_shape(A, B, name);
  Tensor C(A.shape);
  for (std::size_t i = 0; i < A.size(); ++i)
    C.data[i] = fwd(A.data[i], B.data[i]);
  Var out = t.alloc(std::move(C), name);
  t.set_backward(out, [&t, a, b, oi = out.idx, bwd]() {
    const Tensor& dC = t.grad(oi);
    const Tensor& A = t.val(a.idx);
    const Tensor& B = t.val(b.idx);
    Tensor& dA = t.grad(a.idx);
    Tensor& dB = t.grad(b.idx);
    for (std::size_t i = 0; i < dC.size(); ++i)
      bwd(A.data[i], B.data[i], dC.data[i], dA.data[i], dB.data[i]);
  });
  return out;
}

}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::binary_elementwise(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double d, double& da, double& db) {
        da += d;
        db += d;
      });
}

inline Var sub(Var a, Var b) {
  return detail::binary_elementwise(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double d, double& da, double& db) {
        da += d;
        db -= d;
      });
}

inline Var mul(Var a, Var b) {
  return detail::binary_elementwise(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y, double d, double& da, double& db) {
        da += d * y;
        db += d * x;
      });
}

inline Var div(Var a, Var b) {
  return detail::binary_elementwise(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double x, double y, double d, double& da, double& db) {
        da += d / y;
        db -= d * x / (y * y);
      });
}

inline Var scalar_mul(Var a, double c) {
  Tape& t = *a.tape;
  const Tensor& A = t.val(a.idx);
  Tensor C(A.shape);
  for (std::size_t i = 0; i < A.size(); ++i) C.data[i] = c * A.data[i];
  Var out = t.alloc(std::move(C), "scalar_mul");
  t.set_backward(out, [&t, a, oi = out.idx, c]() {
    const Tensor& dC = t.grad(oi);
    Tensor& dA = t.grad(a.idx);
    for (std::size_t i = 0; i < dC.size(); ++i) dA.data[i] += c * dC.data[i];
  });
  return out;
}

inline Var log(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = t.val(a.idx);
  Tensor C(A.shape);
  for (std::size_t i = 0; i < A.size(); ++i) C.data[i] = std::log(A.data[i]);
  Var out = t.alloc(std::move(C), "log");
  t.set_backward(out, [&t, a, oi = out.idx]() {
    const Tensor& dC = t.grad(oi);
    const Tensor& A = t.val(a.idx);
    Tensor& dA = t.grad(a.idx);
    for (std::size_t i = 0; i < dC.size(); ++i)
      dA.data[i] += dC.data[i] / A.data[i];
  });
  return out;
}

inline Var exp(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = t.val(a.idx);
  Tensor C(A.shape);
  for (std::size_t i = 0; i < A.size(); ++i) C.data[i] = std::exp(A.data[i]);
  Var out = t.alloc(std::move(C), "exp");
  t.set_backward(out, [&t, a, oi = out.idx]() {
    const Tensor& dC = t.grad(oi);
    const Tensor& C = t.val(oi);
    Tensor& dA = t.grad(a.idx);
    for (std::size_t i = 0; i < dC.size(); ++i)
      dA.data[i] += dC.data[i] * C.data[i];
  });
  return out;
}

// Stop-gradient: value passes through, adjoints do not.
inline Var detach(Var a) {
  Tape& t = *a.tape;
  return t.constant(t.val(a.idx));
}

// ---- row/reduction ops ------------------------------------------------------

// softmax over each row, with per-row max subtraction for overflow safety
inline Var row_softmax(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = t.val(a.idx);
  const std::size_t n = A.rows(), m = A.cols();
  Tensor P(A.shape);
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = A.row_ptr(i);
    double* pi = P.row_ptr(i);
    double mx = ai[0];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, ai[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      pi[j] = std::exp(ai[j] - mx);
      z += pi[j];
    }
    for (std::size_t j = 0; j < m; ++j) pi[j] /= z;
  }
  Var out = t.alloc(std::move(P), "row_softmax");
  t.set_backward(out, [&t, a, oi = out.idx, n, m]() {
    const Tensor& dP = t.grad(oi);
    const Tensor& P = t.val(oi);
    Tensor& dA = t.grad(a.idx);
    for (std::size_t i = 0; i < n; ++i) {
      const double* pi = P.row_ptr(i);
      const double* dpi = dP.row_ptr(i);
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += pi[j] * dpi[j];
      double* dai = dA.row_ptr(i);
      for (std::size_t j = 0; j < m; ++j) dai[j] += pi[j] * (dpi[j] - dot);
    }
  });
  return out;
}

// Per-row layer normalization with learnable affine (gain, bias), epsilon
// added to the variance.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  Tape& t = *x.tape;
  const Tensor& X = t.val(x.idx);
  const Tensor& G = t.val(gain.idx);
  const Tensor& B = t.val(bias.idx);
  const std::size_t n = X.rows(), m = X.cols();
  if (G.size() != m || B.size() != m)
    throw std::invalid_argument("layer_norm: affine size mismatch");
  Tensor Y(X.shape);
  // keep per-row inv-std and normalized values for the backward pass
  auto inv_std = std::make_shared<std::vector<double>>(n);
  auto xhat = std::make_shared<std::vector<double>>(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = X.row_ptr(i);
    double mean = 0.0;
    for (std::size_t j = 0; j < m; ++j) mean += xi[j];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double d = xi[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(m);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    double* yi = Y.row_ptr(i);
    for (std::size_t j = 0; j < m; ++j) {
      const double xh = (xi[j] - mean) * is;
      (*xhat)[i * m + j] = xh;
      yi[j] = G.data[j] * xh + B.data[j];
    }
  }
  Var out = t.alloc(std::move(Y), "layer_norm");
  t.set_backward(out, [&t, x, gain, bias, oi = out.idx, n, m, inv_std, xhat]() {
    const Tensor& dY = t.grad(oi);
    const Tensor& G = t.val(gain.idx);
    Tensor& dX = t.grad(x.idx);
    Tensor& dG = t.grad(gain.idx);
    Tensor& dB = t.grad(bias.idx);
    for (std::size_t i = 0; i < n; ++i) {
      const double* dyi = dY.row_ptr(i);
      const double* xh = xhat->data() + i * m;
      double sum_dxh = 0.0, sum_dxh_xh = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        dG.data[j] += dyi[j] * xh[j];
        dB.data[j] += dyi[j];
        const double dxh = dyi[j] * G.data[j];
        sum_dxh += dxh;
        sum_dxh_xh += dxh * xh[j];
      }
      const double inv_m = 1.0 / static_cast<double>(m);
      const double is = (*inv_std)[i];
      double* dxi = dX.row_ptr(i);
      for (std::size_t j = 0; j < m; ++j) {
        const double dxh = dyi[j] * G.data[j];
        dxi[j] += is * (dxh - inv_m * sum_dxh - xh[j] * inv_m * sum_dxh_xh);
      }
    }
  });
  return out;
}

// column means: (n x d) -> (1 x d)
inline Var mean_rows(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = t.val(a.idx);
  const std::size_t n = A.rows(), m = A.cols();
  if (n == 0) throw std::invalid_argument("mean_rows: empty input");
  Tensor M({1, m});
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = A.row_ptr(i);
    for (std::size_t j = 0; j < m; ++j) M.data[j] += ai[j];
  }
  for (std::size_t j = 0; j < m; ++j) M.data[j] /= static_cast<double>(n);
  Var out = t.alloc(std::move(M), "mean_rows");
  t.set_backward(out, [&t, a, oi = out.idx, n, m]() {
    const Tensor& dM = t.grad(oi);
    Tensor& dA = t.grad(a.idx);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      double* dai = dA.row_ptr(i);
      for (std::size_t j = 0; j < m; ++j) dai[j] += dM.data[j] * inv_n;
    }
  });
  return out;
}

// columns of the inputs concatenated: [(n x d1), (n x d2), ...] -> n x sum(di)
inline Var concat_last_dim(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_last_dim: no inputs");
  Tape& t = *parts[0].tape;
  const std::size_t n = t.val(parts[0].idx).rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.tape != &t) throw std::logic_error("concat_last_dim: mixed tapes");
    if (t.val(p.idx).rows() != n)
      throw std::invalid_argument("concat_last_dim: row counts differ");
    total += t.val(p.idx).cols();
  }
  Tensor C({n, total});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& P = t.val(p.idx);
    const std::size_t m = P.cols();
    for (std::size_t i = 0; i < n; ++i)
      std::copy(P.row_ptr(i), P.row_ptr(i) + m, C.row_ptr(i) + off);
    off += m;
  }
  Var out = t.alloc(std::move(C), "concat_last_dim");
  t.set_backward(out, [&t, parts, oi = out.idx, n]() {
    const Tensor& dC = t.grad(oi);
    std::size_t off = 0;
    for (const Var& p : parts) {
      Tensor& dP = t.grad(p.idx);
      const std::size_t m = dP.cols();
      for (std::size_t i = 0; i < n; ++i) {
        const double* src = dC.row_ptr(i) + off;
        double* dst = dP.row_ptr(i);
        for (std::size_t j = 0; j < m; ++j) dst[j] += src[j];
      }
      off += m;
    }
  });
  return out;
}

// rows of b appended after rows of a (column counts must match)
inline Var concat_rows(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "concat_rows");
  const Tensor& A = t.val(a.idx);
  const Tensor& B = t.val(b.idx);
  if (A.cols() != B.cols())
    throw std::invalid_argument("concat_rows: column mismatch " +
                                A.shape_str() + " vs " + B.shape_str());
  Tensor C({A.rows() + B.rows(), A.cols()});
  std::copy(A.data.begin(), A.data.end(), C.data.begin());
  std::copy(B.data.begin(), B.data.end(), C.data.begin() + A.size());
  Var out = t.alloc(std::move(C), "concat_rows");
  t.set_backward(out, [&t, a, b, oi = out.idx]() {
    const Tensor& dC = t.grad(oi);
    Tensor& dA = t.grad(a.idx);
    Tensor& dB = t.grad(b.idx);
    for (std::size_t i = 0; i < dA.size(); ++i) dA.data[i] += dC.data[i];
    for (std::size_t i = 0; i < dB.size(); ++i)
      dB.data[i] += dC.data[dA.size() + i];
  });
  return out;
}

// mean squared difference over all entries
inline Var mse(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "mse");
  const Tensor& A = t.val(a.idx);
  const Tensor& B = t.val(b.idx);
  detail::require_shape(A, B, "mse");
  const double inv = 1.0 / static_cast<double>(A.size());
  double s = 0.0;
  for (std::size_t i = 0; i < A.size(); ++i) {
    const double d = A.data[i] - B.data[i];
    s += d * d;
  }
  Var out = t.alloc(Tensor::scalar(s * inv), "mse");
  t.set_backward(out, [&t, a, b, oi = out.idx, inv]() {
    const double d = t.grad(oi).data[0];
    const Tensor& A = t.val(a.idx);
    const Tensor& B = t.val(b.idx);
    Tensor& dA = t.grad(a.idx);
    Tensor& dB = t.grad(b.idx);
    for (std::size_t i = 0; i < A.size(); ++i) {
      const double g = 2.0 * inv * (A.data[i] - B.data[i]) * d;
      dA.data[i] += g;
      dB.data[i] -= g;
    }
  });
  return out;
}

// Mean softmax cross-entropy against one-hot labels (labels carry no grad).
// Forward uses per-row max-shifted log-sum-exp; backward is the classic
// (softmax - y) / n.
inline Var cross_entropy(Var logits, const Tensor& onehot) {
  Tape& t = *logits.tape;
  const Tensor& Z = t.val(logits.idx);
  detail::require_shape(Z, onehot, "cross_entropy");
  const std::size_t n = Z.rows(), c = Z.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double row_sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double y = onehot.at(i, j);
      if (y != 0.0 && y != 1.0)
        throw std::invalid_argument("cross_entropy: label row not one-hot");
      row_sum += y;
    }
    if (row_sum != 1.0)
      throw std::invalid_argument("cross_entropy: label row not one-hot");
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* zi = Z.row_ptr(i);
    double mx = zi[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, zi[j]);
    double lse = 0.0, ztrue = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      lse += std::exp(zi[j] - mx);
      if (onehot.at(i, j) == 1.0) ztrue = zi[j];
    }
    loss += (mx + std::log(lse)) - ztrue;
  }
  loss /= static_cast<double>(n);
  Var out = t.alloc(Tensor::scalar(loss), "cross_entropy");
  auto labels = std::make_shared<Tensor>(onehot);
  t.set_backward(out, [&t, logits, oi = out.idx, labels, n, c]() {
    const double d = t.grad(oi).data[0];
    const Tensor& Z = t.val(logits.idx);
    Tensor& dZ = t.grad(logits.idx);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double* zi = Z.row_ptr(i);
      double mx = zi[0];
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, zi[j]);
      double z = 0.0;
      for (std::size_t j = 0; j < c; ++j) z += std::exp(zi[j] - mx);
      double* dzi = dZ.row_ptr(i);
      for (std::size_t j = 0; j < c; ++j) {
        const double p = std::exp(zi[j] - mx) / z;
        dzi[j] += d * inv_n * (p - labels->at(i, j));
      }
    }
  });
  return out;
}

// rows scaled to unit L2 norm; a zero row has no defined direction and is an
// error (undefined cosine)
inline Var row_normalize(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = t.val(a.idx);
  const std::size_t n = A.rows(), m = A.cols();
  Tensor Y(A.shape);
  auto norms = std::make_shared<std::vector<double>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = A.row_ptr(i);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += ai[j] * ai[j];
    const double r = std::sqrt(s);
    if (r < 1e-30)
      throw std::runtime_error("row_normalize: zero vector (undefined cosine)");
    (*norms)[i] = r;
    double* yi = Y.row_ptr(i);
    for (std::size_t j = 0; j < m; ++j) yi[j] = ai[j] / r;
  }
  Var out = t.alloc(std::move(Y), "row_normalize");
  t.set_backward(out, [&t, a, oi = out.idx, norms, n, m]() {
    const Tensor& dY = t.grad(oi);
    const Tensor& Y = t.val(oi);
    Tensor& dA = t.grad(a.idx);
    for (std::size_t i = 0; i < n; ++i) {
      const double* dyi = dY.row_ptr(i);
      const double* yi = Y.row_ptr(i);
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += dyi[j] * yi[j];
      const double inv_r = 1.0 / (*norms)[i];
      double* dai = dA.row_ptr(i);
      for (std::size_t j = 0; j < m; ++j)
        dai[j] += (dyi[j] - yi[j] * dot) * inv_r;
    }
  });
  return out;
}

// row i of x multiplied by s[i] (s is n x 1)
inline Var scale_rows(Var x, Var s) {
  Tape& t = detail::same_tape(x, s, "scale_rows");
  const Tensor& X = t.val(x.idx);
  const Tensor& S = t.val(s.idx);
  const std::size_t n = X.rows(), m = X.cols();
  if (S.size() != n)
    throw std::invalid_argument("scale_rows: scale length " + S.shape_str() +
                                " vs rows " + X.shape_str());
  Tensor Y(X.shape);
  for (std::size_t i = 0; i < n; ++i) {
    const double sv = S.data[i];
    const double* xi = X.row_ptr(i);
    double* yi = Y.row_ptr(i);
    for (std::size_t j = 0; j < m; ++j) yi[j] = sv * xi[j];
  }
  Var out = t.alloc(std::move(Y), "scale_rows");
  t.set_backward(out, [&t, x, s, oi = out.idx, n, m]() {
    const Tensor& dY = t.grad(oi);
    const Tensor& X = t.val(x.idx);
    const Tensor& S = t.val(s.idx);
    Tensor& dX = t.grad(x.idx);
    Tensor& dS = t.grad(s.idx);
    for (std::size_t i = 0; i < n; ++i) {
      const double* dyi = dY.row_ptr(i);
      const double* xi = X.row_ptr(i);
      double* dxi = dX.row_ptr(i);
      const double sv = S.data[i];
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        dxi[j] += sv * dyi[j];
        acc += xi[j] * dyi[j];
      }
      dS.data[i] += acc;
    }
  });
  return out;
}

// ---- gather / scatter -------------------------------------------------------

inline Var gather_rows(Var a, std::vector<int> idx) {
  Tape& t = *a.tape;
  const Tensor& A = t.val(a.idx);
  const std::size_t m = A.cols();
  Tensor G({idx.size(), m});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= A.rows())
      throw std::out_of_range("gather_rows: index " + std::to_string(idx[i]));
    std::copy(A.row_ptr(idx[i]), A.row_ptr(idx[i]) + m, G.row_ptr(i));
  }
  Var out = t.alloc(std::move(G), "gather_rows");
  auto ix = std::make_shared<std::vector<int>>(std::move(idx));
  t.set_backward(out, [&t, a, oi = out.idx, ix, m]() {
    const Tensor& dG = t.grad(oi);
    Tensor& dA = t.grad(a.idx);
    for (std::size_t i = 0; i < ix->size(); ++i) {
      const double* src = dG.row_ptr(i);
      double* dst = dA.row_ptr((*ix)[i]);
      for (std::size_t j = 0; j < m; ++j) dst[j] += src[j];
    }
  });
  return out;
}

// base with rows[k] written over base row ids[k]; non-listed rows pass through
inline Var row_scatter_replace(Var base, const std::vector<int>& ids, Var rows) {
  Tape& t = detail::same_tape(base, rows, "row_scatter_replace");
  const Tensor& B = t.val(base.idx);
  const Tensor& R = t.val(rows.idx);
  if (R.rows() != ids.size() || R.cols() != B.cols())
    throw std::invalid_argument("row_scatter_replace: shape mismatch");
  Tensor Y = B;
  const std::size_t m = B.cols();
  std::vector<std::uint8_t> replaced(B.rows(), 0);
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (replaced[ids[k]])
      throw std::invalid_argument("row_scatter_replace: duplicate id");
    replaced[ids[k]] = 1;
    std::copy(R.row_ptr(k), R.row_ptr(k) + m, Y.row_ptr(ids[k]));
  }
  Var out = t.alloc(std::move(Y), "row_scatter_replace");
  auto ix = std::make_shared<std::vector<int>>(ids);
  auto rep = std::make_shared<std::vector<std::uint8_t>>(std::move(replaced));
  t.set_backward(out, [&t, base, rows, oi = out.idx, ix, rep, m]() {
    const Tensor& dY = t.grad(oi);
    Tensor& dB = t.grad(base.idx);
    Tensor& dR = t.grad(rows.idx);
    for (std::size_t i = 0; i < dB.rows(); ++i) {
      if ((*rep)[i]) continue;
      const double* src = dY.row_ptr(i);
      double* dst = dB.row_ptr(i);
      for (std::size_t j = 0; j < m; ++j) dst[j] += src[j];
    }
    for (std::size_t k = 0; k < ix->size(); ++k) {
      const double* src = dY.row_ptr((*ix)[k]);
      double* dst = dR.row_ptr(k);
      for (std::size_t j = 0; j < m; ++j) dst[j] += src[j];
    }
  });
  return out;
}

// ---- segmented attention kernels ---------------------------------------------
// These batch many independent variable-size sets through one tape node. The
// rows of q/k/v are grouped by segs; scores for segment s form a dense
// |S_s| x |S_s| block stored flat at pair_off[s].

inline Var segment_qkt(Var q, Var k, SegmentsPtr segs, double scale) {
  Tape& t = detail::same_tape(q, k, "segment_qkt");
  const Tensor& Q = t.val(q.idx);
  const Tensor& K = t.val(k.idx);
  detail::require_shape(Q, K, "segment_qkt");
  if (static_cast<int>(Q.rows()) != segs->total_rows())
    throw std::invalid_argument("segment_qkt: rows do not match segments");
  const std::size_t d = Q.cols();
  Tensor S({static_cast<std::size_t>(segs->pair_off.back()), 1});
  for (int seg = 0; seg < segs->segments(); ++seg) {
    const int r0 = segs->row_off[seg];
    const int ns = segs->size(seg);
    double* blk = S.data.data() + segs->pair_off[seg];
    for (int i = 0; i < ns; ++i) {
      const double* qi = Q.row_ptr(r0 + i);
      for (int j = 0; j < ns; ++j) {
        const double* kj = K.row_ptr(r0 + j);
        double acc = 0.0;
        for (std::size_t p = 0; p < d; ++p) acc += qi[p] * kj[p];
        blk[i * ns + j] = scale * acc;
      }
    }
  }
  Var out = t.alloc(std::move(S), "segment_qkt");
  t.set_backward(out, [&t, q, k, oi = out.idx, segs, scale, d]() {
    const Tensor& dS = t.grad(oi);
    const Tensor& Q = t.val(q.idx);
    const Tensor& K = t.val(k.idx);
    Tensor& dQ = t.grad(q.idx);
    Tensor& dK = t.grad(k.idx);
    for (int seg = 0; seg < segs->segments(); ++seg) {
      const int r0 = segs->row_off[seg];
      const int ns = segs->size(seg);
      const double* dblk = dS.data.data() + segs->pair_off[seg];
      for (int i = 0; i < ns; ++i) {
        double* dqi = dQ.row_ptr(r0 + i);
        for (int j = 0; j < ns; ++j) {
          const double g = scale * dblk[i * ns + j];
          if (g == 0.0) continue;
          const double* kj = K.row_ptr(r0 + j);
          const double* qi = Q.row_ptr(r0 + i);
          double* dkj = dK.row_ptr(r0 + j);
          for (std::size_t p = 0; p < d; ++p) {
            dqi[p] += g * kj[p];
            dkj[p] += g * qi[p];
          }
        }
      }
    }
  });
  return out;
}

inline Var segment_softmax(Var s, SegmentsPtr segs) {
  Tape& t = *s.tape;
  const Tensor& S = t.val(s.idx);
  if (static_cast<std::int64_t>(S.size()) != segs->pair_off.back())
    throw std::invalid_argument("segment_softmax: size does not match segments");
  Tensor P(S.shape);
  for (int seg = 0; seg < segs->segments(); ++seg) {
    const int ns = segs->size(seg);
    const double* blk = S.data.data() + segs->pair_off[seg];
    double* pblk = P.data.data() + segs->pair_off[seg];
    for (int i = 0; i < ns; ++i) {
      const double* row = blk + i * ns;
      double* prow = pblk + i * ns;
      double mx = row[0];
      for (int j = 1; j < ns; ++j) mx = std::max(mx, row[j]);
      double z = 0.0;
      for (int j = 0; j < ns; ++j) {
        prow[j] = std::exp(row[j] - mx);
        z += prow[j];
      }
      for (int j = 0; j < ns; ++j) prow[j] /= z;
    }
  }
  Var out = t.alloc(std::move(P), "segment_softmax");
  t.set_backward(out, [&t, s, oi = out.idx, segs]() {
    const Tensor& dP = t.grad(oi);
    const Tensor& P = t.val(oi);
    Tensor& dS = t.grad(s.idx);
    for (int seg = 0; seg < segs->segments(); ++seg) {
      const int ns = segs->size(seg);
      const double* pblk = P.data.data() + segs->pair_off[seg];
      const double* dpblk = dP.data.data() + segs->pair_off[seg];
      double* dsblk = dS.data.data() + segs->pair_off[seg];
      for (int i = 0; i < ns; ++i) {
        const double* p = pblk + i * ns;
        const double* dp = dpblk + i * ns;
        double* ds = dsblk + i * ns;
        double dot = 0.0;
        for (int j = 0; j < ns; ++j) dot += p[j] * dp[j];
        for (int j = 0; j < ns; ++j) ds[j] += p[j] * (dp[j] - dot);
      }
    }
  });
  return out;
}

// O_i = sum_j P_ij V_j within each segment
inline Var segment_av(Var p, Var v, SegmentsPtr segs) {
  Tape& t = detail::same_tape(p, v, "segment_av");
  const Tensor& P = t.val(p.idx);
  const Tensor& V = t.val(v.idx);
  if (static_cast<std::int64_t>(P.size()) != segs->pair_off.back() ||
      static_cast<int>(V.rows()) != segs->total_rows())
    throw std::invalid_argument("segment_av: sizes do not match segments");
  const std::size_t d = V.cols();
  Tensor O({V.rows(), d});
  for (int seg = 0; seg < segs->segments(); ++seg) {
    const int r0 = segs->row_off[seg];
    const int ns = segs->size(seg);
    const double* pblk = P.data.data() + segs->pair_off[seg];
    for (int i = 0; i < ns; ++i) {
      double* oi = O.row_ptr(r0 + i);
      const double* prow = pblk + i * ns;
      for (int j = 0; j < ns; ++j) {
        const double w = prow[j];
        const double* vj = V.row_ptr(r0 + j);
        for (std::size_t c = 0; c < d; ++c) oi[c] += w * vj[c];
      }
    }
  }
  Var out = t.alloc(std::move(O), "segment_av");
  t.set_backward(out, [&t, p, v, oi = out.idx, segs, d]() {
    const Tensor& dO = t.grad(oi);
    const Tensor& P = t.val(p.idx);
    const Tensor& V = t.val(v.idx);
    Tensor& dP = t.grad(p.idx);
    Tensor& dV = t.grad(v.idx);
    for (int seg = 0; seg < segs->segments(); ++seg) {
      const int r0 = segs->row_off[seg];
      const int ns = segs->size(seg);
      const double* pblk = P.data.data() + segs->pair_off[seg];
      double* dpblk = dP.data.data() + segs->pair_off[seg];
      for (int i = 0; i < ns; ++i) {
        const double* doi = dO.row_ptr(r0 + i);
        const double* prow = pblk + i * ns;
        double* dprow = dpblk + i * ns;
        for (int j = 0; j < ns; ++j) {
          const double* vj = V.row_ptr(r0 + j);
          double* dvj = dV.row_ptr(r0 + j);
          double acc = 0.0;
          const double w = prow[j];
          for (std::size_t c = 0; c < d; ++c) {
            acc += doi[c] * vj[c];
            dvj[c] += w * doi[c];
          }
          dprow[j] += acc;
        }
      }
    }
  });
  return out;
}

// per-segment mean of rows: (total_rows x d) -> (n_segments x d)
inline Var segment_mean(Var x, SegmentsPtr segs) {
  Tape& t = *x.tape;
  const Tensor& X = t.val(x.idx);
  if (static_cast<int>(X.rows()) != segs->total_rows())
    throw std::invalid_argument("segment_mean: rows do not match segments");
  const std::size_t d = X.cols();
  Tensor M({static_cast<std::size_t>(segs->segments()), d});
  for (int seg = 0; seg < segs->segments(); ++seg) {
    const int r0 = segs->row_off[seg];
    const int ns = segs->size(seg);
    double* mi = M.row_ptr(seg);
    for (int i = 0; i < ns; ++i) {
      const double* xi = X.row_ptr(r0 + i);
      for (std::size_t c = 0; c < d; ++c) mi[c] += xi[c];
    }
    for (std::size_t c = 0; c < d; ++c) mi[c] /= static_cast<double>(ns);
  }
  Var out = t.alloc(std::move(M), "segment_mean");
  t.set_backward(out, [&t, x, oi = out.idx, segs, d]() {
    const Tensor& dM = t.grad(oi);
    Tensor& dX = t.grad(x.idx);
    for (int seg = 0; seg < segs->segments(); ++seg) {
      const int r0 = segs->row_off[seg];
      const int ns = segs->size(seg);
      const double* dmi = dM.row_ptr(seg);
      const double inv = 1.0 / static_cast<double>(ns);
      for (int i = 0; i < ns; ++i) {
        double* dxi = dX.row_ptr(r0 + i);
        for (std::size_t c = 0; c < d; ++c) dxi[c] += dmi[c] * inv;
      }
    }
  });
  return out;
}

// ---- gradient checking --------------------------------------------------------

// Max relative error between the analytic gradient and central differences,
// sampled over at most max_coords coordinates per parameter. eval(true) must
// compute the loss and leave gradients in the parameters (they are zeroed
// here first); eval(false) must compute the loss alone.
inline double gradient_check(const std::function<double(bool)>& eval,
                             const std::vector<Parameter*>& params,
                             double h = 1e-6, int max_coords = 64,
                             std::uint64_t seed = 1) {
  for (Parameter* p : params) p->zero_grad();
  (void)eval(true);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  RngStream rng(seed, "gradient_check");
  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    const std::size_t n = p.value.size();
    std::vector<std::size_t> coords;
    if (static_cast<int>(n) <= max_coords) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      for (int i = 0; i < max_coords; ++i)
        coords.push_back(static_cast<std::size_t>(rng.uniform_index(n)));
    }
    for (std::size_t c : coords) {
      const double orig = p.value.data[c];
      p.value.data[c] = orig + h;
      const double fp = eval(false);
      p.value.data[c] = orig - h;
      const double fm = eval(false);
      p.value.data[c] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("gradient_check: non-finite loss at " +
                                 p.name);
      const double fd = (fp - fm) / (2.0 * h);
      const double rel = std::fabs(analytic[pi].data[c] - fd) /
                         std::max(1.0, std::fabs(fd));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace hge::ad
