#pragma once

// Minimal reverse-mode differentiation over dense matrices. A Tape records
// every operation in creation order; backward() replays the recorded
// closures in reverse. Nodes that do not depend on any differentiable leaf
// record no closure and never receive a gradient.

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "omni/errors.hpp"
#include "omni/rope.hpp"
#include "omni/tensor.hpp"

namespace omni::ad {

class Tape;

/// Handle to a node on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false, {}); }
  Var leaf(Matrix value) { return push(std::move(value), true, {}); }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node, allocated as zeros on first use.
  Matrix& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.grad.same_shape(n.value) || (n.grad.empty() && !n.value.empty())) {
      n.grad = Matrix(n.value.rows(), n.value.cols());
    }
    return n.grad;
  }

  /// Gradient of the last backward() target w.r.t. v; zeros when v had no
  /// path to it.
  Matrix gradient(Var v) {
    if (!nodes_[v.id].requires_grad) return Matrix(v.rows(), v.cols());
    return grad(v.id);
  }

  void backward(Var scalar) {
    if (scalar.value().size() != 1) {
      throw DimensionError(DimensionErrorKind::ShapeMismatch, "backward: target must be 1x1");
    }
    for (Node& n : nodes_) n.grad = Matrix();
    if (!nodes_[scalar.id].requires_grad) return;
    grad(scalar.id)(0, 0) = 1.0;
    for (std::size_t i = scalar.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward();
    }
  }

  Var push(Matrix value, bool requires_grad, std::function<void()> backward) {
    nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, std::move(backward)});
    return Var{this, nodes_.size() - 1};
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::function<void()> backward;
  };
  // deque keeps node references stable while ops append
  std::deque<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(id); }

namespace detail {

inline bool any_grad(std::initializer_list<Var> vs) {
  for (const Var& v : vs)
    if (v.tape->requires_grad(v.id)) return true;
  return false;
}

inline void check(bool ok, const char* what) {
  if (!ok) throw DimensionError(DimensionErrorKind::ShapeMismatch, what);
}

/// Records an op result. back(gout) runs during backward with the
/// gradient flowing into the result.
template <class Back>
Var record(Tape& t, Matrix value, bool needs_grad, Back back) {
  if (!needs_grad) return t.constant(std::move(value));
  const std::size_t id = t.size();
  return t.push(std::move(value), true, [&t, id, back = std::move(back)]() { back(t.grad(id)); });
}

/// Gradient buffer of an input, or nullptr when it takes no gradient.
inline Matrix* sink(Tape& t, std::size_t id) { return t.requires_grad(id) ? &t.grad(id) : nullptr; }

}  // namespace detail

inline Var add(Var a, Var b) {
  detail::check(a.value().same_shape(b.value()), "add: shape mismatch");
  Matrix out = a.value();
  auto o = out.flat();
  auto y = b.value().flat();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += y[i];
  Tape& t = *a.tape;
  return detail::record(t, std::move(out), detail::any_grad({a, b}), [&t, ia = a.id, ib = b.id](const Matrix& g) {
    for (std::size_t id : {ia, ib}) {
      if (Matrix* d = detail::sink(t, id)) {
        auto df = d->flat();
        auto gf = g.flat();
        for (std::size_t i = 0; i < df.size(); ++i) df[i] += gf[i];
      }
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::check(a.value().same_shape(b.value()), "sub: shape mismatch");
  Matrix out = a.value();
  auto o = out.flat();
  auto y = b.value().flat();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= y[i];
  Tape& t = *a.tape;
  return detail::record(t, std::move(out), detail::any_grad({a, b}), [&t, ia = a.id, ib = b.id](const Matrix& g) {
    auto gf = g.flat();
    if (Matrix* d = detail::sink(t, ia)) {
      auto df = d->flat();
      for (std::size_t i = 0; i < df.size(); ++i) df[i] += gf[i];
    }
    if (Matrix* d = detail::sink(t, ib)) {
      auto df = d->flat();
      for (std::size_t i = 0; i < df.size(); ++i) df[i] -= gf[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Matrix out = a.value();
  for (double& v : out.flat()) v *= s;
  Tape& t = *a.tape;
  return detail::record(t, std::move(out), detail::any_grad({a}), [&t, ia = a.id, s](const Matrix& g) {
    auto df = t.grad(ia).flat();
    auto gf = g.flat();
    for (std::size_t i = 0; i < df.size(); ++i) df[i] += s * gf[i];
  });
}

/// (m x k) . (k x n)
inline Var matmul(Var a, Var b) {
  const Matrix& x = a.value();
  const Matrix& y = b.value();
  detail::check(x.cols() == y.rows(), "matmul: inner dimension mismatch");
  const std::size_t m = x.rows(), k = x.cols(), n = y.cols();
  Matrix out(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x(i, p);
      for (std::size_t j = 0; j < n; ++j) out(i, j) += xv * y(p, j);
    }
  Tape& t = *a.tape;
  return detail::record(t, std::move(out), detail::any_grad({a, b}),
                        [&t, ia = a.id, ib = b.id, m, k, n](const Matrix& g) {
                          const Matrix& x = t.value(ia);
                          const Matrix& y = t.value(ib);
                          if (Matrix* dx = detail::sink(t, ia)) {
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t p = 0; p < k; ++p) {
                                double s = 0.0;
                                for (std::size_t j = 0; j < n; ++j) s += g(i, j) * y(p, j);
                                (*dx)(i, p) += s;
                              }
                          }
                          if (Matrix* dy = detail::sink(t, ib)) {
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t p = 0; p < k; ++p) {
                                const double xv = x(i, p);
                                for (std::size_t j = 0; j < n; ++j) (*dy)(p, j) += xv * g(i, j);
                              }
                          }
                        });
}

/// (m x k) . (n x k)^T; with b a weight matrix (out x in) this is a linear layer.
inline Var matmul_nt(Var a, Var b) {
  const Matrix& x = a.value();
  const Matrix& y = b.value();
  detail::check(x.cols() == y.cols(), "matmul_nt: inner dimension mismatch");
  const std::size_t m = x.rows(), k = x.cols(), n = y.rows();
  Matrix out(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += x(i, p) * y(j, p);
      out(i, j) = s;
    }
  Tape& t = *a.tape;
  return detail::record(t, std::move(out), detail::any_grad({a, b}),
                        [&t, ia = a.id, ib = b.id, m, k, n](const Matrix& g) {
                          const Matrix& x = t.value(ia);
                          const Matrix& y = t.value(ib);
                          if (Matrix* dx = detail::sink(t, ia)) {
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j) {
                                const double gv = g(i, j);
                                for (std::size_t p = 0; p < k; ++p) (*dx)(i, p) += gv * y(j, p);
                              }
                          }
                          if (Matrix* dy = detail::sink(t, ib)) {
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j) {
                                const double gv = g(i, j);
                                for (std::size_t p = 0; p < k; ++p) (*dy)(j, p) += gv * x(i, p);
                              }
                          }
                        });
}

/// Adds a (1 x n) row to every row of x.
inline Var add_row(Var x, Var b) {
  const Matrix& xv = x.value();
  const Matrix& bv = b.value();
  detail::check(bv.rows() == 1 && bv.cols() == xv.cols(), "add_row: bias shape mismatch");
  Matrix out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv(0, c);
  Tape& t = *x.tape;
  return detail::record(t, std::move(out), detail::any_grad({x, b}), [&t, ix = x.id, ib = b.id](const Matrix& g) {
    if (Matrix* dx = detail::sink(t, ix)) {
      auto df = dx->flat();
      auto gf = g.flat();
      for (std::size_t i = 0; i < df.size(); ++i) df[i] += gf[i];
    }
    if (Matrix* db = detail::sink(t, ib)) {
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) (*db)(0, c) += g(r, c);
    }
  });
}

/// Row-wise RMS normalization with a learned (1 x n) gain.
inline Var rmsnorm(Var x, Var gain, double eps = 1e-6) {
  const Matrix& xv = x.value();
  const Matrix& gv = gain.value();
  detail::check(gv.rows() == 1 && gv.cols() == xv.cols(), "rmsnorm: gain shape mismatch");
  const std::size_t n = xv.cols();
  Matrix out(xv.rows(), n);
  std::vector<double> inv_rms(xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double ms = 0.0;
    for (double v : xv.row(r)) ms += v * v;
    inv_rms[r] = 1.0 / std::sqrt(ms / static_cast<double>(n) + eps);
    for (std::size_t c = 0; c < n; ++c) out(r, c) = xv(r, c) * inv_rms[r] * gv(0, c);
  }
  Tape& t = *x.tape;
  return detail::record(
      t, std::move(out), detail::any_grad({x, gain}),
      [&t, ix = x.id, ig = gain.id, inv_rms = std::move(inv_rms), n](const Matrix& g) {
        const Matrix& xv = t.value(ix);
        const Matrix& gv = t.value(ig);
        Matrix* dx = detail::sink(t, ix);
        Matrix* dg = detail::sink(t, ig);
        for (std::size_t r = 0; r < xv.rows(); ++r) {
          const double ir = inv_rms[r];
          if (dg) {
            for (std::size_t c = 0; c < n; ++c) (*dg)(0, c) += g(r, c) * xv(r, c) * ir;
          }
          if (dx) {
            // y = x * ir * gain; d/dx = ir * (u - xhat * mean(u * xhat)) with u = g * gain
            double dot = 0.0;
            for (std::size_t c = 0; c < n; ++c) dot += g(r, c) * gv(0, c) * xv(r, c) * ir;
            dot /= static_cast<double>(n);
            for (std::size_t c = 0; c < n; ++c) {
              (*dx)(r, c) += ir * (g(r, c) * gv(0, c) - xv(r, c) * ir * dot);
            }
          }
        }
      });
}

namespace detail {

template <class Fwd, class Deriv>
Var elementwise(Var x, Fwd f, Deriv df) {
  Matrix out = x.value();
  for (double& v : out.flat()) v = f(v);
  Tape& t = *x.tape;
  return record(t, std::move(out), any_grad({x}), [&t, ix = x.id, df](const Matrix& g) {
    auto d = t.grad(ix).flat();
    auto xv = t.value(ix).flat();
    auto gf = g.flat();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += gf[i] * df(xv[i]);
  });
}

}  // namespace detail

/// tanh approximation of GELU.
inline Var gelu(Var x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double c = 0.044715;
  return detail::elementwise(
      x, [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v))); },
      [](double v) {
        const double th = std::tanh(k * (v + c * v * v * v));
        return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * k * (1.0 + 3.0 * c * v * v);
      });
}

inline Var silu(Var x) {
  return detail::elementwise(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

inline Var softmax_rows(Var x) {
  Matrix out = x.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    double mx = -INFINITY;
    for (double v : row) mx = std::max(mx, v);
    double s = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      s += v;
    }
    for (double& v : row) v /= s;
  }
  Tape& t = *x.tape;
  const std::size_t self = t.size();
  return detail::record(t, std::move(out), detail::any_grad({x}), [&t, ix = x.id, self](const Matrix& g) {
    const Matrix& y = t.value(self);
    Matrix& dx = t.grad(ix);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) dx(r, c) += y(r, c) * (g(r, c) - dot);
    }
  });
}

/// Rotary embedding of every head block; coordinates are constants.
inline Var rope(Var x, std::span<const Coord3D> coords, const RopeConfig& cfg, std::size_t heads) {
  Matrix out = x.value();
  rotate_heads(out, coords, cfg, heads, 1.0);
  Tape& t = *x.tape;
  return detail::record(t, std::move(out), detail::any_grad({x}),
                        [&t, ix = x.id, coords = std::vector<Coord3D>(coords.begin(), coords.end()), cfg,
                         heads](const Matrix& g) {
                          // rotations are orthogonal: the adjoint is the inverse rotation
                          Matrix back = g;
                          rotate_heads(back, coords, cfg, heads, -1.0);
                          auto d = t.grad(ix).flat();
                          auto b = back.flat();
                          for (std::size_t i = 0; i < d.size(); ++i) d[i] += b[i];
                        });
}

inline Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  const Matrix& xv = x.value();
  detail::check(begin <= end && end <= xv.rows(), "slice_rows: range out of bounds");
  Matrix out(end - begin, xv.cols());
  for (std::size_t r = begin; r < end; ++r)
    for (std::size_t c = 0; c < xv.cols(); ++c) out(r - begin, c) = xv(r, c);
  Tape& t = *x.tape;
  return detail::record(t, std::move(out), detail::any_grad({x}), [&t, ix = x.id, begin](const Matrix& g) {
    Matrix& d = t.grad(ix);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) d(begin + r, c) += g(r, c);
  });
}

inline Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  const Matrix& xv = x.value();
  detail::check(begin <= end && end <= xv.cols(), "slice_cols: range out of bounds");
  Matrix out(xv.rows(), end - begin);
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = begin; c < end; ++c) out(r, c - begin) = xv(r, c);
  Tape& t = *x.tape;
  return detail::record(t, std::move(out), detail::any_grad({x}), [&t, ix = x.id, begin](const Matrix& g) {
    Matrix& d = t.grad(ix);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) d(r, begin + c) += g(r, c);
  });
}

/// Stacks sequences along the row (sequence) dimension.
inline Var concat_rows(const std::vector<Var>& parts) {
  detail::check(!parts.empty(), "concat_rows: no inputs");
  Tape& t = *parts.front().tape;
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  bool needs = false;
  for (const Var& p : parts) {
    detail::check(p.cols() == cols || p.rows() == 0, "concat_rows: width mismatch");
    rows += p.rows();
    needs = needs || t.requires_grad(p.id);
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, std::size_t>> layout;  // (id, first row)
  std::size_t at = 0;
  for (const Var& p : parts) {
    const Matrix& v = p.value();
    for (std::size_t r = 0; r < v.rows(); ++r)
      for (std::size_t c = 0; c < cols; ++c) out(at + r, c) = v(r, c);
    layout.emplace_back(p.id, at);
    at += v.rows();
  }
  return detail::record(t, std::move(out), needs, [&t, layout = std::move(layout)](const Matrix& g) {
    for (const auto& [id, first] : layout) {
      Matrix* d = detail::sink(t, id);
      if (!d) continue;
      for (std::size_t r = 0; r < d->rows(); ++r)
        for (std::size_t c = 0; c < d->cols(); ++c) (*d)(r, c) += g(first + r, c);
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  detail::check(!parts.empty(), "concat_cols: no inputs");
  Tape& t = *parts.front().tape;
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  bool needs = false;
  for (const Var& p : parts) {
    detail::check(p.rows() == rows, "concat_cols: height mismatch");
    cols += p.cols();
    needs = needs || t.requires_grad(p.id);
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, std::size_t>> layout;
  std::size_t at = 0;
  for (const Var& p : parts) {
    const Matrix& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < v.cols(); ++c) out(r, at + c) = v(r, c);
    layout.emplace_back(p.id, at);
    at += v.cols();
  }
  return detail::record(t, std::move(out), needs, [&t, layout = std::move(layout)](const Matrix& g) {
    for (const auto& [id, first] : layout) {
      Matrix* d = detail::sink(t, id);
      if (!d) continue;
      for (std::size_t r = 0; r < d->rows(); ++r)
        for (std::size_t c = 0; c < d->cols(); ++c) (*d)(r, c) += g(r, first + c);
    }
  });
}

inline Var gather_rows(Var x, std::vector<std::size_t> idx) {
  const Matrix& xv = x.value();
  Matrix out(idx.size(), xv.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    detail::check(idx[i] < xv.rows(), "gather_rows: index out of bounds");
    for (std::size_t c = 0; c < xv.cols(); ++c) out(i, c) = xv(idx[i], c);
  }
  Tape& t = *x.tape;
  return detail::record(t, std::move(out), detail::any_grad({x}), [&t, ix = x.id, idx = std::move(idx)](const Matrix& g) {
    Matrix& d = t.grad(ix);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < g.cols(); ++c) d(idx[i], c) += g(i, c);
  });
}

/// Copy of base with delta row i added into row idx[i]. Rows not named in
/// idx are copied untouched, so they stay bitwise equal to base.
inline Var scatter_add_rows(Var base, const std::vector<std::size_t>& idx, Var delta) {
  const Matrix& bv = base.value();
  const Matrix& dv = delta.value();
  detail::check(dv.rows() == idx.size() && (idx.empty() || dv.cols() == bv.cols()),
                "scatter_add_rows: delta shape mismatch");
  Matrix out = bv;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    detail::check(idx[i] < bv.rows(), "scatter_add_rows: index out of bounds");
    for (std::size_t c = 0; c < bv.cols(); ++c) out(idx[i], c) += dv(i, c);
  }
  Tape& t = *base.tape;
  return detail::record(t, std::move(out), detail::any_grad({base, delta}),
                        [&t, ib = base.id, id = delta.id, idx](const Matrix& g) {
                          if (Matrix* db = detail::sink(t, ib)) {
                            auto d = db->flat();
                            auto gf = g.flat();
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += gf[i];
                          }
                          if (Matrix* dd = detail::sink(t, id)) {
                            for (std::size_t i = 0; i < idx.size(); ++i)
                              for (std::size_t c = 0; c < g.cols(); ++c) (*dd)(i, c) += g(idx[i], c);
                          }
                        });
}

/// Mean of squared differences over all elements, as a 1x1 node.
inline Var mse(Var a, Var b) {
  detail::check(a.value().same_shape(b.value()), "mse: shape mismatch");
  const auto x = a.value().flat();
  const auto y = b.value().flat();
  const double n = static_cast<double>(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  Matrix out(1, 1, x.empty() ? 0.0 : s / n);
  Tape& t = *a.tape;
  return detail::record(t, std::move(out), detail::any_grad({a, b}), [&t, ia = a.id, ib = b.id, n](const Matrix& g) {
    const auto x = t.value(ia).flat();
    const auto y = t.value(ib).flat();
    const double k = 2.0 * g(0, 0) / n;
    if (Matrix* da = detail::sink(t, ia)) {
      auto d = da->flat();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += k * (x[i] - y[i]);
    }
    if (Matrix* db = detail::sink(t, ib)) {
      auto d = db->flat();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= k * (x[i] - y[i]);
    }
  });
}

/// sum(x .* w) for a constant weight matrix w, as a 1x1 node.
inline Var weighted_sum(Var x, const Matrix& w) {
  detail::check(x.value().same_shape(w), "weighted_sum: shape mismatch");
  double s = 0.0;
  const auto xv = x.value().flat();
  const auto wv = w.flat();
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i] * wv[i];
  Tape& t = *x.tape;
  return detail::record(t, Matrix(1, 1, s), detail::any_grad({x}), [&t, ix = x.id, w](const Matrix& g) {
    auto d = t.grad(ix).flat();
    auto wv = w.flat();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g(0, 0) * wv[i];
  });
}

}  // namespace omni::ad
