// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives over Tape/Var. Every op records its output value and
// a closure that pushes the output gradient back to its inputs. Ops only touch
// input gradients when the input needs one.
#pragma once

#include "dprob/numerics/tape.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

namespace dprob {

namespace detail {

template <typename T>
bool any_needs_grad(std::initializer_list<Var<T>> vars) {
  for (const auto& v : vars)
    if (v.needs_grad()) return true;
  return false;
}

inline void require(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// A * B
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix<T> out = a.value() * b.value();
  return a.tape().push(std::move(out), detail::any_needs_grad({a, b}), [a, b](Tape<T>& t, Index self) {
    const Matrix<T>& g = t.grad(self);
    if (a.needs_grad()) t.grad(a.id()).noalias() += g * b.value().transpose();
    if (b.needs_grad()) t.grad(b.id()).noalias() += a.value().transpose() * g;
  });
}

/// A * B^T
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  detail::require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
  Matrix<T> out = a.value() * b.value().transpose();
  return a.tape().push(std::move(out), detail::any_needs_grad({a, b}), [a, b](Tape<T>& t, Index self) {
    const Matrix<T>& g = t.grad(self);
    if (a.needs_grad()) t.grad(a.id()).noalias() += g * b.value();
    if (b.needs_grad()) t.grad(b.id()).noalias() += g.transpose() * a.value();
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  Matrix<T> out = a.value().transpose();
  return a.tape().push(std::move(out), a.needs_grad(), [a](Tape<T>& t, Index self) {
    t.grad(a.id()) += t.grad(self).transpose();
  });
}

// ---------------------------------------------------------------------------
// Elementwise binary

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  Matrix<T> out = a.value() + b.value();
  return a.tape().push(std::move(out), detail::any_needs_grad({a, b}), [a, b](Tape<T>& t, Index self) {
    const Matrix<T>& g = t.grad(self);
    if (a.needs_grad()) t.grad(a.id()) += g;
    if (b.needs_grad()) t.grad(b.id()) += g;
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  Matrix<T> out = a.value() - b.value();
  return a.tape().push(std::move(out), detail::any_needs_grad({a, b}), [a, b](Tape<T>& t, Index self) {
    const Matrix<T>& g = t.grad(self);
    if (a.needs_grad()) t.grad(a.id()) += g;
    if (b.needs_grad()) t.grad(b.id()) -= g;
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  Matrix<T> out = a.value().cwiseProduct(b.value());
  return a.tape().push(std::move(out), detail::any_needs_grad({a, b}), [a, b](Tape<T>& t, Index self) {
    const Matrix<T>& g = t.grad(self);
    if (a.needs_grad()) t.grad(a.id()) += g.cwiseProduct(b.value());
    if (b.needs_grad()) t.grad(b.id()) += g.cwiseProduct(a.value());
  });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "div: shape mismatch");
  Matrix<T> out = a.value().cwiseQuotient(b.value());
  return a.tape().push(std::move(out), detail::any_needs_grad({a, b}), [a, b](Tape<T>& t, Index self) {
    const Matrix<T>& g = t.grad(self);
    const Matrix<T>& y = t.value(self);
    if (a.needs_grad()) t.grad(a.id()) += g.cwiseQuotient(b.value());
    if (b.needs_grad()) t.grad(b.id()) -= g.cwiseProduct(y).cwiseQuotient(b.value());
  });
}

/// Elementwise max; ties route the gradient to `a`.
template <typename T>
Var<T> maximum(Var<T> a, Var<T> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "maximum: shape mismatch");
  Matrix<T> out = a.value().cwiseMax(b.value());
  return a.tape().push(std::move(out), detail::any_needs_grad({a, b}), [a, b](Tape<T>& t, Index self) {
    const Matrix<T>& g = t.grad(self);
    const auto pick_a = (a.value().array() >= b.value().array());
    if (a.needs_grad()) t.grad(a.id()).array() += pick_a.select(g.array(), T(0));
    if (b.needs_grad()) t.grad(b.id()).array() += pick_a.select(T(0), g.array());
  });
}

/// Elementwise min; ties route the gradient to `a`.
template <typename T>
Var<T> minimum(Var<T> a, Var<T> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "minimum: shape mismatch");
  Matrix<T> out = a.value().cwiseMin(b.value());
  return a.tape().push(std::move(out), detail::any_needs_grad({a, b}), [a, b](Tape<T>& t, Index self) {
    const Matrix<T>& g = t.grad(self);
    const auto pick_a = (a.value().array() <= b.value().array());
    if (a.needs_grad()) t.grad(a.id()).array() += pick_a.select(g.array(), T(0));
    if (b.needs_grad()) t.grad(b.id()).array() += pick_a.select(T(0), g.array());
  });
}

/// a + row, with `row` (1 x c) broadcast over the rows of `a`.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  detail::require(row.rows() == 1 && row.cols() == a.cols(), "add_row: row must be 1 x cols(a)");
  Matrix<T> out = a.value().rowwise() + row.value().row(0);
  return a.tape().push(std::move(out), detail::any_needs_grad({a, row}), [a, row](Tape<T>& t, Index self) {
    const Matrix<T>& g = t.grad(self);
    if (a.needs_grad()) t.grad(a.id()) += g;
    if (row.needs_grad()) t.grad(row.id()) += g.colwise().sum();
  });
}

/// a .* col, with `col` (n x 1) broadcast over the columns of `a`.
template <typename T>
Var<T> mul_col(Var<T> a, Var<T> col) {
  detail::require(col.cols() == 1 && col.rows() == a.rows(), "mul_col: col must be rows(a) x 1");
  Matrix<T> out = a.value().array().colwise() * col.value().col(0).array();
  return a.tape().push(std::move(out), detail::any_needs_grad({a, col}), [a, col](Tape<T>& t, Index self) {
    const Matrix<T>& g = t.grad(self);
    if (a.needs_grad()) t.grad(a.id()).array() += g.array().colwise() * col.value().col(0).array();
    if (col.needs_grad()) t.grad(col.id()) += g.cwiseProduct(a.value()).rowwise().sum();
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Matrix<T> out = a.value() * s;
  return a.tape().push(std::move(out), a.needs_grad(), [a, s](Tape<T>& t, Index self) {
    t.grad(a.id()) += t.grad(self) * s;
  });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
  Matrix<T> out = a.value().array() + s;
  return a.tape().push(std::move(out), a.needs_grad(), [a](Tape<T>& t, Index self) {
    t.grad(a.id()) += t.grad(self);
  });
}

// ---------------------------------------------------------------------------
// Elementwise unary

template <typename T>
Var<T> exp(Var<T> a) {
  Matrix<T> out = a.value().array().exp();
  return a.tape().push(std::move(out), a.needs_grad(), [a](Tape<T>& t, Index self) {
    t.grad(a.id()) += t.grad(self).cwiseProduct(t.value(self));
  });
}

template <typename T>
Var<T> log(Var<T> a) {
  Matrix<T> out = a.value().array().log();
  return a.tape().push(std::move(out), a.needs_grad(), [a](Tape<T>& t, Index self) {
    t.grad(a.id()) += t.grad(self).cwiseQuotient(a.value());
  });
}

template <typename T>
Matrix<T> sigmoid_value(const Matrix<T>& x) {
  return x.unaryExpr([](T v) {
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Matrix<T> out = sigmoid_value(a.value());
  return a.tape().push(std::move(out), a.needs_grad(), [a](Tape<T>& t, Index self) {
    const Matrix<T>& y = t.value(self);
    t.grad(a.id()).array() += t.grad(self).array() * y.array() * (T(1) - y.array());
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Matrix<T> out = a.value().cwiseMax(T(0));
  return a.tape().push(std::move(out), a.needs_grad(), [a](Tape<T>& t, Index self) {
    t.grad(a.id()).array() += (a.value().array() > T(0)).select(t.grad(self).array(), T(0));
  });
}

/// |a|; subgradient 0 at 0.
template <typename T>
Var<T> abs(Var<T> a) {
  Matrix<T> out = a.value().cwiseAbs();
  return a.tape().push(std::move(out), a.needs_grad(), [a](Tape<T>& t, Index self) {
    t.grad(a.id()).array() += t.grad(self).array() * a.value().array().sign();
  });
}

/// Logit of `a` after clamping into [eps, 1 - eps]; clamped entries get zero gradient.
template <typename T>
Var<T> inverse_sigmoid(Var<T> a, T eps = T(1e-6)) {
  const Matrix<T> x = a.value().cwiseMax(eps).cwiseMin(T(1) - eps);
  Matrix<T> out = (x.array() / (T(1) - x.array())).log();
  return a.tape().push(std::move(out), a.needs_grad(), [a, x, eps](Tape<T>& t, Index self) {
    const auto inside = (a.value().array() > eps) && (a.value().array() < T(1) - eps);
    const auto d = T(1) / (x.array() * (T(1) - x.array()));
    t.grad(a.id()).array() += inside.select(t.grad(self).array() * d, T(0));
  });
}

/// Identity forward; blocks gradient.
template <typename T>
Var<T> detach(Var<T> a) {
  return a.tape().constant(a.tape().detached_value(a.value()));
}

// ---------------------------------------------------------------------------
// Reductions and normalization

template <typename T>
Var<T> sum(Var<T> a) {
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape().push(std::move(out), a.needs_grad(), [a](Tape<T>& t, Index self) {
    t.grad(a.id()).array() += t.grad(self)(0, 0);
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const Index n = a.size();
  return n == 0 ? scale(sum(a), T(0)) : scale(sum(a), T(1) / static_cast<T>(n));
}

/// Per-row sums, n x 1.
template <typename T>
Var<T> row_sum(Var<T> a) {
  Matrix<T> out = a.value().rowwise().sum();
  return a.tape().push(std::move(out), a.needs_grad(), [a](Tape<T>& t, Index self) {
    t.grad(a.id()).colwise() += t.grad(self).col(0);
  });
}

template <typename T>
Var<T> softmax_rows(Var<T> a) {
  Matrix<T> out = a.value();
  for (Index r = 0; r < out.rows(); ++r) {
    const T m = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return a.tape().push(std::move(out), a.needs_grad(), [a](Tape<T>& t, Index self) {
    const Matrix<T>& y = t.value(self);
    const Matrix<T>& g = t.grad(self);
    const Vector<T> dot = g.cwiseProduct(y).rowwise().sum();
    t.grad(a.id()).array() += y.array() * (g.colwise() - dot).array();
  });
}

/// Row-wise layer normalization with affine gain/bias (1 x c each).
template <typename T>
Var<T> layer_norm(Var<T> a, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  const Index c = a.cols();
  detail::require(gain.cols() == c && bias.cols() == c, "layer_norm: affine width mismatch");
  const Vector<T> mu = a.value().rowwise().mean();
  Matrix<T> xhat = a.value().colwise() - mu;
  Vector<T> inv_std(a.rows());
  for (Index r = 0; r < a.rows(); ++r) {
    const T var = xhat.row(r).squaredNorm() / static_cast<T>(c);
    inv_std(r) = T(1) / std::sqrt(var + eps);
    xhat.row(r) *= inv_std(r);
  }
  Matrix<T> out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  return a.tape().push(std::move(out), detail::any_needs_grad({a, gain, bias}),
                       [a, gain, bias, xhat, inv_std](Tape<T>& t, Index self) {
                         const Matrix<T>& g = t.grad(self);
                         if (gain.needs_grad()) t.grad(gain.id()) += g.cwiseProduct(xhat).colwise().sum();
                         if (bias.needs_grad()) t.grad(bias.id()) += g.colwise().sum();
                         if (a.needs_grad()) {
                           const Matrix<T> dxhat = g.array().rowwise() * gain.value().row(0).array();
                           const Vector<T> m1 = dxhat.rowwise().mean();
                           const Vector<T> m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
                           Matrix<T> dx = (dxhat.colwise() - m1) - (xhat.array().colwise() * m2.array()).matrix();
                           dx.array().colwise() *= inv_std.array();
                           t.grad(a.id()) += dx;
                         }
                       });
}

// ---------------------------------------------------------------------------
// Shape plumbing

template <typename T>
Var<T> slice_cols(Var<T> a, Index start, Index count) {
  detail::require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: out of range");
  Matrix<T> out = a.value().middleCols(start, count);
  return a.tape().push(std::move(out), a.needs_grad(), [a, start, count](Tape<T>& t, Index self) {
    t.grad(a.id()).middleCols(start, count) += t.grad(self);
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, Index start, Index count) {
  detail::require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: out of range");
  Matrix<T> out = a.value().middleRows(start, count);
  return a.tape().push(std::move(out), a.needs_grad(), [a, start, count](Tape<T>& t, Index self) {
    t.grad(a.id()).middleRows(start, count) += t.grad(self);
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  Index cols = 0;
  bool needs = false;
  for (const auto& p : parts) {
    detail::require(p.rows() == parts.front().rows(), "concat_cols: row mismatch");
    cols += p.cols();
    needs = needs || p.needs_grad();
  }
  Matrix<T> out(parts.front().rows(), cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return parts.front().tape().push(std::move(out), needs, [parts](Tape<T>& t, Index self) {
    Index at = 0;
    for (const auto& p : parts) {
      if (p.needs_grad()) t.grad(p.id()) += t.grad(self).middleCols(at, p.cols());
      at += p.cols();
    }
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  Index rows = 0;
  bool needs = false;
  for (const auto& p : parts) {
    detail::require(p.cols() == parts.front().cols(), "concat_rows: column mismatch");
    rows += p.rows();
    needs = needs || p.needs_grad();
  }
  Matrix<T> out(rows, parts.front().cols());
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return parts.front().tape().push(std::move(out), needs, [parts](Tape<T>& t, Index self) {
    Index at = 0;
    for (const auto& p : parts) {
      if (p.needs_grad()) t.grad(p.id()) += t.grad(self).middleRows(at, p.rows());
      at += p.rows();
    }
  });
}

/// Row gather (index select). Indices may repeat; gradients accumulate.
template <typename T>
Var<T> gather_rows(Var<T> a, std::vector<Index> idx) {
  Matrix<T> out(static_cast<Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    detail::require(idx[i] >= 0 && idx[i] < a.rows(), "gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(idx[i]);
  }
  return a.tape().push(std::move(out), a.needs_grad(), [a, idx = std::move(idx)](Tape<T>& t, Index self) {
    const Matrix<T>& g = t.grad(self);
    Matrix<T>& ga = t.grad(a.id());
    for (std::size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Index>(i));
  });
}

/// Column gather.
template <typename T>
Var<T> select_cols(Var<T> a, std::vector<Index> idx) {
  Matrix<T> out(a.rows(), static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    detail::require(idx[i] >= 0 && idx[i] < a.cols(), "select_cols: index out of range");
    out.col(static_cast<Index>(i)) = a.value().col(idx[i]);
  }
  return a.tape().push(std::move(out), a.needs_grad(), [a, idx = std::move(idx)](Tape<T>& t, Index self) {
    const Matrix<T>& g = t.grad(self);
    Matrix<T>& ga = t.grad(a.id());
    for (std::size_t i = 0; i < idx.size(); ++i) ga.col(idx[i]) += g.col(static_cast<Index>(i));
  });
}

/// Row-major reinterpretation to rows x cols.
template <typename T>
Var<T> reshape(Var<T> a, Index rows, Index cols) {
  detail::require(rows * cols == a.size(), "reshape: element count mismatch");
  Matrix<T> out = Eigen::Map<const Matrix<T>>(a.value().data(), rows, cols);
  return a.tape().push(std::move(out), a.needs_grad(), [a](Tape<T>& t, Index self) {
    const Matrix<T>& g = t.grad(self);
    t.grad(a.id()) += Eigen::Map<const Matrix<T>>(g.data(), a.rows(), a.cols());
  });
}

// ---------------------------------------------------------------------------
// Convolution

/// 2-D convolution on an (H*W) x Cin image (row index y*W + x). Weight rows are
/// ordered (ky, kx, cin); weight is (k*k*Cin) x Cout, bias 1 x Cout.
template <typename T>
Var<T> conv2d(Var<T> x, Index height, Index width, Var<T> weight, Var<T> bias, Index kernel, Index stride,
              Index pad) {
  const Index cin = x.cols();
  detail::require(x.rows() == height * width, "conv2d: input rows must equal H*W");
  detail::require(weight.rows() == kernel * kernel * cin, "conv2d: weight rows must equal k*k*Cin");
  detail::require(bias.rows() == 1 && bias.cols() == weight.cols(), "conv2d: bias must be 1 x Cout");
  const Index out_h = (height + 2 * pad - kernel) / stride + 1;
  const Index out_w = (width + 2 * pad - kernel) / stride + 1;
  auto cols = std::make_shared<Matrix<T>>(Matrix<T>::Zero(out_h * out_w, kernel * kernel * cin));
  const Matrix<T>& xv = x.value();
  for (Index oy = 0; oy < out_h; ++oy)
    for (Index ox = 0; ox < out_w; ++ox)
      for (Index ky = 0; ky < kernel; ++ky) {
        const Index iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= height) continue;
        for (Index kx = 0; kx < kernel; ++kx) {
          const Index ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= width) continue;
          cols->row(oy * out_w + ox).segment((ky * kernel + kx) * cin, cin) = xv.row(iy * width + ix);
        }
      }
  Matrix<T> out = (*cols) * weight.value();
  out.rowwise() += bias.value().row(0);
  return x.tape().push(
      std::move(out), detail::any_needs_grad({x, weight, bias}),
      [=](Tape<T>& t, Index self) {
        const Matrix<T>& g = t.grad(self);
        if (weight.needs_grad()) t.grad(weight.id()).noalias() += cols->transpose() * g;
        if (bias.needs_grad()) t.grad(bias.id()) += g.colwise().sum();
        if (!x.needs_grad()) return;
        const Matrix<T> dcols = g * weight.value().transpose();
        Matrix<T>& gx = t.grad(x.id());
        for (Index oy = 0; oy < out_h; ++oy)
          for (Index ox = 0; ox < out_w; ++ox)
            for (Index ky = 0; ky < kernel; ++ky) {
              const Index iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= height) continue;
              for (Index kx = 0; kx < kernel; ++kx) {
                const Index ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= width) continue;
                gx.row(iy * width + ix) += dcols.row(oy * out_w + ox).segment((ky * kernel + kx) * cin, cin);
              }
            }
      });
}

// ---------------------------------------------------------------------------
// Bilinear sampling

namespace detail {

/// The four neighbours of a continuous pixel position with their blend weights.
/// Neighbours outside the grid are flagged invalid and contribute zero.
template <typename T>
struct BilinearTaps {
  Index index[4];
  T weight[4];
  bool valid[4];
  // d(weight)/dx and d(weight)/dy for each tap.
  T dwx[4];
  T dwy[4];
};

template <typename T>
BilinearTaps<T> bilinear_taps(T x, T y, Index height, Index width) {
  BilinearTaps<T> taps{};
  const T fx0 = std::floor(x);
  const T fy0 = std::floor(y);
  const Index x0 = static_cast<Index>(fx0);
  const Index y0 = static_cast<Index>(fy0);
  const T fx = x - fx0;
  const T fy = y - fy0;
  const Index xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const Index ys[4] = {y0, y0, y0 + 1, y0 + 1};
  const T w[4] = {(T(1) - fx) * (T(1) - fy), fx * (T(1) - fy), (T(1) - fx) * fy, fx * fy};
  const T wx[4] = {-(T(1) - fy), (T(1) - fy), -fy, fy};
  const T wy[4] = {-(T(1) - fx), -fx, (T(1) - fx), fx};
  for (int k = 0; k < 4; ++k) {
    taps.valid[k] = xs[k] >= 0 && xs[k] < width && ys[k] >= 0 && ys[k] < height;
    taps.index[k] = taps.valid[k] ? ys[k] * width + xs[k] : 0;
    taps.weight[k] = w[k];
    taps.dwx[k] = wx[k];
    taps.dwy[k] = wy[k];
  }
  return taps;
}

}  // namespace detail

/// Samples an (H*W) x d feature map at n continuous (x, y) pixel positions
/// (x is the column, y the row; integer positions hit grid cells exactly).
/// Taps outside [0, W-1] x [0, H-1] read zero.
template <typename T>
Var<T> bilinear_sample(Var<T> feature_map, Index height, Index width, Var<T> points) {
  detail::require(feature_map.rows() == height * width && height > 0 && width > 0,
                  "bilinear_sample: feature map must be nonempty H*W x d");
  detail::require(points.cols() == 2, "bilinear_sample: points must be n x 2");
  const Matrix<T>& fm = feature_map.value();
  const Matrix<T>& pts = points.value();
  Matrix<T> out = Matrix<T>::Zero(pts.rows(), fm.cols());
  for (Index i = 0; i < pts.rows(); ++i) {
    const auto taps = detail::bilinear_taps(pts(i, 0), pts(i, 1), height, width);
    for (int k = 0; k < 4; ++k)
      if (taps.valid[k]) out.row(i) += taps.weight[k] * fm.row(taps.index[k]);
  }
  return feature_map.tape().push(
      std::move(out), detail::any_needs_grad({feature_map, points}),
      [feature_map, points, height, width](Tape<T>& t, Index self) {
        const Matrix<T>& g = t.grad(self);
        const Matrix<T>& fm = feature_map.value();
        const Matrix<T>& pts = points.value();
        for (Index i = 0; i < pts.rows(); ++i) {
          const auto taps = detail::bilinear_taps(pts(i, 0), pts(i, 1), height, width);
          T dx = 0, dy = 0;
          for (int k = 0; k < 4; ++k) {
            if (!taps.valid[k]) continue;
            if (feature_map.needs_grad()) t.grad(feature_map.id()).row(taps.index[k]) += taps.weight[k] * g.row(i);
            const T proj = g.row(i).dot(fm.row(taps.index[k]));
            dx += taps.dwx[k] * proj;
            dy += taps.dwy[k] * proj;
          }
          if (points.needs_grad()) {
            t.grad(points.id())(i, 0) += dx;
            t.grad(points.id())(i, 1) += dy;
          }
        }
      });
}

/// Deformable attention aggregation over a single-scale value map.
///
/// value:   (H*W) x d, split into `heads` column groups of width d/heads.
/// ref:     N x 4 reference boxes (cx, cy, w, h), normalized.
/// offsets: N x (heads*points*2), column ((h*points + p)*2 + {0:x, 1:y}).
/// weights: N x (heads*points), already normalized per head.
///
/// Sample location = ref.xy + offset / points * ref.wh * 0.5 (normalized), mapped
/// to pixels as loc * size - 0.5 so that a cell centre maps onto its grid point.
template <typename T>
Var<T> deformable_aggregate(Var<T> value, Index height, Index width, Index heads, Index points, Var<T> ref,
                            Var<T> offsets, Var<T> weights) {
  const Index n = ref.rows();
  const Index d = value.cols();
  detail::require(value.rows() == height * width, "deformable_aggregate: value rows must equal H*W");
  detail::require(d % heads == 0, "deformable_aggregate: d must divide by heads");
  detail::require(ref.cols() == 4, "deformable_aggregate: ref must be N x 4");
  detail::require(offsets.rows() == n && offsets.cols() == heads * points * 2, "deformable_aggregate: offsets shape");
  detail::require(weights.rows() == n && weights.cols() == heads * points, "deformable_aggregate: weights shape");
  const Index dh = d / heads;
  const T inv_points = T(1) / static_cast<T>(points);

  auto location = [=](const Matrix<T>& r, const Matrix<T>& o, Index q, Index h, Index p) {
    const Index c = (h * points + p) * 2;
    const T lx = r(q, 0) + o(q, c) * inv_points * r(q, 2) * T(0.5);
    const T ly = r(q, 1) + o(q, c + 1) * inv_points * r(q, 3) * T(0.5);
    return std::pair<T, T>{lx * static_cast<T>(width) - T(0.5), ly * static_cast<T>(height) - T(0.5)};
  };

  const Matrix<T>& v = value.value();
  const Matrix<T>& r = ref.value();
  const Matrix<T>& o = offsets.value();
  const Matrix<T>& a = weights.value();
  Matrix<T> out = Matrix<T>::Zero(n, d);
  for (Index q = 0; q < n; ++q)
    for (Index h = 0; h < heads; ++h)
      for (Index p = 0; p < points; ++p) {
        const auto [px, py] = location(r, o, q, h, p);
        const auto taps = detail::bilinear_taps(px, py, height, width);
        const T aw = a(q, h * points + p);
        for (int k = 0; k < 4; ++k)
          if (taps.valid[k]) out.row(q).segment(h * dh, dh) += (aw * taps.weight[k]) * v.row(taps.index[k]).segment(h * dh, dh);
      }

  return value.tape().push(
      std::move(out), detail::any_needs_grad({value, ref, offsets, weights}),
      [=](Tape<T>& t, Index self) {
        const Matrix<T>& g = t.grad(self);
        const Matrix<T>& v = value.value();
        const Matrix<T>& r = ref.value();
        const Matrix<T>& o = offsets.value();
        const Matrix<T>& a = weights.value();
        const bool need_loc = ref.needs_grad() || offsets.needs_grad();
        for (Index q = 0; q < n; ++q)
          for (Index h = 0; h < heads; ++h) {
            const auto gq = g.row(q).segment(h * dh, dh);
            for (Index p = 0; p < points; ++p) {
              const auto [px, py] = location(r, o, q, h, p);
              const auto taps = detail::bilinear_taps(px, py, height, width);
              const Index wi = h * points + p;
              const T aw = a(q, wi);
              T dsx = 0, dsy = 0, dw = 0;
              for (int k = 0; k < 4; ++k) {
                if (!taps.valid[k]) continue;
                const auto vk = v.row(taps.index[k]).segment(h * dh, dh);
                const T proj = gq.dot(vk);
                dw += taps.weight[k] * proj;
                dsx += taps.dwx[k] * proj;
                dsy += taps.dwy[k] * proj;
                if (value.needs_grad()) t.grad(value.id()).row(taps.index[k]).segment(h * dh, dh) += (aw * taps.weight[k]) * gq;
              }
              if (weights.needs_grad()) t.grad(weights.id())(q, wi) += dw;
              if (!need_loc) continue;
              // d out / d loc (normalized) = aw * d sample / d pixel * size
              const T dlx = aw * dsx * static_cast<T>(width);
              const T dly = aw * dsy * static_cast<T>(height);
              const Index c = wi * 2;
              if (offsets.needs_grad()) {
                t.grad(offsets.id())(q, c) += dlx * inv_points * r(q, 2) * T(0.5);
                t.grad(offsets.id())(q, c + 1) += dly * inv_points * r(q, 3) * T(0.5);
              }
              if (ref.needs_grad()) {
                Matrix<T>& gr = t.grad(ref.id());
                gr(q, 0) += dlx;
                gr(q, 1) += dly;
                gr(q, 2) += dlx * o(q, c) * inv_points * T(0.5);
                gr(q, 3) += dly * o(q, c + 1) * inv_points * T(0.5);
              }
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Fused losses

/// Sum over all entries of the sigmoid focal loss. `targets` holds 0/1 entries.
/// alpha < 0 disables the class-balance weight.
template <typename T>
Var<T> sigmoid_focal_sum(Var<T> logits, const Matrix<T>& targets, T alpha, T gamma) {
  detail::require(logits.rows() == targets.rows() && logits.cols() == targets.cols(),
                  "sigmoid_focal_sum: target shape mismatch");
  const Matrix<T>& x = logits.value();
  const Matrix<T> p = sigmoid_value(x);
  Matrix<T> grad_local(x.rows(), x.cols());
  T total = 0;
  for (Index i = 0; i < x.rows(); ++i)
    for (Index j = 0; j < x.cols(); ++j) {
      const T xi = x(i, j), ti = targets(i, j), pi = p(i, j);
      const T ce = std::max(xi, T(0)) - xi * ti + std::log1p(std::exp(-std::abs(xi)));
      const T pt = pi * ti + (T(1) - pi) * (T(1) - ti);
      const T one_m = T(1) - pt;
      const T mod = gamma == T(0) ? T(1) : std::pow(one_m, gamma);
      const T at = alpha >= T(0) ? alpha * ti + (T(1) - alpha) * (T(1) - ti) : T(1);
      total += at * ce * mod;
      T dmod = 0;
      if (gamma != T(0) && one_m > T(0)) dmod = -gamma * std::pow(one_m, gamma - T(1)) * (T(2) * ti - T(1)) * pi * (T(1) - pi);
      grad_local(i, j) = at * ((pi - ti) * mod + ce * dmod);
    }
  Matrix<T> out(1, 1);
  out(0, 0) = total;
  return logits.tape().push(std::move(out), logits.needs_grad(), [logits, grad_local](Tape<T>& t, Index self) {
    t.grad(logits.id()) += t.grad(self)(0, 0) * grad_local;
  });
}

/// Squared Mahalanobis distance of each row of `x` (m x d) to `mean` (1 x d),
/// given the lower Cholesky factor L of the (regularized) covariance. Returns m x 1.
/// Mean and factor are constants.
template <typename T>
Var<T> mahalanobis_rows(Var<T> x, const RowVector<T>& mean, const Matrix<T>& chol_lower) {
  detail::require(x.cols() == mean.cols() && chol_lower.rows() == mean.cols(), "mahalanobis_rows: dimension mismatch");
  const Matrix<T> diff_t = (x.value().rowwise() - mean).transpose();  // d x m
  auto whitened = std::make_shared<Matrix<T>>(chol_lower.template triangularView<Eigen::Lower>().solve(diff_t));
  Matrix<T> out = whitened->colwise().squaredNorm().transpose();
  return x.tape().push(std::move(out), x.needs_grad(), [x, whitened, chol_lower](Tape<T>& t, Index self) {
    // d/dx (z^T z) with z = L^{-1}(x - mu)  ->  2 L^{-T} z
    Matrix<T> back = chol_lower.template triangularView<Eigen::Lower>().transpose().solve(*whitened);  // d x m
    const Matrix<T>& g = t.grad(self);
    Matrix<T> gx = back.transpose();
    gx.array().colwise() *= T(2) * g.col(0).array();
    t.grad(x.id()) += gx;
  });
}

// ---------------------------------------------------------------------------
// Operator sugar

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) {
  return add(a, b);
}
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) {
  return sub(a, b);
}

}  // namespace dprob
