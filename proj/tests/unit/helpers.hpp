// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dprob/loss/box_ops.hpp"
#include "dprob/numerics/grad_check.hpp"
#include "dprob/numerics/ops.hpp"

#include <cstdint>
#include <random>

namespace dprob::test {

inline Matrix<double> random_matrix(Index rows, Index cols, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Matrix<double> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

/// Reduces any output to a scalar through fixed random weights, so every
/// output entry reaches the gradient with a different coefficient.
inline Var<double> project(Var<double> out, std::uint64_t seed = 99) {
  Var<double> w = out.tape().constant(random_matrix(out.rows(), out.cols(), seed));
  return sum(mul(out, w));
}

inline Box box(double cx, double cy, double w, double h) { return Box(cx, cy, w, h); }

}  // namespace dprob::test
