// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dprob/numerics/tape.hpp"

#include <utility>
#include <vector>

namespace dprob {

struct Assignment {
  /// (row, column) pairs sorted by row; size min(rows, cols).
  std::vector<std::pair<Index, Index>> pairs;
  double total_cost = 0;
};

/// Minimum-cost bipartite assignment on a rectangular cost matrix (shortest
/// augmenting path with potentials, O(k^2 n)). When several assignments are
/// optimal the lexicographically smallest (row, column) pair list wins.
/// Throws std::domain_error on a non-finite entry.
Assignment hungarian_match(const Matrix<double>& cost);

}  // namespace dprob
