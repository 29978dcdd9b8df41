// SPDX-License-Identifier: Apache-2.0
#include "dprob/loss/hungarian.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dprob {

namespace {

struct WideSolution {
  std::vector<Index> row_to_col;
  /// True when every unassigned edge has positive reduced cost, which makes
  /// the optimum unique (column potentials are <= 0 and 0 on free columns).
  bool unique = false;
};

// Rows <= cols.
WideSolution solve_wide(const Matrix<double>& a) {
  const Index n = a.rows();
  const Index m = a.cols();
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; column 0 is the virtual source.
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(m + 1), 0.0);
  std::vector<Index> p(static_cast<std::size_t>(m + 1), 0), way(static_cast<std::size_t>(m + 1), 0);
  for (Index i = 1; i <= n; ++i) {
    p[0] = i;
    Index j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m + 1), inf);
    std::vector<char> used(static_cast<std::size_t>(m + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const Index i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      Index j1 = 0;
      for (Index j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = a(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (Index j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const Index j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  WideSolution out;
  out.row_to_col.assign(static_cast<std::size_t>(n), -1);
  for (Index j = 1; j <= m; ++j)
    if (p[static_cast<std::size_t>(j)] != 0) out.row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  const double tol = 1e-9 * std::max(1.0, a.cwiseAbs().maxCoeff());
  out.unique = true;
  for (Index i = 0; i < n && out.unique; ++i)
    for (Index j = 0; j < m; ++j) {
      if (out.row_to_col[static_cast<std::size_t>(i)] == j) continue;
      if (a(i, j) - u[static_cast<std::size_t>(i + 1)] - v[static_cast<std::size_t>(j + 1)] <= tol) {
        out.unique = false;
        break;
      }
    }
  return out;
}

struct Solved {
  std::vector<std::pair<Index, Index>> pairs;
  double cost = 0;
  bool unique = false;
};

Solved solve(const Matrix<double>& cost) {
  Solved s;
  if (cost.rows() == 0 || cost.cols() == 0) {
    s.unique = true;
    return s;
  }
  const bool transposed = cost.rows() > cost.cols();
  const Matrix<double> wide = transposed ? Matrix<double>(cost.transpose()) : cost;
  WideSolution w = solve_wide(wide);
  for (Index i = 0; i < static_cast<Index>(w.row_to_col.size()); ++i) {
    const Index j = w.row_to_col[static_cast<std::size_t>(i)];
    if (transposed)
      s.pairs.emplace_back(j, i);
    else
      s.pairs.emplace_back(i, j);
  }
  std::sort(s.pairs.begin(), s.pairs.end());
  for (const auto& [r, c] : s.pairs) s.cost += cost(r, c);
  s.unique = w.unique;
  return s;
}

// Optimal cost of assigning every remaining pair using rows > after_row and
// the columns not in `used`; infinity when too few rows remain.
double remaining_cost(const Matrix<double>& cost, Index after_row, const std::vector<char>& used, Index needed) {
  if (needed == 0) return 0.0;
  std::vector<Index> cols;
  for (Index j = 0; j < cost.cols(); ++j)
    if (!used[static_cast<std::size_t>(j)]) cols.push_back(j);
  const Index rows = cost.rows() - after_row - 1;
  if (rows < needed || static_cast<Index>(cols.size()) < needed) return std::numeric_limits<double>::infinity();
  Matrix<double> sub(rows, static_cast<Index>(cols.size()));
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < sub.cols(); ++j) sub(i, j) = cost(after_row + 1 + i, cols[static_cast<std::size_t>(j)]);
  Solved s = solve(sub);
  if (static_cast<Index>(s.pairs.size()) != needed) return std::numeric_limits<double>::infinity();
  return s.cost;
}

// Among optimal assignments, picks the lexicographically smallest sorted pair
// list by fixing pairs one at a time and re-solving the remainder.
std::vector<std::pair<Index, Index>> lexicographic_optimum(const Matrix<double>& cost, double optimum, Index k) {
  const double tol = 1e-9 * std::max(1.0, std::abs(optimum));
  std::vector<std::pair<Index, Index>> fixed;
  std::vector<char> used(static_cast<std::size_t>(cost.cols()), 0);
  double fixed_cost = 0;
  Index prev_row = -1;
  while (static_cast<Index>(fixed.size()) < k) {
    bool found = false;
    for (Index r = prev_row + 1; r < cost.rows() && !found; ++r) {
      for (Index c = 0; c < cost.cols() && !found; ++c) {
        if (used[static_cast<std::size_t>(c)]) continue;
        used[static_cast<std::size_t>(c)] = 1;
        const Index needed = k - static_cast<Index>(fixed.size()) - 1;
        const double total = fixed_cost + cost(r, c) + remaining_cost(cost, r, used, needed);
        if (total <= optimum + tol) {
          fixed.emplace_back(r, c);
          fixed_cost += cost(r, c);
          prev_row = r;
          found = true;
        } else {
          used[static_cast<std::size_t>(c)] = 0;
        }
      }
    }
    if (!found) throw std::logic_error("hungarian_match: lexicographic refinement lost the optimum");
  }
  return fixed;
}

}  // namespace

Assignment hungarian_match(const Matrix<double>& cost) {
  if (!cost.allFinite()) throw std::domain_error("hungarian_match: non-finite cost entry");
  Assignment result;
  Solved s = solve(cost);
  result.pairs = s.unique ? std::move(s.pairs)
                          : lexicographic_optimum(cost, s.cost, static_cast<Index>(s.pairs.size()));
  for (const auto& [r, c] : result.pairs) result.total_cost += cost(r, c);
  return result;
}

}  // namespace dprob
