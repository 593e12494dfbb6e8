// Minimum-cost bipartite assignment of m targets to n >= m predictions.
#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdetr {

/// Dense row-major m×n cost matrix; rows are targets, columns predictions.
struct CostMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;

  CostMatrix() = default;
  CostMatrix(std::size_t m, std::size_t n, double fill = 0.0) : rows(m), cols(n), data(m * n, fill) {}
  CostMatrix(std::size_t m, std::size_t n, std::vector<double> values) : rows(m), cols(n), data(std::move(values)) {
    if (data.size() != m * n) throw std::invalid_argument("CostMatrix: value count does not match dims");
  }

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

/// target i -> prediction target_to_pred[i]; injective.
struct MatchAssignment {
  std::vector<std::size_t> target_to_pred;
  double cost = 0.0;

  std::size_t size() const { return target_to_pred.size(); }
  std::size_t operator[](std::size_t i) const { return target_to_pred[i]; }
};

/// Sum of cost(i, σ(i)) in target order.
inline double assignment_cost(const CostMatrix& cost, const std::vector<std::size_t>& sigma) {
  double total = 0.0;
  for (std::size_t i = 0; i < sigma.size(); ++i) total += cost(i, sigma[i]);
  return total;
}

namespace detail {

// Shortest augmenting path with row/column potentials, O(m²n).
// Returns row -> column.
inline std::vector<std::size_t> solve_assignment(const CostMatrix& a) {
  const std::size_t m = a.rows, n = a.cols;
  constexpr double kInf = std::numeric_limits<double>::infinity();
  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  // 1-based potentials; column 0 is the virtual source.
  std::vector<double> u(m + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> col_row(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= m; ++i) {
    col_row[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = col_row[j0];
      double delta = kInf;
      std::size_t j1 = kNone;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[col_row[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (col_row[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      col_row[j0] = col_row[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_col(m, 0);
  for (std::size_t j = 1; j <= n; ++j) {
    if (col_row[j] != 0) row_col[col_row[j] - 1] = j - 1;
  }
  return row_col;
}

inline double optimal_cost(const CostMatrix& a) {
  if (a.rows == 0) return 0.0;
  return assignment_cost(a, solve_assignment(a));
}

}  // namespace detail

/// Optimal assignment; among optimal assignments the lexicographically
/// smallest σ (compared target by target) is returned. Costs within
/// `tie_tolerance`·max(1, |cost|) of the optimum count as ties.
inline MatchAssignment hungarian(const CostMatrix& cost, double tie_tolerance = 1e-9) {
  if (cost.rows > cost.cols) {
    throw std::invalid_argument("hungarian: " + std::to_string(cost.rows) + " targets exceed " +
                                std::to_string(cost.cols) + " predictions");
  }
  for (double c : cost.data) {
    if (!std::isfinite(c)) throw std::invalid_argument("hungarian: cost matrix has a non-finite entry");
  }
  MatchAssignment out;
  if (cost.rows == 0) return out;
  const double best = detail::optimal_cost(cost);
  const double slack = tie_tolerance * std::max(1.0, std::abs(best));

  // Fix targets in order, each to the smallest column that still admits an
  // optimal completion of the remaining rows.
  std::vector<char> taken(cost.cols, 0);
  double fixed = 0.0;
  for (std::size_t i = 0; i < cost.rows; ++i) {
    const std::size_t rest_rows = cost.rows - i - 1;
    bool placed = false;
    for (std::size_t j = 0; j < cost.cols && !placed; ++j) {
      if (taken[j]) continue;
      CostMatrix sub(rest_rows, cost.cols - i - 1);
      for (std::size_t r = 0; r < rest_rows; ++r) {
        std::size_t cc = 0;
        for (std::size_t c = 0; c < cost.cols; ++c) {
          if (taken[c] || c == j) continue;
          sub(r, cc++) = cost(i + 1 + r, c);
        }
      }
      const double total = fixed + cost(i, j) + detail::optimal_cost(sub);
      if (total <= best + slack) {
        out.target_to_pred.push_back(j);
        taken[j] = 1;
        fixed += cost(i, j);
        placed = true;
      }
    }
    if (!placed) throw std::logic_error("hungarian: tie-breaking lost the optimum");
  }
  out.cost = assignment_cost(cost, out.target_to_pred);
  return out;
}

}  // namespace sdetr
