#include "effowt/assignment.hpp"

#include <limits>
#include <stdexcept>

namespace effowt {

// Hungarian algorithm with potentials, O(n^3). Internally solves min-cost on
// a square matrix padded with zeros; weights are negated.
std::vector<int64_t> max_weight_assignment(const std::vector<double>& weights, int64_t rows,
                                           int64_t cols) {
  if (rows < 0 || cols < 0 ||
      static_cast<int64_t>(weights.size()) != rows * cols) {
    throw std::invalid_argument("assignment: weight matrix size mismatch");
  }
  if (rows == 0 || cols == 0) return std::vector<int64_t>(static_cast<size_t>(rows), -1);

  int64_t n = std::max(rows, cols);
  const double kInf = std::numeric_limits<double>::infinity();
  auto cost = [&](int64_t r, int64_t c) -> double {
    if (r < rows && c < cols) return -weights[static_cast<size_t>(r * cols + c)];
    return 0.0;  // dummy row/col
  };

  // 1-indexed potentials and matching, standard formulation
  std::vector<double> u(static_cast<size_t>(n + 1), 0.0), v(static_cast<size_t>(n + 1), 0.0);
  std::vector<int64_t> p(static_cast<size_t>(n + 1), 0), way(static_cast<size_t>(n + 1), 0);
  for (int64_t i = 1; i <= n; ++i) {
    p[0] = i;
    int64_t j0 = 0;
    std::vector<double> minv(static_cast<size_t>(n + 1), kInf);
    std::vector<char> used(static_cast<size_t>(n + 1), 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      int64_t i0 = p[static_cast<size_t>(j0)], j1 = 0;
      double delta = kInf;
      for (int64_t j = 1; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        double cur = cost(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int64_t j = 0; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      int64_t j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }

  std::vector<int64_t> match(static_cast<size_t>(rows), -1);
  for (int64_t j = 1; j <= n; ++j) {
    int64_t r = p[static_cast<size_t>(j)] - 1;
    int64_t c = j - 1;
    if (r >= 0 && r < rows && c < cols) match[static_cast<size_t>(r)] = c;
  }
  return match;
}

}  // namespace effowt
