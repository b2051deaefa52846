#pragma once

#include <cstdint>
#include <vector>

namespace effowt {

/// Max-total-weight complete matching on a dense rows x cols weight matrix
/// (row-major). Matches min(rows, cols) pairs; returns the matched column per
/// row, -1 for rows left out. Deterministic for equal-weight ties.
std::vector<int64_t> max_weight_assignment(const std::vector<double>& weights, int64_t rows,
                                           int64_t cols);

}  // namespace effowt
