#pragma once

#include <span>
#include <vector>

#include "actdiff/errors.hpp"

namespace actdiff {

// Dense row-major matrix of doubles. Used for per-position posteriors
// (rows = positions, cols = classes) and for model activations.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> m;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), m(static_cast<size_t>(r) * c, 0.0) {}

  double* row(int r) { return m.data() + static_cast<size_t>(r) * cols; }
  const double* row(int r) const { return m.data() + static_cast<size_t>(r) * cols; }
  std::span<const double> row_span(int r) const { return {row(r), static_cast<size_t>(cols)}; }

  double& at(int r, int c) { return m[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return m[static_cast<size_t>(r) * cols + c]; }

  bool operator==(const Matrix& o) const = default;
};

// Rows must be categorical distributions: non-negative, sum within `tol` of 1.
inline void require_row_stochastic(const Matrix& p, double tol,
                                   const char* who) {
  for (int r = 0; r < p.rows; ++r) {
    double sum = 0.0;
    for (int c = 0; c < p.cols; ++c) {
      double v = p.at(r, c);
      if (!(v >= 0.0))
        throw ModelContractError(std::string(who) + ": negative probability in row " +
                                 std::to_string(r));
      sum += v;
    }
    if (std::abs(sum - 1.0) > tol)
      throw ModelContractError(std::string(who) + ": row " + std::to_string(r) +
                               " sums to " + std::to_string(sum));
  }
}

}  // namespace actdiff
