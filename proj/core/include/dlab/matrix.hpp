// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace dlab {

// Dense row-major matrix of doubles. Kept deliberately plain: the numeric
// kernels in net.cpp index the flat buffer directly.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  double* row(std::size_t r) { return data.data() + r * cols; }
  const double* row(std::size_t r) const { return data.data() + r * cols; }

  std::span<const double> row_span(std::size_t r) const { return {row(r), cols}; }
  std::span<double> row_span(std::size_t r) { return {row(r), cols}; }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  bool operator==(const Matrix& other) const = default;
};

}  // namespace dlab
