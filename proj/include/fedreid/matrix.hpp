#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedreid {

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool empty() const { return rows == 0; }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

/// Copies the listed rows of `m` into a new matrix, in order.
inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), m.cols);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto src = m.row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

/// out = x * W + b, with W stored row-major as (x.cols x out_dim) followed by b.
inline Matrix affine(const Matrix& x, std::span<const double> weights_then_bias, std::size_t out_dim) {
  const std::size_t in_dim = x.cols;
  if (weights_then_bias.size() != in_dim * out_dim + out_dim) {
    throw std::invalid_argument("affine: parameter length " + std::to_string(weights_then_bias.size()) +
                                " does not match " + std::to_string(in_dim) + "x" + std::to_string(out_dim) +
                                " plus bias");
  }
  const double* w = weights_then_bias.data();
  const double* b = w + in_dim * out_dim;
  Matrix out(x.rows, out_dim);
  for (std::size_t r = 0; r < x.rows; ++r) {
    double* o = out.data.data() + r * out_dim;
    for (std::size_t j = 0; j < out_dim; ++j) o[j] = b[j];
    for (std::size_t i = 0; i < in_dim; ++i) {
      const double xi = x(r, i);
      const double* wi = w + i * out_dim;
      for (std::size_t j = 0; j < out_dim; ++j) o[j] += xi * wi[j];
    }
  }
  return out;
}

}  // namespace fedreid
