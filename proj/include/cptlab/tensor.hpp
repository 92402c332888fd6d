// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace cptlab {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient buffer.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::optional<std::vector<double>> grad;

  Tensor() = default;
  /// Throws DimensionError when the shape does not match the data length or
  /// has a zero extent.
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  /// Product of every extent after the first.
  std::size_t row_width() const;

  double& at(std::size_t row, std::size_t col) { return data[row * shape[1] + col]; }
  double at(std::size_t row, std::size_t col) const { return data[row * shape[1] + col]; }
};

/// Bitwise equality of shape and data; gradients are ignored.
bool bitwise_equal(const Tensor& a, const Tensor& b);
/// FNV-1a over the shape and raw data bytes.
std::uint64_t tensor_hash(const Tensor& t);

}  // namespace cptlab
