// SPDX-License-Identifier: Apache-2.0
#include "cptlab/tensor.hpp"

#include <fmt/format.h>

#include <cstring>
#include <numeric>

#include "cptlab/error.hpp"
#include "cptlab/text.hpp"

namespace cptlab {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) { return fmt::format("[{}]", fmt::join(shape, "x")); }

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
  for (auto extent : shape) {
    if (extent == 0) throw DimensionError(fmt::format("zero extent in shape {}", shape_string(shape)));
  }
  if (shape_size(shape) != data.size()) {
    throw DimensionError(fmt::format("shape {} needs {} elements, got {}", shape_string(shape),
                                     shape_size(shape), data.size()));
  }
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const auto n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

std::size_t Tensor::row_width() const {
  return shape.size() <= 1 ? 1 : shape_size(Shape(shape.begin() + 1, shape.end()));
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

std::uint64_t tensor_hash(const Tensor& t) {
  std::uint64_t h = fnv1a64(shape_string(t.shape));
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(t.data.data()),
                                  t.data.size() * sizeof(double)),
                 h);
}

}  // namespace cptlab
