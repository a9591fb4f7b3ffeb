#include "privlab/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <string>

#include "privlab/error.hpp"

namespace privlab {

namespace {

std::size_t element_count(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (element_count(shape_) != data_.size()) {
    throw DimensionError("tensor shape holds " + std::to_string(element_count(shape_)) +
                         " elements but " + std::to_string(data_.size()) + " values were given");
  }
}

std::size_t Tensor::rows() const noexcept {
  if (shape_.empty()) return 1;
  return shape_.size() == 1 ? 1 : shape_[0];
}

std::size_t Tensor::cols() const noexcept {
  if (shape_.empty()) return 1;
  if (shape_.size() == 1) return shape_[0];
  return data_.empty() ? 0 : data_.size() / shape_[0];
}

Tensor Tensor::slice_rows(std::size_t first, std::size_t count) const {
  if (first + count > rows()) throw DimensionError("row slice out of range");
  const std::size_t c = cols();
  std::vector<double> out(data_.begin() + static_cast<std::ptrdiff_t>(first * c),
                          data_.begin() + static_cast<std::ptrdiff_t>((first + count) * c));
  auto shape = shape_;
  if (shape.size() >= 2) {
    shape[0] = count;
  } else {
    shape = {count, c};
  }
  return Tensor(std::move(shape), std::move(out));
}

bool Tensor::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace privlab
