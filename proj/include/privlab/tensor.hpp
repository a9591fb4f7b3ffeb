#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace privlab {

/// Dense row-major array of doubles with an explicit shape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  /// Rows/cols of a rank-2 tensor (rank-1 tensors are treated as a single row).
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  /// Copy of rows [first, first + count) of a rank-2 tensor.
  Tensor slice_rows(std::size_t first, std::size_t count) const;

  bool all_finite() const noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

}  // namespace privlab
