#pragma once

// Reverse-mode automatic differentiation over rank-2 tensors.
//
// Every backward rule is written in terms of the same differentiable ops, so
// the gradient returned by `grad` is itself a graph and can be differentiated
// again (double backprop). Graphs are immutable once built; a Var is a cheap
// shared handle.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "privlab/tensor.hpp"

namespace privlab::ad {

class Var;

struct Node {
  Tensor value;
  std::vector<Var> inputs;
  // Receives the output node and the incoming gradient; returns one gradient per
  // input (an empty Var for inputs that do not require gradients).
  std::function<std::vector<Var>(const Var& self, const Var& grad)> backward;
  bool requires_grad = false;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<const Node> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  /// Value of a 1x1 result.
  double scalar() const;
  const Node* node() const noexcept { return node_.get(); }

 private:
  std::shared_ptr<const Node> node_;
};

/// Leaf that is never differentiated.
Var constant(Tensor value);
/// Leaf with respect to which gradients can be requested.
Var variable(Tensor value);

Var matmul(const Var& a, const Var& b);
/// op(a) * op(b) with optional transposition of either operand.
Var gemm(const Var& a, const Var& b, bool trans_a, bool trans_b);
Var transpose(const Var& a);
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);  ///< elementwise
Var operator-(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);

Var relu(const Var& a);  ///< second derivative taken as zero; subgradient 0 at the kink
Var exp(const Var& a);
Var log(const Var& a);
Var sigmoid(const Var& a);  ///< overflow-safe 1 / (1 + exp(-a))
Var reciprocal(const Var& a);
Var sqrt(const Var& a);
Var abs(const Var& a);  ///< subgradient 0 at 0

Var sum(const Var& a);          ///< 1x1
Var sum_rows(const Var& a);     ///< 1 x cols, sums over rows
Var sum_cols(const Var& a);     ///< rows x 1, sums over cols
Var broadcast_rows(const Var& row, std::size_t rows);
Var broadcast_cols(const Var& col, std::size_t cols);
Var broadcast_scalar(const Var& s, std::size_t rows, std::size_t cols);

/// rows x cols block read from a 1 x d row vector starting at `offset`.
Var slice(const Var& flat, std::size_t offset, std::size_t rows, std::size_t cols);
/// Inverse of slice: places `block` (flattened) into a zero 1 x total row vector.
Var embed(const Var& block, std::size_t offset, std::size_t total);

/// Row-wise softmax.
Var softmax(const Var& logits);
/// Mean over rows of -sum_k targets[r][k] * log softmax(logits)[r][k].
Var softmax_cross_entropy(const Var& logits, const Var& targets);

/// Gradients of a 1x1 `output` with respect to each of `wrt`. The result is a
/// differentiable graph; leaves not reached get a zero constant.
std::vector<Var> grad(const Var& output, std::span<const Var> wrt);
inline Var grad(const Var& output, const Var& wrt) {
  return grad(output, std::span<const Var>(&wrt, 1)).front();
}

}  // namespace privlab::ad
