#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "privlab/autodiff.hpp"
#include "privlab/tensor.hpp"

namespace privlab {

enum class Activation { Identity, Relu };

/// One entry of a ParamVector layout: a dense layer's weights followed by its bias.
struct LayerSlot {
  std::uint32_t id = 0;
  std::uint64_t count = 0;
  friend bool operator==(const LayerSlot&, const LayerSlot&) = default;
};

/// Flat parameter (or gradient) vector with its layer layout.
class ParamVector {
 public:
  ParamVector() = default;
  ParamVector(std::vector<LayerSlot> layout, std::vector<double> values);
  /// Zero vector with the given layout.
  explicit ParamVector(std::vector<LayerSlot> layout);

  const std::vector<LayerSlot>& layout() const noexcept { return layout_; }
  std::size_t size() const noexcept { return values_.size(); }
  double& operator[](std::size_t i) noexcept { return values_[i]; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }
  std::vector<double>& values() noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }

  /// Same layout, new values (length must match).
  ParamVector with_values(std::vector<double> values) const;
  /// Flat offset of the first entry of layout slot `slot`.
  std::size_t slot_offset(std::size_t slot) const;

  friend bool operator==(const ParamVector&, const ParamVector&) = default;

 private:
  std::vector<LayerSlot> layout_;
  std::vector<double> values_;
};

/// Throws ValidationError unless a and b have the same length.
void require_same_length(const ParamVector& a, const ParamVector& b, std::string_view what);

/// Geometry of one dense layer inside the flat parameter vector.
struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t weight_offset = 0;  ///< in x out row-major block
  std::size_t bias_offset = 0;    ///< out entries
  Activation activation = Activation::Identity;
};

/// Multilayer perceptron description. The output layer is always Identity.
struct ModelSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden;
  std::vector<Activation> activations;  ///< one per hidden layer; empty means all Relu
  std::size_t classes = 0;
  std::uint64_t seed = 0;

  static ModelSpec mlp(std::size_t input_dim, std::vector<std::size_t> hidden,
                       std::size_t classes, std::uint64_t seed = 0);

  std::vector<DenseLayer> layers() const;
  std::vector<LayerSlot> layout() const;
  std::size_t param_count() const;
  /// e.g. "64-16-4"
  std::string describe() const;
  void validate() const;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias, from spec.seed.
ParamVector init_params(const ModelSpec& spec);

/// Logits of shape (batch rows, classes).
Tensor forward(const ModelSpec& spec, const ParamVector& params, const Tensor& batch);

struct LossAndGrad {
  double loss = 0.0;
  ParamVector grad;
};

/// Mean softmax cross-entropy over the batch and its gradient.
LossAndGrad loss_and_grad(const ModelSpec& spec, const ParamVector& params, const Tensor& batch,
                          const std::vector<int>& labels);

enum class OuterLoss { CosineMismatch, L2Mismatch };
OuterLoss parse_outer_loss(std::string_view tag);

/// d/d(batch) of outer(target, grad_params loss(batch, labels)).
Tensor grad_wrt_input(const ModelSpec& spec, const ParamVector& params, const Tensor& batch,
                      const std::vector<int>& labels, const ParamVector& target,
                      OuterLoss outer);

/// H v where H is the Hessian of the mean cross-entropy with respect to the parameters.
ParamVector hessian_vector_product(const ModelSpec& spec, const ParamVector& params,
                                   const Tensor& batch, const std::vector<int>& labels,
                                   const ParamVector& v);

// Graph-level building blocks shared by the attack and defense modules.
namespace graph {

ad::Var logits(const ModelSpec& spec, const ad::Var& params, const ad::Var& batch);
ad::Var one_hot(const std::vector<int>& labels, std::size_t classes);
ad::Var params_row(const ParamVector& params, bool differentiable);
ParamVector to_params(const ad::Var& row, const std::vector<LayerSlot>& layout);
/// 1 - <t, g> / (|t| |g|)
ad::Var cosine_mismatch(const ad::Var& target, const ad::Var& g);
/// sum (g - t)^2
ad::Var l2_mismatch(const ad::Var& target, const ad::Var& g);

}  // namespace graph

void validate_labels(const std::vector<int>& labels, std::size_t classes, std::size_t rows);

// Checkpoint format: "PFLW", u32 layer count, per layer (u32 id, u64 count), then
// the values as little-endian IEEE-754 doubles.
void write_checkpoint(std::ostream& out, const ParamVector& params);
ParamVector read_checkpoint(std::istream& in);
void save_checkpoint(const std::string& path, const ParamVector& params);
ParamVector load_checkpoint(const std::string& path);

}  // namespace privlab
