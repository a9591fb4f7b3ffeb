#include "privlab/model.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "privlab/binary_io.hpp"
#include "privlab/error.hpp"
#include "privlab/random.hpp"

namespace privlab {

ParamVector::ParamVector(std::vector<LayerSlot> layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  std::uint64_t total = 0;
  for (const auto& slot : layout_) total += slot.count;
  if (total != values_.size()) {
    throw DimensionError("parameter layout covers " + std::to_string(total) + " entries but " +
                         std::to_string(values_.size()) + " values were given");
  }
}

ParamVector::ParamVector(std::vector<LayerSlot> layout) : layout_(std::move(layout)) {
  std::uint64_t total = 0;
  for (const auto& slot : layout_) total += slot.count;
  values_.assign(total, 0.0);
}

ParamVector ParamVector::with_values(std::vector<double> values) const {
  return ParamVector(layout_, std::move(values));
}

std::size_t ParamVector::slot_offset(std::size_t slot) const {
  std::size_t off = 0;
  for (std::size_t i = 0; i < slot && i < layout_.size(); ++i) off += layout_[i].count;
  return off;
}

void require_same_length(const ParamVector& a, const ParamVector& b, std::string_view what) {
  if (a.size() != b.size()) {
    throw ValidationError(std::string(what) + ": length mismatch " + std::to_string(a.size()) +
                          " vs " + std::to_string(b.size()));
  }
}

ModelSpec ModelSpec::mlp(std::size_t input_dim, std::vector<std::size_t> hidden,
                         std::size_t classes, std::uint64_t seed) {
  ModelSpec s;
  s.input_dim = input_dim;
  s.activations.assign(hidden.size(), Activation::Relu);
  s.hidden = std::move(hidden);
  s.classes = classes;
  s.seed = seed;
  return s;
}

void ModelSpec::validate() const {
  if (input_dim == 0 || classes == 0) throw ValidationError("model needs input_dim > 0 and classes > 0");
  if (!activations.empty() && activations.size() != hidden.size()) {
    throw ValidationError("one activation per hidden layer expected");
  }
  for (std::size_t h : hidden) {
    if (h == 0) throw ValidationError("hidden layer width must be positive");
  }
}

std::vector<DenseLayer> ModelSpec::layers() const {
  std::vector<DenseLayer> out;
  std::size_t in = input_dim;
  std::size_t offset = 0;
  for (std::size_t i = 0; i <= hidden.size(); ++i) {
    DenseLayer layer;
    layer.in = in;
    layer.out = i < hidden.size() ? hidden[i] : classes;
    layer.weight_offset = offset;
    layer.bias_offset = offset + layer.in * layer.out;
    if (i < hidden.size()) {
      layer.activation = activations.empty() ? Activation::Relu : activations[i];
    }
    offset = layer.bias_offset + layer.out;
    in = layer.out;
    out.push_back(layer);
  }
  return out;
}

std::vector<LayerSlot> ModelSpec::layout() const {
  std::vector<LayerSlot> slots;
  std::uint32_t id = 0;
  for (const auto& l : layers()) slots.push_back({id++, l.in * l.out + l.out});
  return slots;
}

std::size_t ModelSpec::param_count() const {
  const auto ls = layers();
  return ls.back().bias_offset + ls.back().out;
}

std::string ModelSpec::describe() const {
  std::string s = std::to_string(input_dim);
  for (std::size_t h : hidden) s += "-" + std::to_string(h);
  return s + "-" + std::to_string(classes);
}

ParamVector init_params(const ModelSpec& spec) {
  spec.validate();
  ParamVector params(spec.layout());
  Rng rng(spec.seed);
  for (const auto& layer : spec.layers()) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    const std::size_t end = layer.bias_offset + layer.out;
    for (std::size_t j = layer.weight_offset; j < end; ++j) params[j] = dist(rng);
  }
  return params;
}

void validate_labels(const std::vector<int>& labels, std::size_t classes, std::size_t rows) {
  if (labels.size() != rows) {
    throw ValidationError("label count " + std::to_string(labels.size()) +
                          " does not match batch size " + std::to_string(rows));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ValidationError("label " + std::to_string(y) + " outside [0, " +
                            std::to_string(classes) + ")");
    }
  }
}

namespace {

void check_inputs(const ModelSpec& spec, const ParamVector& params, const Tensor& batch) {
  spec.validate();
  if (params.size() != spec.param_count()) {
    throw DimensionError("parameter vector has " + std::to_string(params.size()) +
                         " entries, model " + spec.describe() + " needs " +
                         std::to_string(spec.param_count()));
  }
  if (batch.rank() != 2 || batch.cols() != spec.input_dim) {
    throw DimensionError("layer 0 (dense " + std::to_string(spec.input_dim) + "->" +
                         std::to_string(spec.layers().front().out) + ") expects " +
                         std::to_string(spec.input_dim) + " input features, batch has " +
                         std::to_string(batch.rank() == 2 ? batch.cols() : batch.size()));
  }
}

}  // namespace

namespace graph {

ad::Var logits(const ModelSpec& spec, const ad::Var& params, const ad::Var& batch) {
  ad::Var h = batch;
  const std::size_t rows = batch.rows();
  std::size_t index = 0;
  for (const auto& layer : spec.layers()) {
    if (h.cols() != layer.in) {
      throw DimensionError("layer " + std::to_string(index) + " (dense " +
                           std::to_string(layer.in) + "->" + std::to_string(layer.out) +
                           ") received " + std::to_string(h.cols()) + " features");
    }
    ad::Var w = ad::slice(params, layer.weight_offset, layer.in, layer.out);
    ad::Var b = ad::slice(params, layer.bias_offset, 1, layer.out);
    h = ad::matmul(h, w) + ad::broadcast_rows(b, rows);
    if (layer.activation == Activation::Relu) h = ad::relu(h);
    ++index;
  }
  return h;
}

ad::Var one_hot(const std::vector<int>& labels, std::size_t classes) {
  Tensor t = Tensor::matrix(labels.size(), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) t.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  return ad::constant(std::move(t));
}

ad::Var params_row(const ParamVector& params, bool differentiable) {
  Tensor t({1, params.size()}, params.values());
  return differentiable ? ad::variable(std::move(t)) : ad::constant(std::move(t));
}

ParamVector to_params(const ad::Var& row, const std::vector<LayerSlot>& layout) {
  return ParamVector(layout, row.value().values());
}

ad::Var cosine_mismatch(const ad::Var& target, const ad::Var& g) {
  double tnorm2 = 0.0;
  for (double v : target.value().data()) tnorm2 += v * v;
  if (tnorm2 == 0.0) throw DegenerateError("cosine mismatch against an all-zero target");
  ad::Var dot = ad::sum(target * g);
  // Tiny floor keeps the norm differentiable when g vanishes.
  ad::Var gnorm = ad::sqrt(ad::add_scalar(ad::sum(g * g), 1e-300));
  ad::Var cos = ad::scale(dot * ad::reciprocal(gnorm), 1.0 / std::sqrt(tnorm2));
  return ad::add_scalar(-cos, 1.0);
}

ad::Var l2_mismatch(const ad::Var& target, const ad::Var& g) {
  ad::Var diff = g - target;
  return ad::sum(diff * diff);
}

}  // namespace graph

Tensor forward(const ModelSpec& spec, const ParamVector& params, const Tensor& batch) {
  check_inputs(spec, params, batch);
  ad::Var out = graph::logits(spec, graph::params_row(params, false), ad::constant(batch));
  return out.value();
}

LossAndGrad loss_and_grad(const ModelSpec& spec, const ParamVector& params, const Tensor& batch,
                          const std::vector<int>& labels) {
  check_inputs(spec, params, batch);
  validate_labels(labels, spec.classes, batch.rows());
  ad::Var w = graph::params_row(params, true);
  ad::Var loss = ad::softmax_cross_entropy(graph::logits(spec, w, ad::constant(batch)),
                                           graph::one_hot(labels, spec.classes));
  ad::Var g = ad::grad(loss, w);
  return {loss.scalar(), graph::to_params(g, params.layout())};
}

OuterLoss parse_outer_loss(std::string_view tag) {
  if (tag == "cosine" || tag == "cosine-mismatch") return OuterLoss::CosineMismatch;
  if (tag == "l2" || tag == "l2-mismatch") return OuterLoss::L2Mismatch;
  throw ConfigError("unsupported outer loss '" + std::string(tag) + "'");
}

Tensor grad_wrt_input(const ModelSpec& spec, const ParamVector& params, const Tensor& batch,
                      const std::vector<int>& labels, const ParamVector& target,
                      OuterLoss outer) {
  check_inputs(spec, params, batch);
  validate_labels(labels, spec.classes, batch.rows());
  require_same_length(params, target, "grad_wrt_input target");
  ad::Var w = graph::params_row(params, true);
  ad::Var x = ad::variable(batch);
  ad::Var loss =
      ad::softmax_cross_entropy(graph::logits(spec, w, x), graph::one_hot(labels, spec.classes));
  ad::Var g = ad::grad(loss, w);
  ad::Var t = graph::params_row(target, false);
  ad::Var outer_loss =
      outer == OuterLoss::CosineMismatch ? graph::cosine_mismatch(t, g) : graph::l2_mismatch(t, g);
  Tensor gx = ad::grad(outer_loss, x).value();
  return Tensor(batch.shape(), std::move(gx.values()));
}

ParamVector hessian_vector_product(const ModelSpec& spec, const ParamVector& params,
                                   const Tensor& batch, const std::vector<int>& labels,
                                   const ParamVector& v) {
  check_inputs(spec, params, batch);
  validate_labels(labels, spec.classes, batch.rows());
  require_same_length(params, v, "hessian_vector_product");
  ad::Var w = graph::params_row(params, true);
  ad::Var loss = ad::softmax_cross_entropy(graph::logits(spec, w, ad::constant(batch)),
                                           graph::one_hot(labels, spec.classes));
  ad::Var g = ad::grad(loss, w);
  ad::Var directional = ad::sum(g * graph::params_row(v, false));
  return graph::to_params(ad::grad(directional, w), params.layout());
}

void write_checkpoint(std::ostream& out, const ParamVector& params) {
  out.write("PFLW", 4);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.layout().size()));
  for (const auto& slot : params.layout()) {
    io::write_le<std::uint32_t>(out, slot.id);
    io::write_le<std::uint64_t>(out, slot.count);
  }
  for (double v : params.values()) io::write_le<double>(out, v);
}

ParamVector read_checkpoint(std::istream& in) {
  io::Reader r(in);
  r.expect_magic("PFLW");
  const auto layers = r.le<std::uint32_t>("layer count");
  std::vector<LayerSlot> layout;
  std::uint64_t total = 0;
  for (std::uint32_t i = 0; i < layers; ++i) {
    LayerSlot slot;
    slot.id = r.le<std::uint32_t>("layer id");
    slot.count = r.le<std::uint64_t>("layer size");
    total += slot.count;
    if (total > (std::uint64_t{1} << 34)) throw FormatError("implausible parameter count", r.offset());
    layout.push_back(slot);
  }
  std::vector<double> values(total);
  for (auto& v : values) v = r.le<double>("parameter values");
  return ParamVector(std::move(layout), std::move(values));
}

void save_checkpoint(const std::string& path, const ParamVector& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_checkpoint(out, params);
}

ParamVector load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return read_checkpoint(in);
}

}  // namespace privlab
