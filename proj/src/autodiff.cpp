#include "privlab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_map>
#include <unordered_set>

#include "privlab/error.hpp"
#include "privlab/kernels.hpp"

namespace privlab::ad {

namespace {

using Backward = std::function<std::vector<Var>(const Var&, const Var&)>;

Var make(Tensor value, std::vector<Var> inputs, Backward backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad =
      std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
  if (node->requires_grad) {
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
  }
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out = Tensor::matrix(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, F f) {
  Tensor out = Tensor::matrix(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

Tensor as_matrix(Tensor t) {
  if (t.rank() == 2) return t;
  const std::size_t r = t.rows();
  const std::size_t c = t.cols();
  return Tensor({r, c}, std::move(t.values()));
}

}  // namespace

double Var::scalar() const {
  if (value().size() != 1) throw DimensionError("scalar() on a non 1x1 value");
  return value()[0];
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = as_matrix(std::move(value));
  return Var(std::move(node));
}

Var variable(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = as_matrix(std::move(value));
  node->requires_grad = true;
  return Var(std::move(node));
}

Var gemm(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  kernels::GemmShape s;
  s.m = trans_a ? a.cols() : a.rows();
  s.k = trans_a ? a.rows() : a.cols();
  const std::size_t kb = trans_b ? b.cols() : b.rows();
  s.n = trans_b ? b.rows() : b.cols();
  s.trans_a = trans_a;
  s.trans_b = trans_b;
  if (s.k != kb) {
    throw DimensionError("matmul: inner dimensions " + std::to_string(s.k) + " and " +
                         std::to_string(kb) + " differ");
  }
  Tensor out = Tensor::matrix(s.m, s.n);
  kernels::gemm(s, a.value().data(), b.value().data(), out.data());
  return make(std::move(out), {a, b}, [trans_a, trans_b](const Var& self, const Var& g) {
    const Var& a = self.node()->inputs[0];
    const Var& b = self.node()->inputs[1];
    Var ga, gb;
    if (a.requires_grad()) ga = trans_a ? gemm(b, g, trans_b, true) : gemm(g, b, false, !trans_b);
    if (b.requires_grad()) gb = trans_b ? gemm(g, a, true, trans_a) : gemm(a, g, !trans_a, false);
    return std::vector<Var>{ga, gb};
  });
}

Var matmul(const Var& a, const Var& b) { return gemm(a, b, false, false); }

Var transpose(const Var& a) {
  const std::size_t r = a.rows();
  const std::size_t c = a.cols();
  Tensor out = Tensor::matrix(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.value().at(i, j);
  return make(std::move(out), {a}, [](const Var&, const Var& g) {
    return std::vector<Var>{transpose(g)};
  });
}

Var operator+(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return make(zip(a.value(), b.value(), [](double x, double y) { return x + y; }), {a, b},
              [](const Var& self, const Var& g) {
                const auto& in = self.node()->inputs;
                return std::vector<Var>{in[0].requires_grad() ? g : Var{},
                                        in[1].requires_grad() ? g : Var{}};
              });
}

Var operator-(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return make(zip(a.value(), b.value(), [](double x, double y) { return x - y; }), {a, b},
              [](const Var& self, const Var& g) {
                const auto& in = self.node()->inputs;
                return std::vector<Var>{in[0].requires_grad() ? g : Var{},
                                        in[1].requires_grad() ? -g : Var{}};
              });
}

Var operator*(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return make(zip(a.value(), b.value(), [](double x, double y) { return x * y; }), {a, b},
              [](const Var& self, const Var& g) {
                const auto& in = self.node()->inputs;
                return std::vector<Var>{in[0].requires_grad() ? g * in[1] : Var{},
                                        in[1].requires_grad() ? g * in[0] : Var{}};
              });
}

Var operator-(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double c) {
  return make(map(a.value(), [c](double x) { return c * x; }), {a},
              [c](const Var&, const Var& g) { return std::vector<Var>{scale(g, c)}; });
}

Var add_scalar(const Var& a, double c) {
  return make(map(a.value(), [c](double x) { return x + c; }), {a},
              [](const Var&, const Var& g) { return std::vector<Var>{g}; });
}

Var relu(const Var& a) {
  return make(map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }), {a},
              [](const Var& self, const Var& g) {
                const Var& in = self.node()->inputs[0];
                Var step = constant(map(in.value(), [](double x) { return x > 0.0 ? 1.0 : 0.0; }));
                return std::vector<Var>{g * step};
              });
}

Var exp(const Var& a) {
  return make(map(a.value(), [](double x) { return std::exp(x); }), {a},
              [](const Var& self, const Var& g) { return std::vector<Var>{g * self}; });
}

Var log(const Var& a) {
  return make(map(a.value(), [](double x) { return std::log(x); }), {a},
              [](const Var& self, const Var& g) {
                return std::vector<Var>{g * reciprocal(self.node()->inputs[0])};
              });
}

Var sigmoid(const Var& a) {
  return make(map(a.value(),
                  [](double x) {
                    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
                    const double e = std::exp(x);
                    return e / (1.0 + e);
                  }),
              {a}, [](const Var& self, const Var& g) {
                return std::vector<Var>{g * self * add_scalar(-self, 1.0)};
              });
}

Var reciprocal(const Var& a) {
  return make(map(a.value(), [](double x) { return 1.0 / x; }), {a},
              [](const Var& self, const Var& g) { return std::vector<Var>{-(g * self * self)}; });
}

Var sqrt(const Var& a) {
  return make(map(a.value(), [](double x) { return std::sqrt(x); }), {a},
              [](const Var& self, const Var& g) {
                return std::vector<Var>{g * scale(reciprocal(self), 0.5)};
              });
}

Var abs(const Var& a) {
  return make(map(a.value(), [](double x) { return std::abs(x); }), {a},
              [](const Var& self, const Var& g) {
                const Var& in = self.node()->inputs[0];
                Var sign = constant(map(in.value(), [](double x) {
                  return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
                }));
                return std::vector<Var>{g * sign};
              });
}

Var sum(const Var& a) {
  double acc = 0.0;
  for (double v : a.value().data()) acc += v;
  const std::size_t r = a.rows();
  const std::size_t c = a.cols();
  return make(Tensor({1, 1}, std::vector<double>{acc}), {a}, [r, c](const Var&, const Var& g) {
    return std::vector<Var>{broadcast_scalar(g, r, c)};
  });
}

Var sum_rows(const Var& a) {
  const std::size_t r = a.rows();
  const std::size_t c = a.cols();
  Tensor out = Tensor::matrix(1, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += a.value().at(i, j);
  return make(std::move(out), {a}, [r](const Var&, const Var& g) {
    return std::vector<Var>{broadcast_rows(g, r)};
  });
}

Var sum_cols(const Var& a) {
  const std::size_t r = a.rows();
  const std::size_t c = a.cols();
  Tensor out = Tensor::matrix(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < c; ++j) acc += a.value().at(i, j);
    out[i] = acc;
  }
  return make(std::move(out), {a}, [c](const Var&, const Var& g) {
    return std::vector<Var>{broadcast_cols(g, c)};
  });
}

Var broadcast_rows(const Var& row, std::size_t rows) {
  if (row.rows() != 1) throw DimensionError("broadcast_rows expects a 1 x n input");
  const std::size_t c = row.cols();
  Tensor out = Tensor::matrix(rows, c);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = row.value()[j];
  return make(std::move(out), {row},
              [](const Var&, const Var& g) { return std::vector<Var>{sum_rows(g)}; });
}

Var broadcast_cols(const Var& col, std::size_t cols) {
  if (col.cols() != 1) throw DimensionError("broadcast_cols expects an n x 1 input");
  const std::size_t r = col.rows();
  Tensor out = Tensor::matrix(r, cols);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < cols; ++j) out.at(i, j) = col.value()[i];
  return make(std::move(out), {col},
              [](const Var&, const Var& g) { return std::vector<Var>{sum_cols(g)}; });
}

Var broadcast_scalar(const Var& s, std::size_t rows, std::size_t cols) {
  if (s.value().size() != 1) throw DimensionError("broadcast_scalar expects a 1x1 input");
  return make(Tensor::matrix(rows, cols, s.value()[0]), {s},
              [](const Var&, const Var& g) { return std::vector<Var>{sum(g)}; });
}

Var slice(const Var& flat, std::size_t offset, std::size_t rows, std::size_t cols) {
  const std::size_t total = flat.value().size();
  if (flat.rows() != 1 || offset + rows * cols > total) {
    throw DimensionError("slice out of range of the flat parameter vector");
  }
  const auto first = flat.value().values().begin() + static_cast<std::ptrdiff_t>(offset);
  Tensor out({rows, cols}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(rows * cols)));
  return make(std::move(out), {flat}, [offset, total](const Var&, const Var& g) {
    return std::vector<Var>{embed(g, offset, total)};
  });
}

Var embed(const Var& block, std::size_t offset, std::size_t total) {
  const std::size_t r = block.rows();
  const std::size_t c = block.cols();
  if (offset + r * c > total) throw DimensionError("embed out of range");
  Tensor out = Tensor::matrix(1, total);
  std::copy(block.value().data().begin(), block.value().data().end(),
            out.values().begin() + static_cast<std::ptrdiff_t>(offset));
  return make(std::move(out), {block}, [offset, r, c](const Var&, const Var& g) {
    return std::vector<Var>{slice(g, offset, r, c)};
  });
}

namespace {

Var row_max_constant(const Var& a) {
  Tensor m = Tensor::matrix(a.rows(), 1);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double best = a.value().at(i, 0);
    for (std::size_t j = 1; j < a.cols(); ++j) best = std::max(best, a.value().at(i, j));
    m[i] = best;
  }
  return constant(std::move(m));
}

}  // namespace

// The max shift is held constant: softmax is invariant to it, so its gradient
// contribution vanishes identically.
Var softmax(const Var& logits) {
  const std::size_t c = logits.cols();
  Var shifted = logits - broadcast_cols(row_max_constant(logits), c);
  Var e = exp(shifted);
  return e * broadcast_cols(reciprocal(sum_cols(e)), c);
}

Var softmax_cross_entropy(const Var& logits, const Var& targets) {
  require_same_shape(logits, targets, "softmax_cross_entropy");
  const std::size_t c = logits.cols();
  Var shifted = logits - broadcast_cols(row_max_constant(logits), c);
  Var lse = log(sum_cols(exp(shifted)));
  Var log_probs = shifted - broadcast_cols(lse, c);
  return scale(sum(targets * log_probs), -1.0 / static_cast<double>(logits.rows()));
}

std::vector<Var> grad(const Var& output, std::span<const Var> wrt) {
  if (output.value().size() != 1) throw DimensionError("grad: output must be 1x1");
  std::vector<Var> result;
  result.reserve(wrt.size());
  auto zeros_like = [](const Var& v) { return constant(Tensor::matrix(v.rows(), v.cols())); };
  if (!output.requires_grad()) {
    for (const Var& w : wrt) result.push_back(zeros_like(w));
    return result;
  }

  // Post-order over nodes that require gradients.
  std::vector<Var> order;
  std::unordered_set<const Node*> visited;
  std::vector<std::pair<Var, std::size_t>> stack;
  stack.emplace_back(output, 0);
  visited.insert(output.node());
  while (!stack.empty()) {
    auto& [var, next] = stack.back();
    const auto& inputs = var.node()->inputs;
    if (next < inputs.size()) {
      const Var child = inputs[next++];
      if (child.requires_grad() && visited.insert(child.node()).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(var);
      stack.pop_back();
    }
  }

  std::unordered_map<const Node*, Var> grads;
  grads.emplace(output.node(), constant(Tensor({1, 1}, std::vector<double>{1.0})));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node* node = it->node();
    auto found = grads.find(node);
    if (found == grads.end() || !node->backward) continue;
    const Var g = found->second;
    std::vector<Var> input_grads = node->backward(*it, g);
    for (std::size_t i = 0; i < input_grads.size(); ++i) {
      if (!input_grads[i].defined()) continue;
      const Node* in = node->inputs[i].node();
      auto slot = grads.find(in);
      if (slot == grads.end()) {
        grads.emplace(in, input_grads[i]);
      } else {
        slot->second = slot->second + input_grads[i];
      }
    }
  }

  for (const Var& w : wrt) {
    auto found = grads.find(w.node());
    result.push_back(found == grads.end() ? zeros_like(w) : found->second);
  }
  return result;
}

}  // namespace privlab::ad
