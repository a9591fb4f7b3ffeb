#pragma once

// Test-only reference computations. Nothing here calls into the autodiff engine.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "privlab/model.hpp"
#include "privlab/tensor.hpp"

namespace oracle {

using privlab::ModelSpec;
using privlab::ParamVector;
using privlab::Tensor;

inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Plain-loop forward pass returning logits and all hidden pre-activations.
inline Tensor mlp_forward(const ModelSpec& spec, const std::vector<double>& w, const Tensor& x,
                          std::vector<double>* preacts = nullptr) {
  const std::size_t rows = x.rows();
  std::vector<double> h(x.values());
  std::size_t width = spec.input_dim;
  for (const auto& layer : spec.layers()) {
    std::vector<double> next(rows * layer.out);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t o = 0; o < layer.out; ++o) {
        double acc = w[layer.bias_offset + o];
        for (std::size_t i = 0; i < layer.in; ++i)
          acc += h[r * width + i] * w[layer.weight_offset + i * layer.out + o];
        if (preacts && layer.activation == privlab::Activation::Relu) preacts->push_back(acc);
        if (layer.activation == privlab::Activation::Relu) acc = std::max(acc, 0.0);
        next[r * layer.out + o] = acc;
      }
    }
    h = std::move(next);
    width = layer.out;
  }
  return Tensor({rows, spec.classes}, h);
}

inline double mlp_loss(const ModelSpec& spec, const std::vector<double>& w, const Tensor& x,
                       const std::vector<int>& labels) {
  Tensor z = mlp_forward(spec, w, x);
  double total = 0.0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    double m = z.at(r, 0);
    for (std::size_t k = 1; k < z.cols(); ++k) m = std::max(m, z.at(r, k));
    double s = 0.0;
    for (std::size_t k = 0; k < z.cols(); ++k) s += std::exp(z.at(r, k) - m);
    total += -(z.at(r, static_cast<std::size_t>(labels[r])) - m - std::log(s));
  }
  return total / static_cast<double>(z.rows());
}

/// Central finite-difference gradient of f at x.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = f(x);
    x[i] = orig - h;
    const double down = f(x);
    x[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

struct RandomProblem {
  ModelSpec spec;
  ParamVector params;
  Tensor batch;
  std::vector<int> labels;
};

/// Small random MLP (<= 3 dense layers, <= 64 parameters) with a random batch.
/// Rejects draws where a ReLU pre-activation sits within `kink_margin` of zero,
/// so finite differences never straddle a kink.
inline RandomProblem random_problem(std::uint64_t seed, std::size_t max_batch = 3,
                                    double kink_margin = 1e-2) {
  std::mt19937_64 rng(seed);
  for (;;) {
    std::uniform_int_distribution<int> in_d(2, 4), cls_d(2, 3), layers_d(0, 2), width_d(2, 4),
        batch_d(1, static_cast<int>(max_batch));
    const std::size_t input = static_cast<std::size_t>(in_d(rng));
    const std::size_t classes = static_cast<std::size_t>(cls_d(rng));
    std::vector<std::size_t> hidden(static_cast<std::size_t>(layers_d(rng)));
    for (auto& h : hidden) h = static_cast<std::size_t>(width_d(rng));
    ModelSpec spec = ModelSpec::mlp(input, hidden, classes, rng());
    if (spec.param_count() > 64) continue;
    ParamVector params = privlab::init_params(spec);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& v : params.values()) v = nd(rng);
    const std::size_t b = static_cast<std::size_t>(batch_d(rng));
    Tensor batch = Tensor::matrix(b, input);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    for (auto& v : batch.values()) v = ud(rng);
    std::vector<int> labels(b);
    std::uniform_int_distribution<int> yd(0, static_cast<int>(classes) - 1);
    for (auto& y : labels) y = yd(rng);
    std::vector<double> pre;
    mlp_forward(spec, params.values(), batch, &pre);
    if (std::any_of(pre.begin(), pre.end(), [&](double z) { return std::abs(z) < kink_margin; }))
      continue;
    return {spec, params, batch, labels};
  }
}

/// Closed-form d/dx of sum((g(x) - t)^2) for a linear softmax model (no hidden
/// layers), where g is the mean cross-entropy gradient over the batch.
inline Tensor linear_softmax_l2_input_grad(const ModelSpec& spec, const std::vector<double>& w,
                                           const Tensor& x, const std::vector<int>& labels,
                                           const std::vector<double>& target) {
  const std::size_t in = spec.input_dim, K = spec.classes, B = x.rows();
  Tensor z = mlp_forward(spec, w, x);
  std::vector<std::vector<double>> p(B, std::vector<double>(K)), delta = p;
  for (std::size_t n = 0; n < B; ++n) {
    double m = z.at(n, 0);
    for (std::size_t k = 1; k < K; ++k) m = std::max(m, z.at(n, k));
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(z.at(n, k) - m);
    for (std::size_t k = 0; k < K; ++k) {
      p[n][k] = std::exp(z.at(n, k) - m) / s;
      delta[n][k] = p[n][k] - (static_cast<int>(k) == labels[n] ? 1.0 : 0.0);
    }
  }
  // Residuals of the weight block (in x K) and bias block (K).
  std::vector<double> rw(in * K), rb(K);
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      double g = 0.0;
      for (std::size_t n = 0; n < B; ++n) g += x.at(n, i) * delta[n][k];
      rw[i * K + k] = g / B - target[i * K + k];
    }
  for (std::size_t k = 0; k < K; ++k) {
    double g = 0.0;
    for (std::size_t n = 0; n < B; ++n) g += delta[n][k];
    rb[k] = g / B - target[in * K + k];
  }
  Tensor out = Tensor::matrix(B, in);
  for (std::size_t n = 0; n < B; ++n) {
    // u = dL/d(delta_n) = (2/B) (R_W^T x_n + r_b)
    std::vector<double> u(K);
    for (std::size_t k = 0; k < K; ++k) {
      double acc = rb[k];
      for (std::size_t i = 0; i < in; ++i) acc += rw[i * K + k] * x.at(n, i);
      u[k] = 2.0 * acc / B;
    }
    // J u with J = diag(p) - p p^T
    double pu = 0.0;
    for (std::size_t k = 0; k < K; ++k) pu += p[n][k] * u[k];
    std::vector<double> ju(K);
    for (std::size_t k = 0; k < K; ++k) ju[k] = p[n][k] * (u[k] - pu);
    for (std::size_t i = 0; i < in; ++i) {
      double direct = 0.0, through = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        direct += rw[i * K + k] * delta[n][k];
        through += w[i * K + k] * ju[k];
      }
      out.at(n, i) = 2.0 * direct / B + through;
    }
  }
  return out;
}

/// Explicit Hessian of the mean cross-entropy of a linear softmax model:
/// H = mean_n (xt_n xt_n^T) (x) J_n with xt = [x; 1], in parameter order (W row-major, b).
inline std::vector<double> linear_softmax_hessian(const ModelSpec& spec,
                                                  const std::vector<double>& w, const Tensor& x) {
  const std::size_t in = spec.input_dim, K = spec.classes, B = x.rows();
  const std::size_t d = in * K + K;
  std::vector<double> H(d * d, 0.0);
  Tensor z = mlp_forward(spec, w, x);
  auto index = [&](std::size_t i, std::size_t k) { return i < in ? i * K + k : in * K + k; };
  for (std::size_t n = 0; n < B; ++n) {
    std::vector<double> p(K);
    double m = z.at(n, 0);
    for (std::size_t k = 1; k < K; ++k) m = std::max(m, z.at(n, k));
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(z.at(n, k) - m);
    for (std::size_t k = 0; k < K; ++k) p[k] = std::exp(z.at(n, k) - m) / s;
    for (std::size_t i = 0; i <= in; ++i)
      for (std::size_t j = 0; j <= in; ++j) {
        const double xi = i < in ? x.at(n, i) : 1.0;
        const double xj = j < in ? x.at(n, j) : 1.0;
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t l = 0; l < K; ++l) {
            const double J = (k == l ? p[k] : 0.0) - p[k] * p[l];
            H[index(i, k) * d + index(j, l)] += xi * xj * J / B;
          }
      }
  }
  return H;
}

// Brute force over every (i, j) cluster pair with explicit intersection counting. Terms are
// summed smallest first, the canonical order the library uses.
inline double brute_nmi(const std::vector<std::size_t>& u, const std::vector<std::size_t>& v) {
  const double n = static_cast<double>(u.size());
  std::size_t ku = 0, kv = 0;
  for (auto x : u) ku = std::max(ku, x + 1);
  for (auto x : v) kv = std::max(kv, x + 1);
  std::vector<double> terms;
  double hu = 0.0, hv = 0.0;
  for (std::size_t i = 0; i < ku; ++i) {
    double ui = 0;
    for (auto x : u) ui += x == i;
    if (ui > 0) hu -= ui / n * std::log(ui / n);
    for (std::size_t j = 0; j < kv; ++j) {
      double vj = 0, both = 0;
      for (std::size_t e = 0; e < u.size(); ++e) {
        vj += v[e] == j;
        both += (u[e] == i && v[e] == j);
      }
      if (both > 0) terms.push_back(both / n * std::log(n * both / (ui * vj)));
    }
  }
  std::sort(terms.begin(), terms.end());
  double mi = 0.0;
  for (double t : terms) mi += t;
  for (std::size_t j = 0; j < kv; ++j) {
    double vj = 0;
    for (auto x : v) vj += x == j;
    if (vj > 0) hv -= vj / n * std::log(vj / n);
  }
  if (hu == 0 && hv == 0) return 1.0;
  // Every nonempty cell filling its whole row and column means one partition, relabeled.
  bool bijective = true;
  for (std::size_t i = 0; i < ku; ++i) {
    for (std::size_t j = 0; j < kv; ++j) {
      double ui = 0, vj = 0, both = 0;
      for (std::size_t e = 0; e < u.size(); ++e) {
        ui += u[e] == i;
        vj += v[e] == j;
        both += (u[e] == i && v[e] == j);
      }
      if (both > 0 && (both != ui || both != vj)) bijective = false;
    }
  }
  if (bijective) return 1.0;
  return std::clamp(mi / (0.5 * (hu + hv)), 0.0, 1.0);
}

}  // namespace oracle
