#include "privlab/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "privlab/error.hpp"
#include "privlab/kernels.hpp"
#include "privlab/log.hpp"
#include "privlab/random.hpp"

namespace privlab {

void BoundInputs::validate() const {
  // p = 1 is accepted: the worked example of the formula evaluates it there.
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("pruning rate must be in [0, 1]");
  if (batch < 1) throw ValidationError("batch size must be >= 1");
  if (d_star < 1) throw ValidationError("d* must be >= 1");
  if (rounds < 1) throw ValidationError("rounds must be >= 1");
  if (!std::isfinite(delta)) throw ValidationError("delta must be finite");
}

double single_round_bound(const BoundInputs& in) {
  in.validate();
  const double ln2 = std::numbers::ln2;
  return 1.0 - (in.p - 1.0) / (2.0 * ln2) + 2.0 * std::log2(1.0 / static_cast<double>(in.batch)) +
         2.0 * in.delta +
         static_cast<double>(in.d_star) * std::log2(2.0 * std::numbers::pi * std::numbers::e);
}

double multi_round_bound(const BoundInputs& in) {
  return static_cast<double>(in.rounds) * single_round_bound(in);
}

double binary_entropy_series(double p, std::size_t terms) {
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("p must be in [0, 1]");
  if (terms < 1) throw ValidationError("series needs at least one term");
  const double x2 = (2.0 * p - 1.0) * (2.0 * p - 1.0);
  double power = 1.0, sum = 0.0;
  for (std::size_t k = 1; k <= terms; ++k) {
    power *= x2;
    const double kd = static_cast<double>(k);
    sum += power / (kd * (2.0 * kd - 1.0));
  }
  return 1.0 - sum / (2.0 * std::numbers::ln2);
}

double binary_entropy(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("p must be in [0, 1]");
  double h = 0.0;
  if (p > 0.0) h -= p * std::log2(p);
  if (p < 1.0) h -= (1.0 - p) * std::log2(1.0 - p);
  return h;
}

std::vector<double> symmetric_eigenvalues(const Tensor& sym) {
  const std::size_t n = sym.rows();
  if (sym.cols() != n) throw DimensionError("eigenvalues need a square matrix");
  std::vector<double> a(sym.values());
  auto at = [&](std::size_t r, std::size_t c) -> double& { return a[r * n + c]; };
  double total = 0.0;
  for (double v : a) total += v * v;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = r + 1; c < n; ++c) off += at(r, c) * at(r, c);
    if (off <= 1e-30 * total || off == 0.0) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (apq == 0.0) continue;
        const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = at(k, p), akq = at(k, q);
          at(k, p) = c * akp - s * akq;
          at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = at(p, k), aqk = at(q, k);
          at(p, k) = c * apk - s * aqk;
          at(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = at(i, i);
  std::sort(eig.begin(), eig.end(), std::greater<>());
  return eig;
}

GradStats grad_stats_from_samples(const Tensor& grads, const GradStatsOptions& opt) {
  const std::size_t n = grads.rows(), d = grads.cols();
  if (n < 2) throw ValidationError("gradient statistics need n >= 2 samples");
  GradStats stats;
  stats.n = n;
  stats.mean.assign(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) stats.mean[c] += grads.at(r, c);
  for (double& m : stats.mean) m /= static_cast<double>(n);

  std::vector<std::size_t> coords(d);
  std::iota(coords.begin(), coords.end(), 0);
  if (std::min(n, d) > opt.max_coords) {
    Rng rng(derive_seed(opt.seed, {0xc0}));
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opt.max_coords);
    std::sort(coords.begin(), coords.end());
    log::info("gradient statistics use " + std::to_string(coords.size()) + " of " +
              std::to_string(d) + " coordinates");
  }
  const std::size_t m = coords.size();
  stats.coords_used = m;

  Tensor centered = Tensor::matrix(n, m);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < m; ++j)
      centered.at(r, j) = grads.at(r, coords[j]) - (opt.subtract_mean ? stats.mean[coords[j]] : 0.0);

  // The nonzero spectrum of X^T X / (n-1) equals that of X X^T / (n-1); decompose the smaller.
  const double divisor = static_cast<double>(n - 1);
  Tensor small;
  if (n <= m) {
    small = Tensor::matrix(n, n);
    kernels::gram_parallel(n, m, centered.data(), divisor, small.data());
  } else {
    Tensor xt = Tensor::matrix(m, n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < m; ++j) xt.at(j, r) = centered.at(r, j);
    small = Tensor::matrix(m, m);
    kernels::gram_parallel(m, n, xt.data(), divisor, small.data());
  }
  for (double e : symmetric_eigenvalues(small)) {
    if (e > opt.singular_floor) stats.eigenvalues.push_back(e);
  }
  if (stats.eigenvalues.empty()) {
    throw DegenerateError("every covariance eigenvalue is <= " + std::to_string(opt.singular_floor));
  }
  stats.d_star = stats.eigenvalues.size();
  for (double e : stats.eigenvalues) stats.delta -= 0.5 * std::log2(e);
  return stats;
}

GradStats estimate_grad_stats(const ModelSpec& spec, const ParamVector& params,
                              const Dataset& shard, std::size_t n, const GradStatsOptions& opt) {
  if (n < 2) throw ValidationError("gradient statistics need n >= 2 samples");
  if (n > shard.size()) {
    throw ValidationError("requested " + std::to_string(n) + " samples from a shard of " +
                          std::to_string(shard.size()));
  }
  const std::size_t d = params.size();
  Tensor grads = Tensor::matrix(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto g = loss_and_grad(spec, params, shard.samples.slice_rows(i, 1), {shard.labels[i]});
    std::copy(g.grad.values().begin(), g.grad.values().end(), grads.values().begin() + i * d);
  }
  return grad_stats_from_samples(grads, opt);
}

}  // namespace privlab
