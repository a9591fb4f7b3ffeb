#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "privlab/data.hpp"
#include "privlab/model.hpp"
#include "privlab/tensor.hpp"

namespace privlab {

/// Inputs of the per-client leakage bound (bits).
struct BoundInputs {
  double p = 0.0;            ///< pruning rate, in [0, 1]
  std::size_t batch = 1;     ///< B
  std::size_t d_star = 1;    ///< effective gradient dimension
  double delta = 0.0;        ///< -1/2 sum log2(eigenvalue)
  std::size_t rounds = 1;    ///< T

  void validate() const;
};

/// 1 - (p - 1) / (2 ln 2) + 2 log2(1/B) + 2 delta + d* log2(2 pi e)
double single_round_bound(const BoundInputs& in);
/// rounds * single_round_bound
double multi_round_bound(const BoundInputs& in);

/// 1 - (1 / (2 ln 2)) sum_{k=1..n} (2p - 1)^{2k} / (k (2k - 1))
double binary_entropy_series(double p, std::size_t terms);
/// -p log2 p - (1 - p) log2 (1 - p)
double binary_entropy(double p);

struct GradStatsOptions {
  double singular_floor = 1e-10;
  bool subtract_mean = true;
  /// Eigen-decomposition runs on at most this many coordinates when both n and d exceed it.
  std::size_t max_coords = 256;
  std::uint64_t seed = 0;  ///< coordinate subsample
};

struct GradStats {
  std::size_t n = 0;
  std::vector<double> mean;
  std::vector<double> eigenvalues;  ///< retained eigenvalues, descending
  std::size_t d_star = 0;
  double delta = 0.0;
  std::size_t coords_used = 0;      ///< < d when coordinates were subsampled
};

/// Covariance statistics of the rows of `grads` (n x d).
GradStats grad_stats_from_samples(const Tensor& grads, const GradStatsOptions& opt = {});

/// Per-example gradients of the first n shard samples at `params`, then grad_stats_from_samples.
GradStats estimate_grad_stats(const ModelSpec& spec, const ParamVector& params,
                              const Dataset& shard, std::size_t n,
                              const GradStatsOptions& opt = {});

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
std::vector<double> symmetric_eigenvalues(const Tensor& sym);

}  // namespace privlab
