#pragma once

#include <cstddef>
#include <vector>

#include "privlab/tensor.hpp"

namespace privlab {

/// Assignment of N elements to clusters 0..k-1.
struct DiscreteClustering {
  std::vector<std::size_t> assignments;
  std::vector<std::size_t> sizes;  ///< sizes[c] = count of elements in cluster c

  static DiscreteClustering from_assignments(std::vector<std::size_t> assignments);
  std::size_t size() const noexcept { return assignments.size(); }
};

/// Pixel -> floor(value * levels), capped at levels - 1. Values outside [0, 1] are
/// clamped (reported through the log at debug level).
DiscreteClustering discretize(const Tensor& image, std::size_t levels);

/// Shannon entropy of the clustering, natural log.
double entropy(const DiscreteClustering& u);
/// Mutual information from the contingency table, natural log.
double mutual_information(const DiscreteClustering& u, const DiscreteClustering& v);
/// I(U;V) / mean(H(U), H(V)); 1 when both entropies are zero.
double nmi(const DiscreteClustering& u, const DiscreteClustering& v);

/// 10 log10(max^2 / MSE), capped at 120 dB once MSE < 1e-12.
double psnr(const Tensor& a, const Tensor& b, double max_value = 1.0);

inline constexpr std::size_t kDefaultNmiLevels = 8;

}  // namespace privlab
