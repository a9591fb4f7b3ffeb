#include "privlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "privlab/error.hpp"
#include "privlab/log.hpp"

namespace privlab {

DiscreteClustering DiscreteClustering::from_assignments(std::vector<std::size_t> assignments) {
  DiscreteClustering c;
  std::size_t k = 0;
  for (auto a : assignments) k = std::max(k, a + 1);
  c.sizes.assign(k, 0);
  for (auto a : assignments) ++c.sizes[a];
  c.assignments = std::move(assignments);
  return c;
}

DiscreteClustering discretize(const Tensor& image, std::size_t levels) {
  if (levels < 2) throw ValidationError("discretize needs at least 2 levels");
  std::vector<std::size_t> bins(image.size());
  std::size_t clamped = 0;
  for (std::size_t i = 0; i < image.size(); ++i) {
    double v = image[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      ++clamped;
      v = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
    }
    const auto bin = static_cast<std::size_t>(std::floor(v * static_cast<double>(levels)));
    bins[i] = std::min(bin, levels - 1);
  }
  if (clamped > 0) {
    log::debug("discretize clamped " + std::to_string(clamped) + " values into [0, 1]");
  }
  return DiscreteClustering::from_assignments(std::move(bins));
}

double entropy(const DiscreteClustering& u) {
  const double n = static_cast<double>(u.size());
  double h = 0.0;
  for (auto s : u.sizes) {
    if (s == 0) continue;
    const double p = static_cast<double>(s) / n;
    h -= p * std::log(p);
  }
  return h;
}

double mutual_information(const DiscreteClustering& u, const DiscreteClustering& v) {
  if (u.size() != v.size()) {
    throw ValidationError("clusterings have different element counts (" +
                          std::to_string(u.size()) + " vs " + std::to_string(v.size()) + ")");
  }
  const std::size_t ku = u.sizes.size(), kv = v.sizes.size();
  std::vector<std::size_t> table(ku * kv, 0);
  for (std::size_t i = 0; i < u.size(); ++i) ++table[u.assignments[i] * kv + v.assignments[i]];
  const double n = static_cast<double>(u.size());
  // Terms are summed in sorted order so that swapping u and v gives a bit-identical result.
  std::vector<double> terms;
  for (std::size_t a = 0; a < ku; ++a) {
    for (std::size_t b = 0; b < kv; ++b) {
      const std::size_t nab = table[a * kv + b];
      if (nab == 0) continue;
      const double cell = static_cast<double>(nab);
      terms.push_back(cell / n * std::log(n * cell / (static_cast<double>(u.sizes[a]) *
                                                       static_cast<double>(v.sizes[b]))));
    }
  }
  std::sort(terms.begin(), terms.end());
  double mi = 0.0;
  for (double t : terms) mi += t;
  return mi;
}

namespace {

// True when u and v are the same partition up to relabeling (a bijection between used ids).
bool same_partition(const DiscreteClustering& u, const DiscreteClustering& v) {
  constexpr auto unset = static_cast<std::size_t>(-1);
  std::vector<std::size_t> fwd(u.sizes.size(), unset), back(v.sizes.size(), unset);
  for (std::size_t i = 0; i < u.size(); ++i) {
    const auto a = u.assignments[i], b = v.assignments[i];
    if (fwd[a] == unset && back[b] == unset) {
      fwd[a] = b;
      back[b] = a;
    } else if (fwd[a] != b || back[b] != a) {
      return false;
    }
  }
  return true;
}

}  // namespace

double nmi(const DiscreteClustering& u, const DiscreteClustering& v) {
  const double mi = mutual_information(u, v);
  const double hu = entropy(u), hv = entropy(v);
  if (hu == 0.0 && hv == 0.0) return 1.0;
  // Exactly 1 for matching partitions; the term-by-term sums otherwise land an ulp either side.
  if (same_partition(u, v)) return 1.0;
  return std::clamp(mi / (0.5 * (hu + hv)), 0.0, 1.0);
}

double psnr(const Tensor& a, const Tensor& b, double max_value) {
  if (a.shape() != b.shape()) throw ValidationError("psnr: shape mismatch");
  if (a.size() == 0) throw ValidationError("psnr of empty tensors");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
  mse /= static_cast<double>(a.size());
  if (mse < 1e-12) return 120.0;
  return std::min(120.0, 10.0 * std::log10(max_value * max_value / mse));
}

}  // namespace privlab
