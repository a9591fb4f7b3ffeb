#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "privlab/model.hpp"
#include "privlab/tensor.hpp"

namespace privlab {

/// Binary keep (1) / prune (0) pattern over a flat ParamVector.
struct Mask {
  std::vector<std::uint8_t> bits;
  double rate = 0.0;

  static Mask ones(std::size_t d) { return Mask{std::vector<std::uint8_t>(d, 1), 0.0}; }
  std::size_t size() const noexcept { return bits.size(); }
  std::size_t zero_count() const noexcept;
  /// Recompute `rate` from the bits.
  void refresh_rate();
  friend bool operator==(const Mask&, const Mask&) = default;
};

enum class PolicyKind { Random, Magnitude, Snip, SynFlow, GraSP, FedDstLike, PruneFlLike };

PolicyKind parse_policy_kind(std::string_view tag);
std::string_view policy_name(PolicyKind kind);
/// Snip, GraSP, FedDstLike and PruneFlLike need a probe batch.
bool needs_probe(PolicyKind kind);
/// Snip, SynFlow and GraSP compute their mask once at round 0.
bool is_one_shot(PolicyKind kind);

struct PruningPolicy {
  PolicyKind kind = PolicyKind::Random;
  std::uint64_t seed = 0;            ///< Random scores
  std::size_t synflow_rounds = 5;
  double target_rate = 0.0;          ///< SynFlow prunes towards this rate between its rounds
  std::size_t reconfigure_every = 10;  ///< rounds between server-side mask updates
  double regrow_fraction = 0.05;     ///< FedDstLike
  double importance_decay = 0.9;     ///< PruneFlLike

  void validate() const;
};

/// Running mean of squared gradients used by PruneFlLike.
struct ImportanceTracker {
  double decay = 0.9;
  std::vector<double> importance;

  void update(const ParamVector& grad);
};

/// Importance scores, higher = keep. The final classifier bias always scores +inf.
/// `importance` feeds PruneFlLike; without it the squared probe gradient is used.
ParamVector score(const PruningPolicy& policy, const ModelSpec& spec, const ParamVector& params,
                  const Tensor& probe_batch, const std::vector<int>& probe_labels,
                  const std::vector<double>* importance = nullptr);

/// Exactly round(p * d) zeros on the lowest scores; ties prune the lowest index first.
Mask make_mask(const ParamVector& scores, double rate);
Mask make_mask(const std::vector<double>& scores, double rate);

/// score followed by make_mask (SynFlow uses `rate` as its iterative target).
Mask compute_mask(PruningPolicy policy, const ModelSpec& spec, const ParamVector& params,
                  const Tensor& probe_batch, const std::vector<int>& probe_labels, double rate,
                  const std::vector<double>* importance = nullptr);

ParamVector apply(const ParamVector& params, const Mask& mask);
/// Elementwise minimum of two masks.
Mask intersect(const Mask& a, const Mask& b);

/// Prune the round(fraction * d) lowest-scoring kept entries and revive the same number of
/// highest-scoring pruned entries. Sparsity is unchanged.
Mask regrow(const Mask& mask, const std::vector<double>& scores, double fraction);

// Mask file: "PFLM", u64 d, f64 rate, u8 first bit, u64 run count, u64 run lengths.
void write_mask(std::ostream& out, const Mask& mask);
Mask read_mask(std::istream& in);
/// `index,bit` rows with a header line.
void write_mask_csv(std::ostream& out, const Mask& mask);

}  // namespace privlab
