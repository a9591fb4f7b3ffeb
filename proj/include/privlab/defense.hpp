#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "privlab/client.hpp"
#include "privlab/model.hpp"
#include "privlab/pruning.hpp"

namespace privlab {

enum class DefenseStrategy { None, Largest, Random, Mix, PriPrune };
DefenseStrategy parse_defense_strategy(std::string_view tag);
std::string_view defense_name(DefenseStrategy s);

struct DefensePlan {
  DefenseStrategy strategy = DefenseStrategy::None;
  double rate = 0.0;              ///< p̂ for the fixed strategies
  double mix_largest = 0.0;       ///< Mix: share of p̂ taken by largest gradient
  double mix_random = 0.0;        ///< Mix: share of p̂ drawn at random
  bool pseudo = true;             ///< keep withheld weights locally
  double lambda_acc = 5.0;
  double lambda_pri = 10.0;
  double lambda_sha = 2e-5;
  bool share_penalty_all = false; ///< share penalty over every alpha, not only withheld ones
  double temperature = 1.0;       ///< Gumbel-softmax temperature at round 0
  double temperature_decay = 0.97;
  double temperature_floor = 0.1;
  double alpha_init = 0.1;

  void validate() const;
  /// Temperature annealed per round down to the floor.
  double temperature_at(std::size_t round) const;
};

/// Largest zeros the round(p̂ d) largest-|grad| entries; Random zeros a seeded uniform subset;
/// Mix zeros round(largest_share d) largest entries plus random ones from the rest, p̂ in total.
Mask fixed_mask(DefenseStrategy strategy, const ParamVector& grad, double rate, std::uint64_t seed,
                double largest_share = 0.0);

struct PseudoPruned {
  ParamVector wire;
  Stash stash;
};

/// wire = w * m̂; stash = (w * m̃, m̃) with m̃ the complement of m̂.
PseudoPruned pseudo_prune_send(const ParamVector& w, const Mask& defense_mask);
/// global * m̂ + stash values; an empty stash leaves the global model unchanged.
ParamVector pseudo_prune_load(const ParamVector& global, const Stash& stash);

/// Per-weight probability of withholding, kept inside [1e-6, 1 - 1e-6].
struct MaskDistribution {
  std::vector<double> alpha;

  static constexpr double kMin = 1e-6;
  static constexpr double kMax = 1.0 - 1e-6;
  void clamp();
};

struct GumbelSample {
  std::vector<double> noise;     ///< G(withhold) - G(share)
  std::vector<double> withhold;  ///< v(0)
  std::vector<double> share;     ///< v(1)
  Mask hard;                     ///< 1 iff v(share) > v(withhold)
};

GumbelSample gumbel_sample(const MaskDistribution& dist, double temperature, std::uint64_t seed);

/// One evaluation of the PriPrune objective at a soft composite of two parameter vectors.
struct PriPruneInputs {
  const ParamVector* source = nullptr;    ///< weights used where the mask shares
  const ParamVector* previous = nullptr;  ///< weights used where the mask withholds
  const MaskDistribution* dist = nullptr;
  const GumbelSample* sample = nullptr;
  double temperature = 1.0;
  const Mask* base_mask = nullptr;        ///< optional; applied to the composite
};

struct PriPruneLoss {
  double loss = 0.0;
  double accuracy_loss = 0.0;
  double privacy_loss = 0.0;
  double share_penalty = 0.0;
  ParamVector composite;       ///< the soft-composited parameters
  ParamVector grad_w;          ///< d loss / d composite
  std::vector<double> grad_alpha;
};

/// Privacy weights: (N_l / sum N) * |g_j| / sum_{j in l} |g_j|, uniform inside a zero-gradient layer.
std::vector<double> privacy_weights(const ParamVector& g);

PriPruneLoss priprune_loss(const PriPruneInputs& in, const ModelSpec& spec, const Tensor& batch,
                           const std::vector<int>& labels, const DefensePlan& plan,
                           const ParamVector& g);

struct DefenseOutcome {
  ParamVector wire;
  ParamVector trained;          ///< full locally trained model
  Mask defense_mask;            ///< m̂, all ones when no defense
  double defense_rate = 0.0;    ///< fraction withheld by the defense
  double mean_alpha = 0.0;      ///< PriPrune only
  double accuracy_loss = 0.0;   ///< PriPrune loss components of the last step
  double privacy_loss = 0.0;
  double share_penalty = 0.0;
  std::vector<std::size_t> first_batch;
};

/// One round of PriPrune on a client: per local step sample a mask, composite, step w and alpha;
/// then withhold every weight with alpha >= 0.5. Updates client.alpha, client.local, client.stash.
DefenseOutcome priprune_round(ClientState& client, const ParamVector& global, const Mask& base_mask,
                              const DefensePlan& plan, const ModelSpec& spec, const FedConfig& config,
                              std::size_t round);

/// Full client step for any strategy: local training (with stash restore when pseudo-pruning),
/// then the defense mask on the wire. Updates the client state.
DefenseOutcome defended_update(ClientState& client, const ParamVector& global, const Mask& base_mask,
                               const DefensePlan& plan, const ModelSpec& spec, const FedConfig& config,
                               std::size_t round);

}  // namespace privlab
