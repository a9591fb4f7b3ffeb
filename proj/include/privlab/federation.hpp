#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "privlab/attack.hpp"
#include "privlab/client.hpp"
#include "privlab/data.hpp"
#include "privlab/defense.hpp"
#include "privlab/model.hpp"
#include "privlab/pruning.hpp"

namespace privlab {

/// Everything a run needs besides its configuration. The probe set is public server data.
struct FederationData {
  std::vector<Dataset> shards;
  Dataset probe;
  Dataset test;
};

/// When and whom the server attacks.
struct AttackSchedule {
  AttackPlan plan;
  std::size_t target = 0;
  std::size_t first_round = 1;
  std::size_t max_attacks = 1;
  ScoreOptions scoring;
};

struct AttackRecord {
  std::size_t client = 0;
  Tensor truth;
  AttackResult result;
  ReconstructionScore score;
};

struct ClientUpdate {
  std::size_t client = 0;
  std::size_t shard_size = 0;
  ParamVector wire;
  Mask mask;                 ///< base mask AND defense mask
  double defense_rate = 0.0;
  double mean_alpha = 0.0;
  double accuracy_loss = 0.0;  ///< PriPrune loss components of the last local step
  double privacy_loss = 0.0;
  double share_penalty = 0.0;
};

struct RoundRecord {
  std::size_t round = 0;                  ///< 1-based
  std::vector<std::size_t> participants;
  std::vector<ClientUpdate> updates;
  ParamVector global;                     ///< after aggregation
  double server_mask_rate = 0.0;
  std::optional<AttackRecord> attack;
  double accuracy = 0.0;                  ///< NaN on rounds that were not evaluated
  double nmi = 0.0;                       ///< NaN without an attack this round
  double psnr = 0.0;
  double defense_rate = 0.0;              ///< mean over participants, like the fields below
  double mean_alpha = 0.0;
  double accuracy_loss = 0.0;
  double privacy_loss = 0.0;
  double share_penalty = 0.0;
};

struct RunOptions {
  std::size_t eval_every = 0;   ///< 0: evaluate the final round only
  bool keep_updates = true;     ///< store wire vectors in the records
  std::function<void(const RoundRecord&)> on_round;
};

/// Dataset-size weighted mean of the updates, then masked.
ParamVector aggregate(const std::vector<std::pair<ParamVector, std::size_t>>& updates, const Mask& mask);

/// Server side of the protocol: it only ever sees updates, shard sizes and the public probe set.
class Server {
 public:
  Server(ModelSpec spec, FedConfig config, Dataset probe);

  /// Round-0 mask from the initial model.
  void initialize(const ParamVector& initial);
  const Mask& mask() const noexcept { return mask_; }
  /// Aggregates, updates policy state, and returns the new global model.
  ParamVector finish_round(std::size_t round, const ParamVector& previous,
                           const std::vector<std::pair<ParamVector, std::size_t>>& updates);

 private:
  bool reconfigures() const;
  Mask recompute(const ParamVector& global);

  ModelSpec spec_;
  FedConfig config_;
  Dataset probe_;
  Mask mask_;
  ImportanceTracker importance_;
};

/// Clients chosen for a round: C of N without replacement, ascending.
std::vector<std::size_t> select_clients(const FedConfig& config, std::size_t round);

/// Mean accuracy over clients of the model each would use: global plus its stash.
double client_accuracy(const ModelSpec& spec, const ParamVector& global,
                       const std::vector<ClientState>& clients, const Dataset& test);

std::vector<RoundRecord> run(const ModelSpec& spec, const FedConfig& config, const FederationData& data,
                             const DefensePlan* defense, const AttackSchedule* attack,
                             const RunOptions& options = {});

}  // namespace privlab
