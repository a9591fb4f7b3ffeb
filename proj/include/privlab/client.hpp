#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "privlab/data.hpp"
#include "privlab/model.hpp"
#include "privlab/pruning.hpp"

namespace privlab {

/// Which rounds the server recomputes its base mask in.
enum class MaskSchedule {
  Auto,        ///< fixed for one-shot policies, every reconfigure_every rounds otherwise
  Fixed,       ///< computed once at round 0
  Recompute,   ///< every reconfigure_every rounds, whatever the policy
};
MaskSchedule parse_mask_schedule(std::string_view tag);

struct FedConfig {
  std::size_t rounds = 200;       ///< T
  std::size_t clients = 8;        ///< N
  std::size_t per_round = 4;      ///< C
  std::size_t local_epochs = 1;   ///< E
  std::size_t batch = 8;          ///< B
  std::size_t local_steps = 0;    ///< cap on SGD steps per round; 0 = E full passes
  double lr = 0.25;               ///< r
  double prune_rate = 0.3;        ///< p
  PruningPolicy policy;
  MaskSchedule mask_schedule = MaskSchedule::Auto;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Read-only handle on a client's shard. Reads made while a ServerScope is alive are
/// counted as protocol violations, which lets tests prove the server never touches data.
class ShardView {
 public:
  ShardView() = default;
  explicit ShardView(const Dataset& data) : data_(&data) {}

  const Dataset& data() const;
  std::size_t size() const noexcept { return data_ ? data_->size() : 0; }

  static std::size_t server_reads() noexcept;
  static void reset_server_reads() noexcept;

 private:
  const Dataset* data_ = nullptr;
};

/// Marks the current thread as executing server code for the scope's lifetime.
class ServerScope {
 public:
  ServerScope();
  ~ServerScope();
  ServerScope(const ServerScope&) = delete;
  ServerScope& operator=(const ServerScope&) = delete;

 private:
  bool previous_;
};

/// Withheld weights kept on the client: values already multiplied by `withheld`.
struct Stash {
  std::vector<double> values;
  Mask withheld;

  bool empty() const noexcept { return withheld.bits.empty(); }
};

struct ClientState {
  std::size_t id = 0;
  ShardView shard;
  ParamVector local;            ///< model after the client's last local training (may be empty)
  Stash stash;                  ///< pseudo-pruned weights (may be empty)
  std::vector<double> alpha;    ///< PriPrune withhold probabilities (may be empty)
};

/// Minibatches (as shard indices) for one client in one round, in execution order.
std::vector<std::vector<std::size_t>> batch_schedule(std::size_t shard_size, const FedConfig& config,
                                                     std::size_t round, std::size_t client_id);

struct LocalResult {
  ParamVector params;
  std::vector<std::size_t> first_batch;  ///< shard indices used by the first step
  std::size_t steps = 0;
  bool skipped = false;                  ///< empty shard
};

/// Masked mini-batch SGD: w <- (w - r * grad(loss(w * m))) * m, starting from start * m.
LocalResult local_update(const ClientState& client, const ModelSpec& spec, const ParamVector& start,
                         const Mask& mask, const FedConfig& config, std::size_t round);

/// Fraction of argmax-correct predictions; ties go to the lowest class id.
double evaluate(const ModelSpec& spec, const ParamVector& params, const Dataset& ds);

}  // namespace privlab
