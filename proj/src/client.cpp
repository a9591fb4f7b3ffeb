#include "privlab/client.hpp"

#include <algorithm>
#include <numeric>

#include "privlab/error.hpp"
#include "privlab/random.hpp"

namespace privlab {

namespace {

thread_local bool t_in_server = false;
std::atomic<std::size_t> g_server_reads{0};

}  // namespace

MaskSchedule parse_mask_schedule(std::string_view tag) {
  if (tag == "auto") return MaskSchedule::Auto;
  if (tag == "fixed") return MaskSchedule::Fixed;
  if (tag == "recompute") return MaskSchedule::Recompute;
  throw ConfigError("unknown mask schedule '" + std::string(tag) +
                    "' (expected auto, fixed, recompute)");
}

void FedConfig::validate() const {
  if (rounds < 1) throw ConfigError("rounds must be >= 1");
  if (clients < 1) throw ConfigError("clients must be >= 1");
  if (per_round < 1 || per_round > clients) {
    throw ConfigError("per_round must be in [1, clients], got " + std::to_string(per_round));
  }
  if (local_epochs < 1) throw ConfigError("local_epochs must be >= 1");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (!(prune_rate >= 0.0 && prune_rate < 1.0)) throw ConfigError("prune_rate must be in [0, 1)");
  policy.validate();
}

const Dataset& ShardView::data() const {
  if (t_in_server) g_server_reads.fetch_add(1);
  if (!data_) throw ValidationError("client has no shard");
  return *data_;
}

std::size_t ShardView::server_reads() noexcept { return g_server_reads.load(); }
void ShardView::reset_server_reads() noexcept { g_server_reads.store(0); }

ServerScope::ServerScope() : previous_(t_in_server) { t_in_server = true; }
ServerScope::~ServerScope() { t_in_server = previous_; }

std::vector<std::vector<std::size_t>> batch_schedule(std::size_t shard_size, const FedConfig& config,
                                                     std::size_t round, std::size_t client_id) {
  std::vector<std::vector<std::size_t>> batches;
  if (shard_size == 0) return batches;
  for (std::size_t e = 0; e < config.local_epochs; ++e) {
    std::vector<std::size_t> order(shard_size);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(config.seed, {0xba7c, round, client_id, e}));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < shard_size; i += config.batch) {
      const std::size_t end = std::min(shard_size, i + config.batch);
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                           order.begin() + static_cast<std::ptrdiff_t>(end));
      if (config.local_steps > 0 && batches.size() == config.local_steps) return batches;
    }
  }
  return batches;
}

LocalResult local_update(const ClientState& client, const ModelSpec& spec, const ParamVector& start,
                         const Mask& mask, const FedConfig& config, std::size_t round) {
  if (mask.size() != start.size()) {
    throw ValidationError("local_update: mask has " + std::to_string(mask.size()) +
                          " entries, params have " + std::to_string(start.size()));
  }
  LocalResult result;
  if (client.shard.size() == 0) {
    result.skipped = true;
    return result;
  }
  const Dataset& shard = client.shard.data();
  ParamVector w = apply(start, mask);
  const auto batches = batch_schedule(shard.size(), config, round, client.id);
  for (const auto& idx : batches) {
    const Dataset b = shard.subset(idx);
    const auto lg = loss_and_grad(spec, w, b.samples, b.labels);
    for (std::size_t j = 0; j < w.size(); ++j) {
      w[j] = mask.bits[j] ? w[j] - config.lr * lg.grad[j] : 0.0;
    }
  }
  result.first_batch = batches.front();
  result.steps = batches.size();
  result.params = std::move(w);
  return result;
}

double evaluate(const ModelSpec& spec, const ParamVector& params, const Dataset& ds) {
  if (ds.size() == 0) throw ValidationError("cannot evaluate on an empty dataset");
  const Tensor logits = forward(spec, params, ds.samples);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < ds.size(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c)
      if (logits.at(r, c) > logits.at(r, best)) best = c;
    correct += static_cast<int>(best) == ds.labels[r];
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

}  // namespace privlab
