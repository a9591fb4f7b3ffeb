#include "privlab/federation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "privlab/error.hpp"
#include "privlab/random.hpp"

namespace privlab {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

ParamVector aggregate(const std::vector<std::pair<ParamVector, std::size_t>>& updates, const Mask& mask) {
  if (updates.empty()) throw ProtocolError("aggregate called with no updates");
  const std::size_t d = updates.front().first.size();
  double total = 0.0;
  for (const auto& [u, n] : updates) {
    if (u.size() != d) throw ValidationError("aggregate: updates differ in length");
    total += static_cast<double>(n);
  }
  if (!(total > 0.0)) throw ProtocolError("aggregate: all shard sizes are zero");
  if (mask.size() != d) throw ValidationError("aggregate: mask length mismatch");
  std::vector<double> out(d, 0.0);
  for (const auto& [u, n] : updates) {
    const double weight = static_cast<double>(n) / total;
    for (std::size_t j = 0; j < d; ++j) out[j] += weight * u[j];
  }
  for (std::size_t j = 0; j < d; ++j)
    if (!mask.bits[j]) out[j] = 0.0;
  return updates.front().first.with_values(std::move(out));
}

Server::Server(ModelSpec spec, FedConfig config, Dataset probe)
    : spec_(std::move(spec)), config_(std::move(config)), probe_(std::move(probe)) {
  importance_.decay = config_.policy.importance_decay;
}

void Server::initialize(const ParamVector& initial) {
  ServerScope scope;
  mask_ = recompute(initial);
}

bool Server::reconfigures() const {
  switch (config_.mask_schedule) {
    case MaskSchedule::Fixed: return false;
    case MaskSchedule::Recompute: return true;
    case MaskSchedule::Auto: return !is_one_shot(config_.policy.kind);
  }
  return false;
}

Mask Server::recompute(const ParamVector& global) {
  PruningPolicy policy = config_.policy;
  const std::vector<double>* imp = importance_.importance.empty() ? nullptr : &importance_.importance;
  if (policy.kind == PolicyKind::FedDstLike && mask_.size() == global.size()) {
    const auto s = score(policy, spec_, global, probe_.samples, probe_.labels);
    const double room = std::min(mask_.rate, 1.0 - mask_.rate);
    return regrow(mask_, s.values(), std::min(policy.regrow_fraction, room));
  }
  return compute_mask(policy, spec_, global, probe_.samples, probe_.labels, config_.prune_rate, imp);
}

ParamVector Server::finish_round(std::size_t round, const ParamVector& previous,
                                 const std::vector<std::pair<ParamVector, std::size_t>>& updates) {
  ServerScope scope;
  ParamVector next = aggregate(updates, mask_);
  if (config_.policy.kind == PolicyKind::PruneFlLike) {
    // Server-side gradient proxy from consecutive global models.
    std::vector<double> g(next.size());
    for (std::size_t j = 0; j < g.size(); ++j) g[j] = (previous[j] - next[j]) / config_.lr;
    importance_.update(next.with_values(std::move(g)));
  }
  if (reconfigures() && round % config_.policy.reconfigure_every == 0 && round < config_.rounds) {
    // Random masks draw fresh scores on each reconfiguration.
    if (config_.policy.kind == PolicyKind::Random) {
      config_.policy.seed = derive_seed(config_.policy.seed, {round});
    }
    mask_ = recompute(next);
    next = apply(next, mask_);
  }
  return next;
}

std::vector<std::size_t> select_clients(const FedConfig& config, std::size_t round) {
  std::vector<std::size_t> ids(config.clients);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(derive_seed(config.seed, {0x5e1, round}));
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(config.per_round);
  std::sort(ids.begin(), ids.end());
  return ids;
}

double client_accuracy(const ModelSpec& spec, const ParamVector& global,
                       const std::vector<ClientState>& clients, const Dataset& test) {
  bool any_stash = false;
  for (const auto& c : clients) any_stash = any_stash || !c.stash.empty();
  if (!any_stash) return evaluate(spec, global, test);
  double sum = 0.0;
  for (const auto& c : clients) sum += evaluate(spec, pseudo_prune_load(global, c.stash), test);
  return sum / static_cast<double>(clients.size());
}

std::vector<RoundRecord> run(const ModelSpec& spec, const FedConfig& config, const FederationData& data,
                             const DefensePlan* defense, const AttackSchedule* attack,
                             const RunOptions& options) {
  config.validate();
  spec.validate();
  if (data.shards.size() != config.clients) {
    throw ConfigError("config has " + std::to_string(config.clients) + " clients but data has " +
                      std::to_string(data.shards.size()) + " shards");
  }
  if (defense) defense->validate();
  if (attack) {
    attack->plan.validate();
    if (attack->target >= config.clients) throw ConfigError("attack target is not a client");
  }
  const DefensePlan none;
  const DefensePlan& plan = defense ? *defense : none;

  std::vector<ClientState> clients(config.clients);
  for (std::size_t i = 0; i < config.clients; ++i) {
    clients[i].id = i;
    clients[i].shard = ShardView(data.shards[i]);
  }
  ParamVector global = init_params(spec);
  Server server(spec, config, data.probe);
  server.initialize(global);
  global = apply(global, server.mask());

  std::vector<RoundRecord> records;
  std::size_t attacks_done = 0;
  for (std::size_t t = 1; t <= config.rounds; ++t) {
    RoundRecord rec;
    rec.round = t;
    rec.participants = select_clients(config, t);
    rec.accuracy = rec.nmi = rec.psnr = kNaN;
    const Mask base = server.mask();
    std::vector<std::pair<ParamVector, std::size_t>> received;
    for (std::size_t id : rec.participants) {
      ClientState& client = clients[id];
      DefenseOutcome out;
      try {
        out = defended_update(client, global, base, plan, spec, config, t);
      } catch (const Error& e) {
        throw Error("round " + std::to_string(t) + ", client " + std::to_string(id) + ": " + e.what());
      }
      received.emplace_back(out.wire, client.shard.size());

      if (attack && id == attack->target && t >= attack->first_round && attacks_done < attack->max_attacks &&
          !out.first_batch.empty()) {
        // The server sees only `out.wire` and its own broadcast model; the harness reads the
        // true batch solely to score the reconstruction.
        AttackPlan ap = attack->plan;
        ap.seed = derive_seed(attack->plan.seed, {t});
        AttackRecord ar;
        ar.client = id;
        {
          ServerScope scope;
          ar.result = invert(spec, out.wire, global, out.first_batch.size(), ap);
        }
        ar.truth = client.shard.data().subset(out.first_batch).samples;
        ar.score = score_reconstruction(ar.truth, ar.result.batch, attack->scoring);
        rec.nmi = ar.score.nmi;
        rec.psnr = ar.score.psnr;
        rec.attack = std::move(ar);
        ++attacks_done;
      }

      ClientUpdate cu;
      cu.client = id;
      cu.shard_size = client.shard.size();
      cu.mask = intersect(base, out.defense_mask);
      cu.defense_rate = out.defense_rate;
      cu.mean_alpha = out.mean_alpha;
      cu.accuracy_loss = out.accuracy_loss;
      cu.privacy_loss = out.privacy_loss;
      cu.share_penalty = out.share_penalty;
      if (options.keep_updates) cu.wire = out.wire;
      rec.updates.push_back(std::move(cu));
    }
    const double count = static_cast<double>(rec.updates.size());
    for (const auto& u : rec.updates) {
      rec.defense_rate += u.defense_rate / count;
      rec.mean_alpha += u.mean_alpha / count;
      rec.accuracy_loss += u.accuracy_loss / count;
      rec.privacy_loss += u.privacy_loss / count;
      rec.share_penalty += u.share_penalty / count;
    }
    global = server.finish_round(t, global, received);
    rec.server_mask_rate = server.mask().rate;
    const bool evaluate_now = t == config.rounds || (options.eval_every > 0 && t % options.eval_every == 0);
    if (evaluate_now && data.test.size() > 0) rec.accuracy = client_accuracy(spec, global, clients, data.test);
    rec.global = global;
    if (options.on_round) options.on_round(rec);
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace privlab
