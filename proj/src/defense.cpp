#include "privlab/defense.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "privlab/error.hpp"
#include "privlab/random.hpp"

namespace privlab {

namespace {

Tensor row_of(const std::vector<double>& v) { return Tensor({1, v.size()}, v); }

// Defense decisions never cover base-pruned entries: those count as shared.
Mask share_base_pruned(const Mask& defense, const Mask& base) {
  Mask out = defense;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!base.bits[i]) out.bits[i] = 1;
  out.refresh_rate();
  return out;
}

double withheld_fraction(const Mask& m) { return m.bits.empty() ? 0.0 : m.rate; }

}  // namespace

DefenseStrategy parse_defense_strategy(std::string_view tag) {
  if (tag == "none") return DefenseStrategy::None;
  if (tag == "largest") return DefenseStrategy::Largest;
  if (tag == "random") return DefenseStrategy::Random;
  if (tag == "mix") return DefenseStrategy::Mix;
  if (tag == "priprune") return DefenseStrategy::PriPrune;
  throw ConfigError("unknown defense strategy '" + std::string(tag) +
                    "' (expected none, largest, random, mix, priprune)");
}

std::string_view defense_name(DefenseStrategy s) {
  switch (s) {
    case DefenseStrategy::None: return "none";
    case DefenseStrategy::Largest: return "largest";
    case DefenseStrategy::Random: return "random";
    case DefenseStrategy::Mix: return "mix";
    case DefenseStrategy::PriPrune: return "priprune";
  }
  return "?";
}

void DefensePlan::validate() const {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("defense rate must be in [0, 1)");
  if (strategy == DefenseStrategy::Mix) {
    if (mix_largest < 0.0 || mix_random < 0.0 || std::abs(mix_largest + mix_random - rate) > 1e-9) {
      throw ConfigError("mix_largest + mix_random must equal the defense rate");
    }
  }
  if (lambda_acc < 0.0 || lambda_pri < 0.0 || lambda_sha < 0.0) {
    throw ConfigError("PriPrune loss weights must be >= 0");
  }
  if (!(temperature > 0.0) || !(temperature_floor > 0.0)) {
    throw ConfigError("Gumbel temperature must be > 0");
  }
  if (!(temperature_decay > 0.0 && temperature_decay <= 1.0)) {
    throw ConfigError("temperature_decay must be in (0, 1]");
  }
  if (!(alpha_init > 0.0 && alpha_init < 1.0)) throw ConfigError("alpha_init must be in (0, 1)");
}

double DefensePlan::temperature_at(std::size_t round) const {
  return std::max(temperature_floor, temperature * std::pow(temperature_decay, static_cast<double>(round)));
}

Mask fixed_mask(DefenseStrategy strategy, const ParamVector& grad, double rate, std::uint64_t seed,
                double largest_share) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ValidationError("defense rate must be in [0, 1)");
  const std::size_t d = grad.size();
  std::vector<double> neg_mag(d);
  for (std::size_t i = 0; i < d; ++i) neg_mag[i] = -std::abs(grad[i]);
  switch (strategy) {
    case DefenseStrategy::None:
      return Mask::ones(d);
    case DefenseStrategy::Largest:
      return make_mask(neg_mag, rate);
    case DefenseStrategy::Random:
    case DefenseStrategy::Mix: {
      const double largest = strategy == DefenseStrategy::Mix ? largest_share : 0.0;
      if (!(largest >= 0.0 && largest <= rate)) {
        throw ValidationError("largest share must lie in [0, rate]");
      }
      Mask m = make_mask(neg_mag, largest);
      const auto total = static_cast<std::size_t>(std::llround(rate * static_cast<double>(d)));
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < d; ++i)
        if (m.bits[i]) rest.push_back(i);
      Rng rng(derive_seed(seed, {0xdef}));
      std::shuffle(rest.begin(), rest.end(), rng);
      const std::size_t extra = total - m.zero_count();
      for (std::size_t i = 0; i < extra; ++i) m.bits[rest[i]] = 0;
      m.refresh_rate();
      return m;
    }
    case DefenseStrategy::PriPrune:
      throw ValidationError("PriPrune masks are learned, not fixed");
  }
  return Mask::ones(d);
}

PseudoPruned pseudo_prune_send(const ParamVector& w, const Mask& defense_mask) {
  if (defense_mask.size() != w.size()) throw ValidationError("pseudo_prune_send: length mismatch");
  PseudoPruned out;
  out.wire = apply(w, defense_mask);
  out.stash.withheld = Mask{std::vector<std::uint8_t>(w.size()), 0.0};
  out.stash.values.assign(w.size(), 0.0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    out.stash.withheld.bits[i] = defense_mask.bits[i] ? 0 : 1;
    out.stash.values[i] = defense_mask.bits[i] ? 0.0 : w[i];
  }
  out.stash.withheld.refresh_rate();
  return out;
}

ParamVector pseudo_prune_load(const ParamVector& global, const Stash& stash) {
  if (stash.empty()) return global;
  if (stash.withheld.size() != global.size() || stash.values.size() != global.size()) {
    throw ValidationError("pseudo_prune_load: stash length mismatch");
  }
  std::vector<double> out(global.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (stash.withheld.bits[i] ? 0.0 : global[i]) + stash.values[i];
  }
  return global.with_values(std::move(out));
}

void MaskDistribution::clamp() {
  for (double& a : alpha) a = std::clamp(a, kMin, kMax);
}

GumbelSample gumbel_sample(const MaskDistribution& dist, double temperature, std::uint64_t seed) {
  if (!(temperature > 0.0)) throw ValidationError("Gumbel temperature must be > 0");
  const std::size_t d = dist.alpha.size();
  GumbelSample s;
  s.noise.resize(d);
  s.withhold.resize(d);
  s.share.resize(d);
  s.hard = Mask{std::vector<std::uint8_t>(d), 0.0};
  Rng rng(derive_seed(seed, {0x6b}));
  for (std::size_t j = 0; j < d; ++j) {
    const double g0 = -std::log(-std::log(uniform_open(rng)));
    const double g1 = -std::log(-std::log(uniform_open(rng)));
    s.noise[j] = g0 - g1;
    // Two-way softmax written as a logistic of the log-odds difference.
    const double a = dist.alpha[j];
    const double z = (std::log(a) - std::log1p(-a) + s.noise[j]) / temperature;
    s.withhold[j] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    s.share[j] = 1.0 - s.withhold[j];
    s.hard.bits[j] = s.share[j] > s.withhold[j] ? 1 : 0;
  }
  s.hard.refresh_rate();
  return s;
}

std::vector<double> privacy_weights(const ParamVector& g) {
  const double total = static_cast<double>(g.size());
  std::vector<double> w(g.size());
  std::size_t offset = 0;
  for (const auto& slot : g.layout()) {
    const auto n = static_cast<std::size_t>(slot.count);
    double mass = 0.0;
    for (std::size_t j = 0; j < n; ++j) mass += std::abs(g[offset + j]);
    const double layer_share = static_cast<double>(n) / total;
    for (std::size_t j = 0; j < n; ++j) {
      const double inner = mass > 0.0 ? std::abs(g[offset + j]) / mass : 1.0 / static_cast<double>(n);
      w[offset + j] = layer_share * inner;
    }
    offset += n;
  }
  return w;
}

PriPruneLoss priprune_loss(const PriPruneInputs& in, const ModelSpec& spec, const Tensor& batch,
                           const std::vector<int>& labels, const DefensePlan& plan,
                           const ParamVector& g) {
  if (!in.source || !in.previous || !in.dist || !in.sample) {
    throw ValidationError("priprune_loss: missing input");
  }
  const ParamVector& src = *in.source;
  const std::size_t d = src.size();
  require_same_length(src, *in.previous, "priprune_loss previous weights");
  require_same_length(src, g, "priprune_loss gradient");
  if (in.dist->alpha.size() != d || in.sample->noise.size() != d) {
    throw ValidationError("priprune_loss: alpha or sample length mismatch");
  }
  for (double a : in.dist->alpha) {
    if (!(a >= MaskDistribution::kMin && a <= MaskDistribution::kMax)) {
      throw ValidationError("priprune_loss: alpha must be clamped first");
    }
  }
  validate_labels(labels, spec.classes, batch.rows());

  using namespace ad;
  Var alpha = variable(row_of(in.dist->alpha));
  Var log_odds = log(alpha) - log(add_scalar(-alpha, 1.0));
  Var z = scale(log_odds + constant(row_of(in.sample->noise)), 1.0 / in.temperature);
  Var v_withhold = sigmoid(z);
  std::vector<double> diff(d);
  for (std::size_t j = 0; j < d; ++j) diff[j] = (*in.previous)[j] - src[j];
  Var composite = constant(row_of(src.values())) + v_withhold * constant(row_of(diff));
  if (in.base_mask) {
    std::vector<double> keep(d);
    for (std::size_t j = 0; j < d; ++j) keep[j] = in.base_mask->bits.at(j) ? 1.0 : 0.0;
    composite = composite * constant(row_of(keep));
  }
  Var acc = softmax_cross_entropy(graph::logits(spec, composite, constant(batch)),
                                  graph::one_hot(labels, spec.classes));
  Var pri = -sum(constant(row_of(privacy_weights(g))) * log(alpha));
  std::vector<double> pick(d, 1.0);
  if (!plan.share_penalty_all) {
    for (std::size_t j = 0; j < d; ++j) pick[j] = in.sample->hard.bits[j] ? 0.0 : 1.0;
  }
  Var sha = sum(alpha * constant(row_of(pick)));
  Var total = scale(acc, plan.lambda_acc) + scale(pri, plan.lambda_pri) + scale(sha, plan.lambda_sha);

  const Var wrt[] = {composite, alpha};
  auto grads = grad(total, wrt);
  PriPruneLoss out;
  out.loss = total.scalar();
  out.accuracy_loss = acc.scalar();
  out.privacy_loss = pri.scalar();
  out.share_penalty = sha.scalar();
  out.composite = src.with_values(composite.value().values());
  out.grad_w = src.with_values(grads[0].value().values());
  out.grad_alpha = grads[1].value().values();
  return out;
}

DefenseOutcome priprune_round(ClientState& client, const ParamVector& global, const Mask& base_mask,
                              const DefensePlan& plan, const ModelSpec& spec, const FedConfig& config,
                              std::size_t round) {
  plan.validate();
  const std::size_t d = global.size();
  if (base_mask.size() != d) throw ValidationError("priprune_round: base mask length mismatch");
  MaskDistribution dist;
  dist.alpha = client.alpha.empty() ? std::vector<double>(d, plan.alpha_init) : client.alpha;
  if (dist.alpha.size() != d) throw ValidationError("priprune_round: alpha length mismatch");
  dist.clamp();

  const ParamVector previous = client.local.size() == d ? client.local : global;
  ParamVector w = apply(global, base_mask);
  const double tau = plan.temperature_at(round);
  DefenseOutcome out;
  const Dataset& shard = client.shard.data();
  const auto batches = batch_schedule(shard.size(), config, round, client.id);
  for (std::size_t s = 0; s < batches.size(); ++s) {
    const Dataset b = shard.subset(batches[s]);
    const auto sample = gumbel_sample(dist, tau, derive_seed(config.seed, {0x9b, round, client.id, s}));
    std::vector<double> comp(d);
    for (std::size_t j = 0; j < d; ++j) {
      comp[j] = base_mask.bits[j] ? w[j] + sample.withhold[j] * (previous[j] - w[j]) : 0.0;
    }
    const auto g = loss_and_grad(spec, global.with_values(comp), b.samples, b.labels).grad;
    PriPruneInputs in{&w, &previous, &dist, &sample, tau, &base_mask};
    const auto loss = priprune_loss(in, spec, b.samples, b.labels, plan, g);
    // d composite / d w = v(share), so the step on w is the composite gradient scaled by it.
    for (std::size_t j = 0; j < d; ++j) {
      w[j] = base_mask.bits[j] ? w[j] - config.lr * sample.share[j] * loss.grad_w[j] : 0.0;
      dist.alpha[j] -= config.lr * loss.grad_alpha[j];
    }
    dist.clamp();
    out.accuracy_loss = loss.accuracy_loss;
    out.privacy_loss = loss.privacy_loss;
    out.share_penalty = loss.share_penalty;
  }
  if (!batches.empty()) out.first_batch = batches.front();

  Mask hat{std::vector<std::uint8_t>(d), 0.0};
  std::size_t withheld = 0;
  for (std::size_t j = 0; j < d; ++j) {
    hat.bits[j] = dist.alpha[j] >= 0.5 ? 0 : 1;  // a tie withholds
    withheld += !hat.bits[j];
  }
  hat.refresh_rate();
  const auto sent = pseudo_prune_send(w, share_base_pruned(hat, base_mask));
  out.wire = sent.wire;
  out.trained = w;
  out.defense_mask = hat;
  out.defense_rate = static_cast<double>(withheld) / static_cast<double>(d);
  out.mean_alpha = std::accumulate(dist.alpha.begin(), dist.alpha.end(), 0.0) / static_cast<double>(d);
  client.alpha = std::move(dist.alpha);
  client.local = w;
  client.stash = sent.stash;
  return out;
}

DefenseOutcome defended_update(ClientState& client, const ParamVector& global, const Mask& base_mask,
                               const DefensePlan& plan, const ModelSpec& spec, const FedConfig& config,
                               std::size_t round) {
  if (plan.strategy == DefenseStrategy::PriPrune) {
    return priprune_round(client, global, base_mask, plan, spec, config, round);
  }
  plan.validate();
  const bool defended = plan.strategy != DefenseStrategy::None;
  const ParamVector start = defended && plan.pseudo ? pseudo_prune_load(global, client.stash) : global;
  auto local = local_update(client, spec, start, base_mask, config, round);
  DefenseOutcome out;
  out.first_batch = local.first_batch;
  if (local.skipped) {
    out.wire = apply(global, base_mask);
    out.trained = out.wire;
    out.defense_mask = Mask::ones(global.size());
    return out;
  }
  out.trained = local.params;
  client.local = local.params;
  if (!defended) {
    out.wire = local.params;
    out.defense_mask = Mask::ones(global.size());
    return out;
  }
  // Accumulated local gradient, read off the displacement of the masked start point.
  const ParamVector begin = apply(start, base_mask);
  std::vector<double> g(begin.size());
  for (std::size_t j = 0; j < g.size(); ++j) g[j] = (begin[j] - local.params[j]) / config.lr;
  out.defense_mask = fixed_mask(plan.strategy, global.with_values(std::move(g)), plan.rate,
                                derive_seed(config.seed, {0xd3f, round, client.id}), plan.mix_largest);
  out.defense_rate = withheld_fraction(out.defense_mask);
  const auto sent = pseudo_prune_send(local.params, share_base_pruned(out.defense_mask, base_mask));
  out.wire = sent.wire;
  client.stash = plan.pseudo ? sent.stash : Stash{};
  return out;
}

}  // namespace privlab
