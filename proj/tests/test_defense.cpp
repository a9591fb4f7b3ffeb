#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "privlab/defense.hpp"
#include "privlab/federation.hpp"
#include "privlab/error.hpp"
#include "privlab/random.hpp"

using namespace privlab;

namespace {

ParamVector flat(std::vector<double> v) {
  const auto n = v.size();
  return ParamVector({LayerSlot{0, n}}, std::move(v));
}

Mask bits(std::vector<std::uint8_t> b) {
  Mask m{std::move(b), 0.0};
  m.refresh_rate();
  return m;
}

}  // namespace

TEST_CASE("fixed_mask examples") {
  auto g = flat({9, -1, 5, 3});
  CHECK(fixed_mask(DefenseStrategy::Largest, g, 0.0, 1).bits == std::vector<std::uint8_t>{1, 1, 1, 1});
  CHECK(fixed_mask(DefenseStrategy::Random, g, 0.0, 1).bits == std::vector<std::uint8_t>{1, 1, 1, 1});
  CHECK(fixed_mask(DefenseStrategy::Largest, g, 0.5, 1).bits == std::vector<std::uint8_t>{0, 1, 0, 1});
  CHECK(fixed_mask(DefenseStrategy::Random, g, 0.5, 7).zero_count() == 2);
  CHECK_THROWS_AS(fixed_mask(DefenseStrategy::PriPrune, g, 0.5, 1), ValidationError);
}

TEST_CASE("Mix splits zeros between largest and random, disjointly") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n;
    std::vector<double> v(8);
    for (double& x : v) x = n(rng);
    auto g = flat(v);
    auto m = fixed_mask(DefenseStrategy::Mix, g, 0.5, seed, 0.25);
    REQUIRE(m.zero_count() == 4);
    // The two largest magnitudes are the largest-based zeros.
    std::vector<std::size_t> order(8);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return std::abs(v[a]) > std::abs(v[b]); });
    CHECK(m.bits[order[0]] == 0);
    CHECK(m.bits[order[1]] == 0);
    // The other two zeros are among the remaining six.
    std::size_t others = 0;
    for (std::size_t k = 2; k < 8; ++k) others += m.bits[order[k]] == 0;
    CHECK(others == 2);
  }
  DefensePlan p;
  p.strategy = DefenseStrategy::Mix;
  p.rate = 0.3;
  p.mix_largest = 0.1;
  p.mix_random = 0.1;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p.mix_random = 0.2;
  CHECK_NOTHROW(p.validate());
}

TEST_CASE("pseudo-pruning examples") {
  auto w = flat({2, 4});
  auto all = pseudo_prune_send(w, Mask::ones(2));
  CHECK(all.wire == w);
  CHECK(all.stash.withheld.zero_count() == 2);
  CHECK(all.stash.values == std::vector<double>{0, 0});

  auto s = pseudo_prune_send(w, bits({1, 0}));
  CHECK(s.wire.values() == std::vector<double>{2, 0});
  CHECK(s.stash.values == std::vector<double>{0, 4});

  auto g = flat({9, 9});
  CHECK(pseudo_prune_load(g, Stash{}) == g);
  CHECK(pseudo_prune_load(g, Stash{{0, 4}, bits({0, 1})}).values() == std::vector<double>{9, 4});
  CHECK(pseudo_prune_load(g, all.stash) == g);
}

TEST_CASE("pseudo-pruning complementarity and single-client round trip") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t d = 1 + rng() % 40;
    std::vector<double> v(d);
    std::vector<std::uint8_t> b(d);
    for (std::size_t j = 0; j < d; ++j) {
      v[j] = n(rng);
      b[j] = rng() % 2;
    }
    auto w = flat(v);
    auto sent = pseudo_prune_send(w, bits(b));
    for (std::size_t j = 0; j < d; ++j) {
      REQUIRE(sent.wire[j] * static_cast<double>(sent.stash.withheld.bits[j]) == 0.0);
      REQUIRE(sent.wire[j] + sent.stash.values[j] == w[j]);
      REQUIRE(sent.stash.withheld.bits[j] == 1 - b[j]);
    }
    auto global = aggregate({{sent.wire, 1 + rng() % 9}}, Mask::ones(d));
    REQUIRE(pseudo_prune_load(global, sent.stash) == w);
  }
}

TEST_CASE("gumbel_sample normalization and Monte Carlo frequencies") {
  MaskDistribution half{std::vector<double>(10000, 0.5)};
  auto s = gumbel_sample(half, 1.0, 3);
  std::size_t withheld = 0;
  for (std::size_t j = 0; j < 10000; ++j) {
    CHECK(s.withhold[j] + s.share[j] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(s.withhold[j] > 0.0);
    CHECK(s.withhold[j] < 1.0);
    withheld += s.hard.bits[j] == 0;
  }
  const double freq = static_cast<double>(withheld) / 10000.0;
  CHECK(freq >= 0.47);
  CHECK(freq <= 0.53);

  MaskDistribution high{std::vector<double>(10000, 0.999)};
  auto c = gumbel_sample(high, 0.01, 4);
  std::size_t confident = 0;
  for (double v : c.withhold) confident += v >= 0.99;
  CHECK(static_cast<double>(confident) / 10000.0 >= 0.99);

  // Gumbel-argmax property at a skewed alpha.
  MaskDistribution skew{std::vector<double>(20000, 0.2)};
  auto k = gumbel_sample(skew, 0.5, 5);
  CHECK(static_cast<double>(k.hard.zero_count()) / 20000.0 == doctest::Approx(0.2).epsilon(0.05));
  CHECK(gumbel_sample(skew, 0.5, 5).noise == k.noise);
}

TEST_CASE("privacy weights are normalized per layer") {
  auto spec = ModelSpec::mlp(3, {4}, 2);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  ParamVector g(spec.layout());
  for (double& x : g.values()) x = n(rng);
  g[0] = 0.0;
  for (std::size_t j = g.slot_offset(1); j < g.size(); ++j) g[j] = 0.0;  // zero output layer
  auto w = privacy_weights(g);
  std::size_t off = 0;
  for (const auto& slot : g.layout()) {
    double sum = 0.0;
    for (std::size_t j = 0; j < slot.count; ++j) sum += w[off + j];
    const double share = static_cast<double>(slot.count) / static_cast<double>(g.size());
    CHECK(std::abs(sum - share) < 1e-12);
    off += slot.count;
  }
  const std::size_t last = g.slot_offset(1);
  for (std::size_t j = last; j < g.size(); ++j) CHECK(w[j] == w[last]);
  CHECK(w[0] == 0.0);
}

TEST_CASE("privacy loss hand example and alpha gradient") {
  auto spec = ModelSpec::mlp(1, {}, 1);  // one layer: a weight and a bias
  ParamVector g({LayerSlot{0, 2}}, {3, 1});
  auto w = privacy_weights(g);
  CHECK(w[0] == doctest::Approx(0.75));
  CHECK(w[1] == doctest::Approx(0.25));

  ParamVector src = g.with_values({0.3, -0.2});
  MaskDistribution dist{{0.5, 0.5}};
  auto sample = gumbel_sample(dist, 1.0, 9);
  DefensePlan plan;
  plan.lambda_acc = 0.0;
  plan.lambda_pri = 1.0;
  plan.lambda_sha = 0.0;
  Tensor x({1, 1}, std::vector<double>{0.5});
  PriPruneInputs in{&src, &src, &dist, &sample, 1.0, nullptr};
  auto l = priprune_loss(in, spec, x, {0}, plan, g);
  CHECK(l.privacy_loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(l.loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(l.grad_alpha[0] == doctest::Approx(-0.75 / 0.5).epsilon(1e-12));
  CHECK(l.grad_alpha[1] == doctest::Approx(-0.25 / 0.5).epsilon(1e-12));
}

TEST_CASE("priprune_loss gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    auto prob = oracle::random_problem(seed, 3);
    const auto& spec = prob.spec;
    const std::size_t d = prob.params.size();
    std::mt19937_64 rng(seed + 100);
    std::uniform_real_distribution<double> u(0.1, 0.9);
    std::normal_distribution<double> n(0.0, 0.3);
    ParamVector prev = prob.params;
    for (double& v : prev.values()) v += n(rng);
    MaskDistribution dist;
    for (std::size_t j = 0; j < d; ++j) dist.alpha.push_back(u(rng));
    auto sample = gumbel_sample(dist, 0.7, seed);
    auto g = loss_and_grad(spec, prob.params, prob.batch, prob.labels).grad;
    DefensePlan plan;
    plan.lambda_acc = 1.5;
    plan.lambda_pri = 2.0;
    plan.lambda_sha = 0.3;

    auto eval_alpha = [&](const std::vector<double>& a) {
      MaskDistribution m{a};
      PriPruneInputs in{&prob.params, &prev, &m, &sample, 0.7, nullptr};
      return priprune_loss(in, spec, prob.batch, prob.labels, plan, g).loss;
    };
    PriPruneInputs in{&prob.params, &prev, &dist, &sample, 0.7, nullptr};
    auto l = priprune_loss(in, spec, prob.batch, prob.labels, plan, g);
    auto fd = oracle::fd_gradient(eval_alpha, dist.alpha, 1e-6);
    for (std::size_t j = 0; j < d; ++j) CHECK(oracle::rel_err(l.grad_alpha[j], fd[j], 1e-4) < 1e-5);

    // grad_w is the gradient with respect to the composite: the accuracy term alone.
    auto eval_w = [&](const std::vector<double>& c) {
      return plan.lambda_acc * oracle::mlp_loss(spec, c, prob.batch, prob.labels);
    };
    auto fdw = oracle::fd_gradient(eval_w, l.composite.values(), 1e-6);
    for (std::size_t j = 0; j < d; ++j) CHECK(oracle::rel_err(l.grad_w[j], fdw[j], 1e-4) < 1e-5);
  }
}

TEST_CASE("term isolation: only the accuracy loss") {
  auto prob = oracle::random_problem(21, 2);
  const std::size_t d = prob.params.size();
  MaskDistribution dist{std::vector<double>(d, 0.3)};
  auto sample = gumbel_sample(dist, 1.0, 1);
  DefensePlan plan;
  plan.lambda_pri = 0.0;
  plan.lambda_sha = 0.0;
  auto g = loss_and_grad(prob.spec, prob.params, prob.batch, prob.labels);
  PriPruneInputs in{&prob.params, &prob.params, &dist, &sample, 1.0, nullptr};
  auto l = priprune_loss(in, prob.spec, prob.batch, prob.labels, plan, g.grad);
  CHECK(l.loss == doctest::Approx(plan.lambda_acc * g.loss).epsilon(1e-12));
  // With previous == source the composite does not depend on alpha.
  for (double ga : l.grad_alpha) CHECK(std::abs(ga) < 1e-14);
}

namespace {

struct ClientFixture {
  Dataset shard = synth_digits(12, 8, 8, 4);
  ModelSpec spec = ModelSpec::mlp(64, {16}, 4, 5);
  ParamVector global = init_params(spec);
  Mask base;
  FedConfig cfg;
  ClientFixture() {
    base = compute_mask(PruningPolicy{}, spec, global, Tensor(), {}, 0.3);
    global = apply(global, base);
    cfg.local_steps = 4;
  }
  ClientState client() const {
    ClientState c;
    c.id = 1;
    c.shard = ShardView(shard);
    return c;
  }
};

}  // namespace

TEST_CASE("priprune with a tiny alpha behaves like plain local training") {
  ClientFixture f;
  DefensePlan plan;
  plan.strategy = DefenseStrategy::PriPrune;
  plan.alpha_init = 0.01;
  plan.lambda_pri = 0.0;
  plan.lambda_acc = 1.0;
  auto c = f.client();
  auto out = priprune_round(c, f.global, f.base, plan, f.spec, f.cfg, 1);
  CHECK(out.defense_mask.zero_count() == 0);
  CHECK(out.defense_rate == 0.0);
  auto plain = local_update(f.client(), f.spec, f.global, f.base, f.cfg, 1);
  // Soft samples still mix in a few percent of the start point, so compare displacements.
  double diff = 0.0, norm = 0.0;
  for (std::size_t j = 0; j < out.wire.size(); ++j) {
    diff += std::pow(out.wire[j] - plain.params[j], 2);
    norm += std::pow(plain.params[j] - f.global[j], 2);
  }
  MESSAGE("relative deviation " << std::sqrt(diff / norm));
  CHECK(std::sqrt(diff / norm) < 0.2);
}

TEST_CASE("priprune with a large alpha withholds everything") {
  ClientFixture f;
  DefensePlan plan;
  plan.strategy = DefenseStrategy::PriPrune;
  plan.alpha_init = 0.99;
  auto c = f.client();
  auto out = priprune_round(c, f.global, f.base, plan, f.spec, f.cfg, 1);
  for (double v : out.wire.values()) CHECK(v == 0.0);
  for (std::size_t j = 0; j < out.trained.size(); ++j) {
    CHECK(c.stash.values[j] == (f.base.bits[j] ? out.trained[j] : 0.0));
    CHECK(c.stash.withheld.bits[j] == f.base.bits[j]);
  }
  std::size_t high = 0;
  for (double a : c.alpha) {
    CHECK(a >= MaskDistribution::kMin);
    CHECK(a <= MaskDistribution::kMax);
    high += a >= 0.5;
  }
  CHECK(out.defense_rate == static_cast<double>(high) / static_cast<double>(c.alpha.size()));
}

TEST_CASE("a larger privacy weight never lowers the mean alpha") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ClientFixture f;
    f.cfg.seed = seed;
    DefensePlan lo;
    lo.strategy = DefenseStrategy::PriPrune;
    lo.lambda_pri = 1.0;
    DefensePlan hi = lo;
    hi.lambda_pri = 10.0;
    auto a = f.client();
    auto b = f.client();
    double ma = 0.0, mb = 0.0;
    for (std::size_t t = 1; t <= 3; ++t) {
      ma = priprune_round(a, f.global, f.base, lo, f.spec, f.cfg, t).mean_alpha;
      mb = priprune_round(b, f.global, f.base, hi, f.spec, f.cfg, t).mean_alpha;
    }
    CHECK(mb >= ma);
  }
}

TEST_CASE("alpha stays clamped and the tie withholds") {
  MaskDistribution d{{-1.0, 0.0, 0.5, 1.0, 2.0}};
  d.clamp();
  CHECK(d.alpha == std::vector<double>{MaskDistribution::kMin, MaskDistribution::kMin, 0.5,
                                       MaskDistribution::kMax, MaskDistribution::kMax});
  ClientFixture f;
  DefensePlan plan;
  plan.strategy = DefenseStrategy::PriPrune;
  plan.lambda_acc = 0.0;
  plan.lambda_pri = 0.0;
  plan.lambda_sha = 0.0;
  plan.alpha_init = 0.5;
  auto c = f.client();
  auto out = priprune_round(c, f.global, f.base, plan, f.spec, f.cfg, 1);
  CHECK(out.defense_mask.zero_count() == out.defense_mask.size());
}

TEST_CASE("fixed strategies stash withheld weights and restore them next round") {
  ClientFixture f;
  DefensePlan plan;
  plan.strategy = DefenseStrategy::Largest;
  plan.rate = 0.2;
  auto c = f.client();
  auto out = defended_update(c, f.global, f.base, plan, f.spec, f.cfg, 1);
  REQUIRE_FALSE(c.stash.empty());
  for (std::size_t j = 0; j < out.wire.size(); ++j) {
    CHECK(out.wire[j] + c.stash.values[j] == out.trained[j]);
    if (!f.base.bits[j]) CHECK(c.stash.withheld.bits[j] == 0);
  }
  CHECK(out.defense_rate == doctest::Approx(0.2).epsilon(0.02));
  auto start = pseudo_prune_load(f.global, c.stash);
  for (std::size_t j = 0; j < start.size(); ++j)
    CHECK(start[j] == (c.stash.withheld.bits[j] ? out.trained[j] : f.global[j]));

  plan.pseudo = false;
  auto d = f.client();
  defended_update(d, f.global, f.base, plan, f.spec, f.cfg, 1);
  CHECK(d.stash.empty());
}
