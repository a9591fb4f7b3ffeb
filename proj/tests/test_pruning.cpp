#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "privlab/error.hpp"
#include "privlab/pruning.hpp"

using namespace privlab;

namespace {

Mask bits(std::vector<std::uint8_t> b) {
  Mask m{std::move(b), 0.0};
  m.refresh_rate();
  return m;
}

struct Probe {
  Tensor x;
  std::vector<int> y;
};

Probe random_probe(std::size_t rows, std::size_t cols, std::size_t classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u;
  Probe p{Tensor::matrix(rows, cols), {}};
  for (double& v : p.x.values()) v = u(rng);
  for (std::size_t r = 0; r < rows; ++r) p.y.push_back(static_cast<int>(r % classes));
  return p;
}

const PolicyKind kAllKinds[] = {PolicyKind::Random, PolicyKind::Magnitude, PolicyKind::Snip,
                                PolicyKind::SynFlow, PolicyKind::GraSP, PolicyKind::FedDstLike,
                                PolicyKind::PruneFlLike};

}  // namespace

TEST_CASE("make_mask order statistics, ties, and limits") {
  CHECK(make_mask(std::vector<double>{1, 2, 3, 4}, 0.5).bits == std::vector<std::uint8_t>{0, 0, 1, 1});
  CHECK(make_mask(std::vector<double>{5, 1, 7}, 0.0).bits == std::vector<std::uint8_t>{1, 1, 1});
  CHECK(make_mask(std::vector<double>{2, 2, 2, 2}, 0.5).bits == std::vector<std::uint8_t>{0, 0, 1, 1});
  CHECK_THROWS_AS(make_mask(std::vector<double>{1, 2}, 1.0), ValidationError);
  CHECK_THROWS_AS(make_mask(std::vector<double>{1, 2}, -0.1), ValidationError);
  CHECK(make_mask(std::vector<double>{1, 2, 3, 4}, 0.5).rate == 0.5);
}

TEST_CASE("make_mask rate exactness and nesting on random scores") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ur(0.0, 0.99);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(1 + trial * 7);
    for (auto& v : s) v = nd(rng);
    const double p1 = ur(rng), p2 = ur(rng);
    auto a = make_mask(s, std::min(p1, p2)), b = make_mask(s, std::max(p1, p2));
    CHECK(a.zero_count() == static_cast<std::size_t>(std::llround(std::min(p1, p2) * s.size())));
    CHECK(b.zero_count() == static_cast<std::size_t>(std::llround(std::max(p1, p2) * s.size())));
    for (std::size_t i = 0; i < s.size(); ++i)
      if (!a.bits[i]) CHECK(!b.bits[i]);
  }
}

TEST_CASE("apply: identity, hand example, idempotence, composition") {
  ParamVector w({LayerSlot{0, 2}}, {5, 7});
  CHECK(apply(w, Mask::ones(2)) == w);
  CHECK(apply(w, bits({1, 0})).values() == std::vector<double>{5, 0});
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd;
  std::bernoulli_distribution coin(0.5);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> v(30);
    for (auto& x : v) x = nd(rng);
    std::vector<std::uint8_t> b1(30), b2(30);
    for (auto& x : b1) x = coin(rng);
    for (auto& x : b2) x = coin(rng);
    ParamVector p({LayerSlot{0, 30}}, v);
    const auto m = bits(b1), mh = bits(b2);
    CHECK(apply(apply(p, m), m) == apply(p, m));
    CHECK(apply(apply(p, mh), m) == apply(p, intersect(m, mh)));
  }
  CHECK_THROWS_AS(apply(w, Mask::ones(3)), ValidationError);
}

TEST_CASE("regrow: hand trace, no-op, conservation, infeasible") {
  const auto m = bits({1, 1, 0, 0});
  const std::vector<double> s{0.1, 5, 9, 0.2};
  CHECK(regrow(m, s, 0.25).bits == std::vector<std::uint8_t>{0, 1, 1, 0});
  CHECK(regrow(m, s, 0.0) == m);
  CHECK_THROWS_AS(regrow(m, s, 0.75), ValidationError);

  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  std::vector<double> sc(40);
  for (auto& v : sc) v = nd(rng);
  Mask cur = make_mask(sc, 0.6);
  const auto zeros = cur.zero_count();
  for (int step = 0; step < 50; ++step) {
    for (auto& v : sc) v = nd(rng);
    cur = regrow(cur, sc, 0.1);
    CHECK(cur.zero_count() == zeros);
  }
}

TEST_CASE("magnitude and snip scores") {
  auto spec = ModelSpec::mlp(1, {}, 2);
  // one dense layer 1 -> 2: weights (w0, w1), bias (b0, b1)
  ParamVector w(spec.layout(), {3, -4, 0.5, 0.0});
  PruningPolicy pol;
  pol.kind = PolicyKind::Magnitude;
  auto s = score(pol, spec, w, Tensor(), {});
  CHECK(s[0] == 3);
  CHECK(s[1] == 4);
  CHECK(std::isinf(s[2]));  // classifier bias always kept
  CHECK(std::isinf(s[3]));

  // Snip by hand: logits = (3x + 0.5, -4x), x = 1, label 0.
  pol.kind = PolicyKind::Snip;
  Tensor x({1, 1}, std::vector<double>{1.0});
  auto snip = score(pol, spec, w, x, {0});
  const double z0 = 3.5, z1 = -4.0;
  const double p0 = std::exp(z0) / (std::exp(z0) + std::exp(z1));
  CHECK(snip[0] == doctest::Approx(std::abs(3.0 * (p0 - 1.0))).epsilon(1e-12));
  CHECK(snip[1] == doctest::Approx(std::abs(-4.0 * (1.0 - p0))).epsilon(1e-12));
  CHECK_THROWS_AS(score(pol, spec, w, Tensor(), {}), ConfigError);
}

TEST_CASE("synflow matches path enumeration on a positive 2x2x2 linear net") {
  auto spec = ModelSpec::mlp(2, {2}, 2);
  spec.activations = {Activation::Identity};
  std::vector<double> v{0.5, 1.5, 2.0, 0.25,  // W1 (in x out)
                        0.1, 0.3,             // b1
                        1.2, 0.7, 0.4, 2.2,   // W2
                        0.05, 0.6};           // b2
  ParamVector w(spec.layout(), v);
  PruningPolicy pol;
  pol.kind = PolicyKind::SynFlow;
  auto s = score(pol, spec, w, Tensor(), {});
  auto W1 = [&](int i, int j) { return v[i * 2 + j]; };
  auto W2 = [&](int j, int k) { return v[6 + j * 2 + k]; };
  auto out_mass = [&](int j) { return W2(j, 0) + W2(j, 1); };
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(s[i * 2 + j] == doctest::Approx(W1(i, j) * out_mass(j)));
  for (int j = 0; j < 2; ++j) CHECK(s[4 + j] == doctest::Approx(v[4 + j] * out_mass(j)));
  for (int j = 0; j < 2; ++j) {
    const double in_flow = W1(0, j) + W1(1, j) + v[4 + j];
    for (int k = 0; k < 2; ++k) CHECK(s[6 + j * 2 + k] == doctest::Approx(W2(j, k) * in_flow));
  }
}

TEST_CASE("grasp score is -w * Hg") {
  auto spec = ModelSpec::mlp(3, {4}, 3, 9);
  auto w = init_params(spec);
  auto probe = random_probe(5, 3, 3, 4);
  PruningPolicy pol;
  pol.kind = PolicyKind::GraSP;
  auto s = score(pol, spec, w, probe.x, probe.y);
  auto g = loss_and_grad(spec, w, probe.x, probe.y).grad;
  auto hg = hessian_vector_product(spec, w, probe.x, probe.y, g);
  for (std::size_t i = 0; i + 3 < w.size(); ++i) CHECK(s[i] == -w[i] * hg[i]);
}

TEST_CASE("every policy is rate exact and keeps the classifier bias") {
  auto spec = ModelSpec::mlp(8, {6}, 3, 2);
  auto w = init_params(spec);
  auto probe = random_probe(6, 8, 3, 5);
  const std::size_t d = w.size();
  for (auto kind : kAllKinds) {
    PruningPolicy pol;
    pol.kind = kind;
    pol.seed = 17;
    for (int i = 1; i <= 9; ++i) {
      const double p = i / 10.0;
      auto m = compute_mask(pol, spec, w, probe.x, probe.y, p);
      CHECK(m.zero_count() == static_cast<std::size_t>(std::llround(p * d)));
      for (std::size_t j = d - 3; j < d; ++j) CHECK(m.bits[j] == 1);
    }
  }
}

TEST_CASE("policy tags and predicates") {
  CHECK(parse_policy_kind("grasp") == PolicyKind::GraSP);
  CHECK(policy_name(PolicyKind::PruneFlLike) == "prunefl");
  CHECK_THROWS_AS(parse_policy_kind("lottery"), ConfigError);
  CHECK(is_one_shot(PolicyKind::SynFlow));
  CHECK(!is_one_shot(PolicyKind::Random));
  PruningPolicy bad;
  bad.importance_decay = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("prunefl importance tracker and score") {
  ImportanceTracker t;
  ParamVector g({LayerSlot{0, 2}}, {2.0, -1.0});
  t.update(g);
  t.update(g);
  CHECK(t.importance[0] == doctest::Approx(0.1 * 4 + 0.9 * 0.1 * 4));
  auto spec = ModelSpec::mlp(1, {}, 2);
  ParamVector w(spec.layout(), {3, -4, 0.5, 0.0});
  PruningPolicy pol;
  pol.kind = PolicyKind::PruneFlLike;
  std::vector<double> imp{1.0, 0.0, 2.0, 0.0};
  auto probe = random_probe(1, 1, 2, 1);
  auto s = score(pol, spec, w, probe.x, probe.y, &imp);
  CHECK(s[0] == 4.0);
  CHECK(s[1] == 4.0);
}

TEST_CASE("mask serialization") {
  std::mt19937_64 rng(8);
  std::bernoulli_distribution coin(0.3);
  for (std::size_t d : {0u, 1u, 7u, 500u}) {
    Mask m{std::vector<std::uint8_t>(d), 0.0};
    for (auto& b : m.bits) b = coin(rng);
    m.refresh_rate();
    std::stringstream ss;
    write_mask(ss, m);
    CHECK(read_mask(ss) == m);
  }
  std::stringstream bad("PFLX");
  CHECK_THROWS_AS(read_mask(bad), FormatError);
  std::stringstream full;
  write_mask(full, bits({1, 1, 0}));
  std::string bytes = full.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_mask(truncated), FormatError);
  std::stringstream csv;
  write_mask_csv(csv, bits({1, 0}));
  CHECK(csv.str() == "index,bit\n0,1\n1,0\n");
}
