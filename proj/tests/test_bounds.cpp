#include <Eigen/Eigenvalues>
#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "privlab/bounds.hpp"
#include "privlab/error.hpp"

using namespace privlab;

namespace {

const double kLog2TwoPiE = std::log2(2.0 * std::numbers::pi * std::numbers::e);

BoundInputs base() {
  BoundInputs in;
  in.p = 0.5;
  in.batch = 4;
  in.d_star = 3;
  in.delta = 0.25;
  in.rounds = 1;
  return in;
}

}  // namespace

TEST_CASE("single-round bound worked example") {
  BoundInputs in;
  in.p = 1.0;
  const double b = single_round_bound(in);
  CHECK(std::abs(b - (1.0 + kLog2TwoPiE)) <= 1e-12);
  CHECK(b == doctest::Approx(5.0942).epsilon(1e-4));
  in.rounds = 3;
  CHECK(multi_round_bound(in) == doctest::Approx(15.2826).epsilon(1e-4));
}

TEST_CASE("bound term differences") {
  auto lo = base(), hi = base();
  lo.p = 0.1;
  hi.p = 0.9;
  CHECK(std::abs((single_round_bound(lo) - single_round_bound(hi)) - 0.8 / (2 * std::log(2.0))) <=
        1e-12);
  auto b2 = base();
  b2.batch = 8;
  CHECK(std::abs(single_round_bound(base()) - single_round_bound(b2) - 2.0) <= 1e-12);
  auto d2 = base();
  d2.d_star = 4;
  CHECK(std::abs(single_round_bound(d2) - single_round_bound(base()) - kLog2TwoPiE) <= 1e-12);
  auto t10 = base();
  t10.rounds = 10;
  CHECK(std::abs(multi_round_bound(t10) - 10 * single_round_bound(base())) <= 1e-12);
  CHECK(multi_round_bound(base()) == single_round_bound(base()));
}

TEST_CASE("bound monotonicity sweeps") {
  double prev = INFINITY;
  for (int i = 0; i <= 10; ++i) {
    auto in = base();
    in.p = i / 10.0;
    const double b = single_round_bound(in);
    CHECK(b < prev);
    prev = b;
  }
  prev = INFINITY;
  for (std::size_t batch = 1; batch <= 64; batch *= 2) {
    auto in = base();
    in.batch = batch;
    CHECK(single_round_bound(in) < prev);
    prev = single_round_bound(in);
  }
  prev = -INFINITY;
  for (std::size_t d = 1; d <= 20; ++d) {
    auto in = base();
    in.d_star = d;
    CHECK(single_round_bound(in) > prev);
    prev = single_round_bound(in);
  }
}

TEST_CASE("bound input validation") {
  auto in = base();
  in.p = 1.5;
  CHECK_THROWS_AS(single_round_bound(in), ValidationError);
  in = base();
  in.batch = 0;
  CHECK_THROWS_AS(single_round_bound(in), ValidationError);
  in = base();
  in.delta = NAN;
  CHECK_THROWS_AS(single_round_bound(in), ValidationError);
}

TEST_CASE("binary entropy series") {
  for (std::size_t n : {1u, 5u, 50u}) CHECK(binary_entropy_series(0.5, n) == 1.0);
  for (double p : {0.6, 0.75, 0.9}) {
    CHECK(std::abs(binary_entropy_series(p, 50) - binary_entropy(p)) <= 1e-3);
  }
  CHECK(binary_entropy(0.9) == doctest::Approx(0.4690).epsilon(1e-3));
  for (int i = 0; i <= 20; ++i) {
    const double p = i / 20.0;
    double prev = INFINITY;
    for (std::size_t n = 1; n <= 60; ++n) {
      const double s = binary_entropy_series(p, n);
      CHECK(s <= prev);
      CHECK(s >= binary_entropy(p) - 1e-12);
      prev = s;
    }
    CHECK(1.0 - (p - 1.0) / (2 * std::log(2.0)) >= binary_entropy_series(p, 1));
  }
}

TEST_CASE("Jacobi eigenvalues agree with Eigen") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  for (std::size_t n : {1u, 2u, 5u, 17u, 40u}) {
    Tensor m = Tensor::matrix(n, n);
    Eigen::MatrixXd e(n, n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = r; c < n; ++c) {
        const double v = nd(rng);
        m.at(r, c) = m.at(c, r) = v;
        e(r, c) = e(c, r) = v;
      }
    auto got = symmetric_eigenvalues(m);
    Eigen::VectorXd want = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(e).eigenvalues();
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(got[i] == doctest::Approx(want(static_cast<Eigen::Index>(n - 1 - i))).epsilon(1e-9).scale(1));
    }
  }
}

TEST_CASE("grad stats recover a known diagonal covariance") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd;
  const std::size_t n = 10000;
  Tensor g = Tensor::matrix(n, 2);
  for (std::size_t r = 0; r < n; ++r) {
    g.at(r, 0) = 2.0 * nd(rng) + 0.3;
    g.at(r, 1) = nd(rng) - 0.1;
  }
  auto s = grad_stats_from_samples(g);
  REQUIRE(s.d_star == 2);
  CHECK(std::abs(s.eigenvalues[0] - 4.0) <= 0.4);
  CHECK(std::abs(s.eigenvalues[1] - 1.0) <= 0.1);
  CHECK(std::abs(s.delta - -1.0) <= 0.1);
  CHECK(s.mean[0] == doctest::Approx(0.3).epsilon(0.2));
}

TEST_CASE("grad stats: rank bound, degenerate input, subsampling") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> nd;
  Tensor wide = Tensor::matrix(6, 30);
  for (double& v : wide.values()) v = nd(rng);
  auto s = grad_stats_from_samples(wide);
  CHECK(s.d_star == 5);  // centered rank is n - 1
  GradStatsOptions raw;
  raw.subtract_mean = false;
  CHECK(grad_stats_from_samples(wide, raw).d_star == 6);

  Tensor same = Tensor::matrix(5, 4, 0.7);
  CHECK_THROWS_AS(grad_stats_from_samples(same), DegenerateError);
  CHECK_THROWS_AS(grad_stats_from_samples(Tensor::matrix(1, 3)), ValidationError);

  Tensor big = Tensor::matrix(40, 50);
  for (double& v : big.values()) v = nd(rng);
  GradStatsOptions small;
  small.max_coords = 16;
  auto sub = grad_stats_from_samples(big, small);
  CHECK(sub.coords_used == 16);
  CHECK(sub.d_star <= 16);
}

TEST_CASE("estimate_grad_stats on a model shard") {
  auto spec = ModelSpec::mlp(6, {4}, 3, 5);
  auto params = init_params(spec);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u;
  Dataset ds;
  ds.samples = Tensor::matrix(12, 6);
  for (double& v : ds.samples.values()) v = u(rng);
  for (int i = 0; i < 12; ++i) ds.labels.push_back(i % 3);
  auto s = estimate_grad_stats(spec, params, ds, 12);
  CHECK(s.d_star >= 1);
  CHECK(s.d_star <= std::min<std::size_t>(11, spec.param_count()));
  CHECK(s.n == 12);

  Dataset twins;
  twins.samples = Tensor::matrix(4, 6, 0.5);
  twins.labels = {1, 1, 1, 1};
  CHECK_THROWS_AS(estimate_grad_stats(spec, params, twins, 4), DegenerateError);
  CHECK_THROWS_AS(estimate_grad_stats(spec, params, twins, 5), ValidationError);
}
