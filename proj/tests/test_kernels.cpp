#include <random>
#include <vector>

#include "doctest.h"
#include "privlab/kernels.hpp"

using namespace privlab::kernels;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::vector<double> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

}  // namespace

TEST_CASE("gemm matches a naive triple loop for every transpose combination") {
  const std::size_t m = 7, k = 5, n = 3;
  auto a = random_values(m * k, 1);
  auto b = random_values(k * n, 2);
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      GemmShape s{m, k, n, ta, tb};
      std::vector<double> c(m * n);
      gemm_serial(s, a, b, c);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double expect = 0.0;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = ta ? a[p * m + i] : a[i * k + p];
            const double bv = tb ? b[j * k + p] : b[p * n + j];
            expect += av * bv;
          }
          CHECK(c[i * n + j] == doctest::Approx(expect).epsilon(1e-12));
        }
    }
  }
}

TEST_CASE("parallel gemm and gram are bit-identical to the serial reference") {
  const std::size_t m = 67, k = 41, n = 29;
  auto a = random_values(m * k, 3);
  auto b = random_values(k * n, 4);
  for (bool ta : {false, true}) {
    GemmShape s{m, k, n, ta, false};
    std::vector<double> c1(m * n), c2(m * n);
    gemm_serial(s, a, b, c1);
    gemm_parallel(s, a, b, c2);
    CHECK(c1 == c2);
  }
  std::vector<double> g1(m * m), g2(m * m);
  gram_serial(m, k, a, 3.0, g1);
  gram_parallel(m, k, a, 3.0, g2);
  CHECK(g1 == g2);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) CHECK(g1[i * m + j] == g1[j * m + i]);
}

TEST_CASE("gemm rejects inconsistent operand sizes") {
  std::vector<double> a(6), b(6), c(4);
  CHECK_THROWS(gemm_serial(GemmShape{2, 3, 3, false, false}, a, b, c));
}

TEST_CASE("dispatcher picks the same answer on both sides of the threshold") {
  const std::size_t m = 16, k = 16, n = 16;
  auto a = random_values(m * k, 5);
  auto b = random_values(k * n, 6);
  std::vector<double> c1(m * n), c2(m * n);
  const auto old = parallel_threshold();
  set_parallel_threshold(1);
  gemm(GemmShape{m, k, n}, a, b, c1);
  set_parallel_threshold(1u << 30);
  gemm(GemmShape{m, k, n}, a, b, c2);
  set_parallel_threshold(old);
  CHECK(c1 == c2);
}
