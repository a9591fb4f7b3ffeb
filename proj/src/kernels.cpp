#include "privlab/kernels.hpp"

#include <atomic>

#include "privlab/error.hpp"

namespace privlab::kernels {

namespace {

std::atomic<std::size_t> g_threshold{1u << 18};

void check(const GemmShape& s, std::span<const double> a, std::span<const double> b,
           std::span<double> c) {
  if (a.size() != s.m * s.k || b.size() != s.k * s.n || c.size() != s.m * s.n) {
    throw DimensionError("gemm operand sizes do not match the declared shape");
  }
}

// One output row; shared by both drivers so the summation order is identical.
inline void gemm_row(const GemmShape& s, const double* a, const double* b, double* c,
                     std::size_t i) {
  double* crow = c + i * s.n;
  for (std::size_t j = 0; j < s.n; ++j) crow[j] = 0.0;
  for (std::size_t p = 0; p < s.k; ++p) {
    const double av = s.trans_a ? a[p * s.m + i] : a[i * s.k + p];
    if (av == 0.0) continue;
    if (!s.trans_b) {
      const double* brow = b + p * s.n;
      for (std::size_t j = 0; j < s.n; ++j) crow[j] += av * brow[j];
    } else {
      for (std::size_t j = 0; j < s.n; ++j) crow[j] += av * b[j * s.k + p];
    }
  }
}

inline void gram_row(std::size_t cols, const double* x, double divisor, double* g,
                     std::size_t rows, std::size_t i) {
  const double* xi = x + i * cols;
  for (std::size_t j = 0; j < rows; ++j) {
    const double* xj = x + j * cols;
    double acc = 0.0;
    for (std::size_t p = 0; p < cols; ++p) acc += xi[p] * xj[p];
    g[i * rows + j] = acc / divisor;
  }
}

}  // namespace

void gemm_serial(const GemmShape& s, std::span<const double> a, std::span<const double> b,
                 std::span<double> c) {
  check(s, a, b, c);
  for (std::size_t i = 0; i < s.m; ++i) gemm_row(s, a.data(), b.data(), c.data(), i);
}

void gemm_parallel(const GemmShape& s, std::span<const double> a, std::span<const double> b,
                   std::span<double> c) {
  check(s, a, b, c);
  const auto m = static_cast<long long>(s.m);
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < m; ++i) {
    gemm_row(s, a.data(), b.data(), c.data(), static_cast<std::size_t>(i));
  }
}

void gemm(const GemmShape& s, std::span<const double> a, std::span<const double> b,
          std::span<double> c) {
  if (s.m * s.k * s.n >= g_threshold.load(std::memory_order_relaxed) && s.m > 1) {
    gemm_parallel(s, a, b, c);
  } else {
    gemm_serial(s, a, b, c);
  }
}

void gram_serial(std::size_t rows, std::size_t cols, std::span<const double> x, double divisor,
                 std::span<double> g) {
  if (x.size() != rows * cols || g.size() != rows * rows) {
    throw DimensionError("gram operand sizes do not match");
  }
  for (std::size_t i = 0; i < rows; ++i) gram_row(cols, x.data(), divisor, g.data(), rows, i);
}

void gram_parallel(std::size_t rows, std::size_t cols, std::span<const double> x, double divisor,
                   std::span<double> g) {
  if (x.size() != rows * cols || g.size() != rows * rows) {
    throw DimensionError("gram operand sizes do not match");
  }
  const auto r = static_cast<long long>(rows);
#pragma omp parallel for schedule(dynamic, 8)
  for (long long i = 0; i < r; ++i) {
    gram_row(cols, x.data(), divisor, g.data(), rows, static_cast<std::size_t>(i));
  }
}

std::size_t parallel_threshold() noexcept { return g_threshold.load(); }
void set_parallel_threshold(std::size_t flops) noexcept { g_threshold.store(flops); }

}  // namespace privlab::kernels
