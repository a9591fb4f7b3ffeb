#pragma once

// Dense kernels used under the autodiff engine and the covariance estimator.
// Every kernel has a serial reference and an OpenMP version; the parallel
// version splits output rows across threads and keeps the per-element
// accumulation order of the serial one, so both produce bit-identical results.

#include <cstddef>
#include <span>

namespace privlab::kernels {

/// Shape of C = op(A) * op(B) where op is optional transposition.
struct GemmShape {
  std::size_t m = 0;  ///< rows of op(A) and C
  std::size_t k = 0;  ///< cols of op(A), rows of op(B)
  std::size_t n = 0;  ///< cols of op(B) and C
  bool trans_a = false;
  bool trans_b = false;
};

void gemm_serial(const GemmShape& s, std::span<const double> a, std::span<const double> b,
                 std::span<double> c);
void gemm_parallel(const GemmShape& s, std::span<const double> a, std::span<const double> b,
                   std::span<double> c);

/// Picks the parallel kernel once m*k*n crosses `parallel_threshold()`.
void gemm(const GemmShape& s, std::span<const double> a, std::span<const double> b,
          std::span<double> c);

/// G = X * X^T / divisor for a rows x cols matrix X (symmetric output, rows x rows).
void gram_serial(std::size_t rows, std::size_t cols, std::span<const double> x, double divisor,
                 std::span<double> g);
void gram_parallel(std::size_t rows, std::size_t cols, std::span<const double> x, double divisor,
                   std::span<double> g);

std::size_t parallel_threshold() noexcept;
void set_parallel_threshold(std::size_t flops) noexcept;

}  // namespace privlab::kernels
