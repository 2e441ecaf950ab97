#pragma once

// Dense matrix kernels: a serial reference implementation and an
// OpenMP-parallel version that partitions work by output row. Both paths run
// the same per-row routine, so every output element is reduced in the same
// order and the parallel result is bitwise identical to the serial one at any
// thread count.

#include <cstddef>

namespace vmlab::kern {

enum class Exec {
  Auto,      // parallel when the problem is big enough
  Serial,    // reference path
  Parallel,  // force the OpenMP path
};

/// Process-wide default used by Exec::Auto call sites. Not thread-safe to
/// change while kernels are running; set it once at startup.
void set_default_exec(Exec e);
Exec default_exec();

/// Flop threshold below which Auto stays serial.
inline constexpr std::size_t kAutoParallelMinFlops = 1u << 16;

namespace detail {

// C[i,:] (+)= A[i,:] * B   with A m x k (row-major), B k x n, C m x n
template <typename T>
inline void row_nn(const T* a, const T* b, T* c, std::size_t k, std::size_t n,
                   bool accumulate) {
  if (!accumulate)
    for (std::size_t j = 0; j < n; ++j) c[j] = T(0);
  for (std::size_t kk = 0; kk < k; ++kk) {
    const T av = a[kk];
    const T* brow = b + kk * n;
    for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
  }
}

// C[i,:] (+)= A[i,:] * B^T  with B n x k
template <typename T>
inline void row_nt(const T* a, const T* b, T* c, std::size_t k, std::size_t n,
                   bool accumulate) {
  for (std::size_t j = 0; j < n; ++j) {
    T acc = T(0);
    const T* brow = b + j * k;
    for (std::size_t kk = 0; kk < k; ++kk) acc += a[kk] * brow[kk];
    c[j] = accumulate ? c[j] + acc : acc;
  }
}

// C[i,:] (+)= (A^T)[i,:] * B  with A k x m, so column i of A is used
template <typename T>
inline void row_tn(const T* a, const T* b, T* c, std::size_t i, std::size_t k,
                   std::size_t m, std::size_t n, bool accumulate) {
  if (!accumulate)
    for (std::size_t j = 0; j < n; ++j) c[j] = T(0);
  for (std::size_t kk = 0; kk < k; ++kk) {
    const T av = a[kk * m + i];
    const T* brow = b + kk * n;
    for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
  }
}

bool run_parallel(Exec e, std::size_t flops);

}  // namespace detail

/// C[m x n] (+)= A[m x k] * B[k x n]
template <typename T>
void matmul_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate = false, Exec exec = Exec::Auto) {
  if (detail::run_parallel(exec, m * n * k)) {
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(m); ++i)
      detail::row_nn(a + i * k, b, c + i * n, k, n, accumulate);
  } else {
    for (std::size_t i = 0; i < m; ++i)
      detail::row_nn(a + i * k, b, c + i * n, k, n, accumulate);
  }
}

/// C[m x n] (+)= A[m x k] * B[n x k]^T
template <typename T>
void matmul_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate = false, Exec exec = Exec::Auto) {
  if (detail::run_parallel(exec, m * n * k)) {
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(m); ++i)
      detail::row_nt(a + i * k, b, c + i * n, k, n, accumulate);
  } else {
    for (std::size_t i = 0; i < m; ++i)
      detail::row_nt(a + i * k, b, c + i * n, k, n, accumulate);
  }
}

/// C[m x n] (+)= A[k x m]^T * B[k x n]
template <typename T>
void matmul_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate = false, Exec exec = Exec::Auto) {
  if (detail::run_parallel(exec, m * n * k)) {
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(m); ++i)
      detail::row_tn(a, b, c + i * n, static_cast<std::size_t>(i), k, m, n, accumulate);
  } else {
    for (std::size_t i = 0; i < m; ++i)
      detail::row_tn(a, b, c + i * n, i, k, m, n, accumulate);
  }
}

}  // namespace vmlab::kern
