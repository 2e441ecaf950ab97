#include "vmlab/kernels.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <vector>

#include "vmlab/rng.hpp"

using namespace vmlab;
using kern::Exec;

namespace {

// Independent naive reference: plain (i, j, k) triple loop.
template <typename T>
std::vector<T> naive_nn(const std::vector<T>& a, const std::vector<T>& b,
                        std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> c(m * n, T(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t kk = 0; kk < k; ++kk) c[i * n + j] += a[i * k + kk] * b[kk * n + j];
  return c;
}

template <typename T>
std::vector<T> random_matrix(Rng& rng, std::size_t elems) {
  std::vector<T> v(elems);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-1.0, 1.0));
  return v;
}

template <typename T>
std::vector<T> transpose(const std::vector<T>& a, std::size_t rows, std::size_t cols) {
  std::vector<T> t(a.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

}  // namespace

TEST(Matmul, SmallKnownAnswer) {
  // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
  const double a[] = {1, 2, 3, 4};
  const double b[] = {5, 6, 7, 8};
  double c[4];
  kern::matmul_nn(a, b, c, 2, 2, 2, false, Exec::Serial);
  EXPECT_DOUBLE_EQ(c[0], 19);
  EXPECT_DOUBLE_EQ(c[1], 22);
  EXPECT_DOUBLE_EQ(c[2], 43);
  EXPECT_DOUBLE_EQ(c[3], 50);
}

TEST(Matmul, MatchesNaiveReferenceDouble) {
  Rng rng(101);
  for (auto [m, k, n] : {std::array<std::size_t, 3>{3, 4, 5},
                         {1, 7, 1},
                         {16, 16, 16},
                         {5, 1, 9},
                         {33, 17, 29}}) {
    const auto a = random_matrix<double>(rng, m * k);
    const auto b = random_matrix<double>(rng, k * n);
    const auto want = naive_nn(a, b, m, k, n);
    std::vector<double> c(m * n);
    kern::matmul_nn(a.data(), b.data(), c.data(), m, k, n, false, Exec::Serial);
    for (std::size_t i = 0; i < c.size(); ++i) ASSERT_NEAR(c[i], want[i], 1e-12);
  }
}

TEST(Matmul, NtAndTnAgreeWithExplicitTranspose) {
  Rng rng(202);
  const std::size_t m = 6, k = 11, n = 4;
  const auto a = random_matrix<float>(rng, m * k);
  const auto b = random_matrix<float>(rng, k * n);

  std::vector<float> want(m * n);
  kern::matmul_nn(a.data(), b.data(), want.data(), m, k, n, false, Exec::Serial);

  // A * B == A * (B^T)^T : feed matmul_nt the transposed B (n x k).
  const auto bt = transpose(b, k, n);
  std::vector<float> c_nt(m * n);
  kern::matmul_nt(a.data(), bt.data(), c_nt.data(), m, k, n, false, Exec::Serial);

  // A * B == (A^T)^T * B : feed matmul_tn the transposed A (k x m).
  const auto at = transpose(a, m, k);
  std::vector<float> c_tn(m * n);
  kern::matmul_tn(at.data(), b.data(), c_tn.data(), m, k, n, false, Exec::Serial);

  for (std::size_t i = 0; i < want.size(); ++i) {
    ASSERT_NEAR(c_nt[i], want[i], 1e-5f);
    ASSERT_NEAR(c_tn[i], want[i], 1e-5f);
  }
}

TEST(Matmul, AccumulateAddsIntoOutput) {
  const float a[] = {1, 2};
  const float b[] = {3, 4};
  float c[1] = {100};
  kern::matmul_nn(a, b, c, 1, 2, 1, true, Exec::Serial);
  EXPECT_FLOAT_EQ(c[0], 111);

  float d[1] = {100};
  const float bt[] = {3, 4};  // 1 x 2 for nt
  kern::matmul_nt(a, bt, d, 1, 2, 1, true, Exec::Serial);
  EXPECT_FLOAT_EQ(d[0], 111);
}

// The determinism contract: parallel output is bitwise identical to serial,
// because both paths reduce each output element in the same order.
TEST(Matmul, ParallelBitwiseEqualsSerial) {
  Rng rng(303);
  for (auto [m, k, n] : {std::array<std::size_t, 3>{64, 33, 47}, {128, 21, 24}, {7, 5, 3}}) {
    const auto a = random_matrix<float>(rng, m * k);
    const auto b = random_matrix<float>(rng, k * n);
    std::vector<float> cs(m * n), cp(m * n);
    kern::matmul_nn(a.data(), b.data(), cs.data(), m, k, n, false, Exec::Serial);
    kern::matmul_nn(a.data(), b.data(), cp.data(), m, k, n, false, Exec::Parallel);
    ASSERT_EQ(std::memcmp(cs.data(), cp.data(), cs.size() * sizeof(float)), 0);

    const auto bt = transpose(b, k, n);
    kern::matmul_nt(a.data(), bt.data(), cs.data(), m, k, n, false, Exec::Serial);
    kern::matmul_nt(a.data(), bt.data(), cp.data(), m, k, n, false, Exec::Parallel);
    ASSERT_EQ(std::memcmp(cs.data(), cp.data(), cs.size() * sizeof(float)), 0);

    const auto at = transpose(a, m, k);
    kern::matmul_tn(at.data(), b.data(), cs.data(), m, k, n, false, Exec::Serial);
    kern::matmul_tn(at.data(), b.data(), cp.data(), m, k, n, false, Exec::Parallel);
    ASSERT_EQ(std::memcmp(cs.data(), cp.data(), cs.size() * sizeof(float)), 0);
  }
}

TEST(Matmul, DefaultExecRoundTrips) {
  kern::set_default_exec(Exec::Serial);
  EXPECT_EQ(kern::default_exec(), Exec::Serial);
  kern::set_default_exec(Exec::Auto);
  EXPECT_EQ(kern::default_exec(), Exec::Auto);
}
