#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "zsq/kernels/kernels.hpp"

namespace zsq::kernels {
namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng, double lo = -2, double hi = 2) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

// Naive triple loop used as the oracle for both variants.
std::vector<double> reference_gemm(std::size_t m, std::size_t n, std::size_t k, MatView a,
                                   MatView b) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      long double acc = 0;
      for (std::size_t p = 0; p < k; ++p)
        acc += static_cast<long double>(a.data[i * a.row_stride + p * a.col_stride]) *
               b.data[p * b.row_stride + j * b.col_stride];
      c[i * n + j] = static_cast<double>(acc);
    }
  return c;
}

std::vector<const KernelTable*> variants() {
  std::vector<const KernelTable*> out{&scalar_kernels()};
  if (const KernelTable* t = avx2_kernels()) out.push_back(t);
  return out;
}

TEST(Kernels, DispatchReportsIsa) {
  const KernelTable& t = kernels();
  EXPECT_TRUE(t.isa == Isa::kScalar || t.isa == Isa::kAvx2);
  if (cpu_has_avx2() && std::getenv("ZSQ_SIMD") == nullptr) EXPECT_EQ(t.isa, Isa::kAvx2);
}

TEST(Kernels, GemmMatchesReferenceForAllTransposes) {
  std::mt19937_64 rng(11);
  const std::size_t shapes[][3] = {{1, 1, 1}, {3, 5, 7}, {4, 8, 16}, {9, 13, 27}, {16, 64, 144}, {5, 3, 1}};
  for (const KernelTable* t : variants()) {
    for (const auto& s : shapes) {
      const std::size_t m = s[0], n = s[1], k = s[2];
      for (int ta = 0; ta < 2; ++ta) {
        for (int tb = 0; tb < 2; ++tb) {
          auto a = random_vec(m * k, rng);
          auto b = random_vec(k * n, rng);
          MatView av = ta ? MatView{a.data(), 1, m} : MatView{a.data(), k, 1};
          MatView bv = tb ? MatView{b.data(), 1, k} : MatView{b.data(), n, 1};
          const auto expect = reference_gemm(m, n, k, av, bv);
          std::vector<double> c(m * n, 0.5);
          t->gemm(m, n, k, av, bv, c.data(), n, false);
          for (std::size_t i = 0; i < c.size(); ++i)
            ASSERT_NEAR(c[i], expect[i], 1e-12 * (1 + std::abs(expect[i]))) << isa_name(t->isa);
          t->gemm(m, n, k, av, bv, c.data(), n, true);
          for (std::size_t i = 0; i < c.size(); ++i)
            ASSERT_NEAR(c[i], 2 * expect[i], 1e-12 * (1 + std::abs(expect[i])));
        }
      }
    }
  }
}

TEST(Kernels, ElementwiseVariantsAgreeBitExactly) {
  const KernelTable* simd = avx2_kernels();
  if (simd == nullptr) GTEST_SKIP() << "no AVX2 on this host";
  const KernelTable& ref = scalar_kernels();
  std::mt19937_64 rng(3);
  for (std::size_t n : {1u, 3u, 4u, 17u, 1000u}) {
    auto x = random_vec(n, rng, -20, 20);
    // Plant exact ties so the rounding rule is exercised.
    for (std::size_t i = 0; i < n; i += 3) x[i] = 0.5 * std::round(x[i] * 2.0) + 0.25;
    auto y1 = random_vec(n, rng), y2 = y1;
    ref.axpy(n, 0.37, x.data(), y1.data());
    simd->axpy(n, 0.37, x.data(), y2.data());
    EXPECT_EQ(y1, y2);

    std::vector<double> q1(n), q2(n);
    ref.fake_quant(n, x.data(), 0.5, 0.0, -8, 7, q1.data());
    simd->fake_quant(n, x.data(), 0.5, 0.0, -8, 7, q2.data());
    EXPECT_EQ(q1, q2);
    ref.fake_quant(n, x.data(), 0.13, -0.4, -128, 127, q1.data());
    simd->fake_quant(n, x.data(), 0.13, -0.4, -128, 127, q2.data());
    EXPECT_EQ(q1, q2);

    auto p1 = random_vec(n, rng), p2 = p1;
    auto g = random_vec(n, rng);
    std::vector<double> m1(n, 0.1), m2(n, 0.1), v1(n, 0.2), v2(n, 0.2);
    const AdamArgs args{1e-3, 0.9, 0.999, 1e-8, 1 - 0.9 * 0.9, 1 - 0.999 * 0.999};
    ref.adam(n, p1.data(), g.data(), m1.data(), v1.data(), args);
    simd->adam(n, p2.data(), g.data(), m2.data(), v2.data(), args);
    EXPECT_EQ(p1, p2);
    EXPECT_EQ(m1, m2);
    EXPECT_EQ(v1, v2);
  }
}

TEST(Kernels, RoundHalfAwayFromZero) {
  EXPECT_EQ(round_half_away(0.5), 1.0);
  EXPECT_EQ(round_half_away(-0.5), -1.0);
  EXPECT_EQ(round_half_away(1.5), 2.0);
  EXPECT_EQ(round_half_away(2.5), 3.0);
  EXPECT_EQ(round_half_away(-2.5), -3.0);
  EXPECT_EQ(round_half_away(0.49999999999999994), 0.0);
  EXPECT_EQ(round_half_away(-0.0), 0.0);
}

}  // namespace
}  // namespace zsq::kernels
