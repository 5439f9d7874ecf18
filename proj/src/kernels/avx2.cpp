// Compiled with -mavx2 -mfma -ffp-contract=off. Only reached after a CPUID
// check, so nothing here may run on the baseline path.
#include "zsq/kernels/kernels.hpp"

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <vector>

namespace zsq::kernels {
namespace {

constexpr std::size_t kRows = 4;
constexpr std::size_t kCols = 8;

// Packs op(B) into a dense K x N buffer when its columns are not contiguous.
const double* contiguous_b(std::size_t n, std::size_t k, MatView b,
                           std::vector<double>& scratch) {
  if (b.col_stride == 1 && b.row_stride == n) return b.data;
  scratch.resize(n * k);
  for (std::size_t p = 0; p < k; ++p) {
    double* dst = scratch.data() + p * n;
    const double* src = b.data + p * b.row_stride;
    for (std::size_t j = 0; j < n; ++j) dst[j] = src[j * b.col_stride];
  }
  return scratch.data();
}

inline void store_block(double* dst, __m256d acc, bool accumulate) {
  if (accumulate) acc = _mm256_add_pd(_mm256_loadu_pd(dst), acc);
  _mm256_storeu_pd(dst, acc);
}

void gemm_avx2(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b,
               double* c, std::size_t ldc, bool accumulate) {
  thread_local std::vector<double> scratch;
  const double* bp = contiguous_b(n, k, b, scratch);
  const std::size_t n_vec = n - n % kCols;
  const std::size_t m_blk = m - m % kRows;
  auto a_at = [&](std::size_t i, std::size_t p) {
    return a.data[i * a.row_stride + p * a.col_stride];
  };

  for (std::size_t i = 0; i < m_blk; i += kRows) {
    for (std::size_t j = 0; j < n_vec; j += kCols) {
      __m256d c00 = _mm256_setzero_pd(), c01 = _mm256_setzero_pd();
      __m256d c10 = _mm256_setzero_pd(), c11 = _mm256_setzero_pd();
      __m256d c20 = _mm256_setzero_pd(), c21 = _mm256_setzero_pd();
      __m256d c30 = _mm256_setzero_pd(), c31 = _mm256_setzero_pd();
      for (std::size_t p = 0; p < k; ++p) {
        const double* brow = bp + p * n + j;
        const __m256d b0 = _mm256_loadu_pd(brow);
        const __m256d b1 = _mm256_loadu_pd(brow + 4);
        __m256d av = _mm256_set1_pd(a_at(i, p));
        c00 = _mm256_fmadd_pd(av, b0, c00);
        c01 = _mm256_fmadd_pd(av, b1, c01);
        av = _mm256_set1_pd(a_at(i + 1, p));
        c10 = _mm256_fmadd_pd(av, b0, c10);
        c11 = _mm256_fmadd_pd(av, b1, c11);
        av = _mm256_set1_pd(a_at(i + 2, p));
        c20 = _mm256_fmadd_pd(av, b0, c20);
        c21 = _mm256_fmadd_pd(av, b1, c21);
        av = _mm256_set1_pd(a_at(i + 3, p));
        c30 = _mm256_fmadd_pd(av, b0, c30);
        c31 = _mm256_fmadd_pd(av, b1, c31);
      }
      double* crow = c + i * ldc + j;
      store_block(crow, c00, accumulate);
      store_block(crow + 4, c01, accumulate);
      store_block(crow + ldc, c10, accumulate);
      store_block(crow + ldc + 4, c11, accumulate);
      store_block(crow + 2 * ldc, c20, accumulate);
      store_block(crow + 2 * ldc + 4, c21, accumulate);
      store_block(crow + 3 * ldc, c30, accumulate);
      store_block(crow + 3 * ldc + 4, c31, accumulate);
    }
  }
  // Leftover rows, vectorized columns.
  for (std::size_t i = m_blk; i < m; ++i) {
    for (std::size_t j = 0; j < n_vec; j += kCols) {
      __m256d c0 = _mm256_setzero_pd(), c1 = _mm256_setzero_pd();
      for (std::size_t p = 0; p < k; ++p) {
        const __m256d av = _mm256_set1_pd(a_at(i, p));
        c0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp + p * n + j), c0);
        c1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp + p * n + j + 4), c1);
      }
      store_block(c + i * ldc + j, c0, accumulate);
      store_block(c + i * ldc + j + 4, c1, accumulate);
    }
  }
  // Leftover columns for all rows.
  if (n_vec < n) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = n_vec; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc = std::fma(a_at(i, p), bp[p * n + j], acc);
        double& dst = c[i * ldc + j];
        dst = accumulate ? dst + acc : acc;
      }
    }
  }
}

void axpy_avx2(std::size_t n, double alpha, const double* x, double* y) {
  const __m256d av = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d prod = _mm256_mul_pd(av, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void fake_quant_avx2(std::size_t n, const double* x, double step, double beta,
                     double qmin, double qmax, double* out) {
  const __m256d vstep = _mm256_set1_pd(step);
  const __m256d vbeta = _mm256_set1_pd(beta);
  const __m256d vlo = _mm256_set1_pd(qmin);
  const __m256d vhi = _mm256_set1_pd(qmax);
  const __m256d half = _mm256_set1_pd(0.5);
  const __m256d neg_half = _mm256_set1_pd(-0.5);
  const __m256d one = _mm256_set1_pd(1.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_div_pd(_mm256_sub_pd(_mm256_loadu_pd(x + i), vbeta), vstep);
    const __m256d t = _mm256_round_pd(v, _MM_FROUND_TO_ZERO | _MM_FROUND_NO_EXC);
    const __m256d frac = _mm256_sub_pd(v, t);
    const __m256d up = _mm256_and_pd(_mm256_cmp_pd(frac, half, _CMP_GE_OQ), one);
    const __m256d down = _mm256_and_pd(_mm256_cmp_pd(frac, neg_half, _CMP_LE_OQ), one);
    __m256d q = _mm256_sub_pd(_mm256_add_pd(t, up), down);
    q = _mm256_min_pd(_mm256_max_pd(q, vlo), vhi);
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_mul_pd(q, vstep), vbeta));
  }
  for (; i < n; ++i) {
    const double q = std::clamp(round_half_away((x[i] - beta) / step), qmin, qmax);
    out[i] = q * step + beta;
  }
}

void adam_avx2(std::size_t n, double* param, const double* grad, double* m, double* v,
               const AdamArgs& args) {
  const __m256d b1 = _mm256_set1_pd(args.beta1);
  const __m256d b2 = _mm256_set1_pd(args.beta2);
  const __m256d omb1 = _mm256_set1_pd(1.0 - args.beta1);
  const __m256d omb2 = _mm256_set1_pd(1.0 - args.beta2);
  const __m256d bc1 = _mm256_set1_pd(args.bias_correction1);
  const __m256d bc2 = _mm256_set1_pd(args.bias_correction2);
  const __m256d lr = _mm256_set1_pd(args.lr);
  const __m256d eps = _mm256_set1_pd(args.eps);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d g = _mm256_loadu_pd(grad + i);
    const __m256d mi = _mm256_add_pd(_mm256_mul_pd(b1, _mm256_loadu_pd(m + i)),
                                     _mm256_mul_pd(omb1, g));
    const __m256d vi = _mm256_add_pd(_mm256_mul_pd(b2, _mm256_loadu_pd(v + i)),
                                     _mm256_mul_pd(omb2, _mm256_mul_pd(g, g)));
    _mm256_storeu_pd(m + i, mi);
    _mm256_storeu_pd(v + i, vi);
    const __m256d mhat = _mm256_div_pd(mi, bc1);
    const __m256d vhat = _mm256_div_pd(vi, bc2);
    const __m256d denom = _mm256_add_pd(_mm256_sqrt_pd(vhat), eps);
    const __m256d upd = _mm256_div_pd(_mm256_mul_pd(lr, mhat), denom);
    _mm256_storeu_pd(param + i, _mm256_sub_pd(_mm256_loadu_pd(param + i), upd));
  }
  const double one_m_b1 = 1.0 - args.beta1;
  const double one_m_b2 = 1.0 - args.beta2;
  for (; i < n; ++i) {
    const double g = grad[i];
    m[i] = args.beta1 * m[i] + one_m_b1 * g;
    v[i] = args.beta2 * v[i] + one_m_b2 * (g * g);
    const double mhat = m[i] / args.bias_correction1;
    const double vhat = v[i] / args.bias_correction2;
    param[i] -= args.lr * mhat / (std::sqrt(vhat) + args.eps);
  }
}

}  // namespace

const KernelTable* avx2_kernels() {
  static const KernelTable table{Isa::kAvx2, &gemm_avx2, &axpy_avx2, &fake_quant_avx2,
                                 &adam_avx2};
  return cpu_has_avx2() ? &table : nullptr;
}

}  // namespace zsq::kernels
