#include "zsq/kernels/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace zsq::kernels {
namespace {

void gemm_scalar(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b,
                 double* c, std::size_t ldc, bool accumulate) {
  std::vector<double> row(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(row.begin(), row.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.data[i * a.row_stride + p * a.col_stride];
      const double* brow = b.data + p * b.row_stride;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j * b.col_stride];
    }
    double* crow = c + i * ldc;
    if (accumulate) {
      for (std::size_t j = 0; j < n; ++j) crow[j] += row[j];
    } else {
      std::copy(row.begin(), row.end(), crow);
    }
  }
}

void axpy_scalar(std::size_t n, double alpha, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void fake_quant_scalar(std::size_t n, const double* x, double step, double beta,
                       double qmin, double qmax, double* out) {
  for (std::size_t i = 0; i < n; ++i) {
    const double v = (x[i] - beta) / step;
    const double q = std::clamp(round_half_away(v), qmin, qmax);
    out[i] = q * step + beta;
  }
}

void adam_scalar(std::size_t n, double* param, const double* grad, double* m, double* v,
                 const AdamArgs& args) {
  const double one_m_b1 = 1.0 - args.beta1;
  const double one_m_b2 = 1.0 - args.beta2;
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i];
    m[i] = args.beta1 * m[i] + one_m_b1 * g;
    v[i] = args.beta2 * v[i] + one_m_b2 * (g * g);
    const double mhat = m[i] / args.bias_correction1;
    const double vhat = v[i] / args.bias_correction2;
    param[i] -= args.lr * mhat / (std::sqrt(vhat) + args.eps);
  }
}

}  // namespace

const KernelTable& scalar_kernels() {
  static const KernelTable table{Isa::kScalar, &gemm_scalar, &axpy_scalar,
                                 &fake_quant_scalar, &adam_scalar};
  return table;
}

}  // namespace zsq::kernels
