#pragma once
// Dense f64 compute kernels with a portable scalar reference and an AVX2
// variant. The variant is chosen once per process from CPUID; every caller
// goes through the dispatch table returned by kernels().

#include <cmath>
#include <cstddef>
#include <string_view>

namespace zsq::kernels {

enum class Isa { kScalar, kAvx2 };

// Row-major matrix view. Element (r, c) lives at data[r * row_stride + c * col_stride].
struct MatView {
  const double* data;
  std::size_t row_stride;
  std::size_t col_stride;
};

// C[M x N] = A[M x K] * B[K x N] (+ C if accumulate). C is dense row-major
// with leading dimension ldc. A and B may be arbitrarily strided, so
// transposed operands are expressed by swapping strides.
using GemmFn = void (*)(std::size_t m, std::size_t n, std::size_t k, MatView a,
                        MatView b, double* c, std::size_t ldc, bool accumulate);

// y[i] += alpha * x[i]
using AxpyFn = void (*)(std::size_t n, double alpha, const double* x, double* y);

// out[i] = s * clamp(round_half_away((x[i] - beta) / s), qmin, qmax) + beta
using FakeQuantFn = void (*)(std::size_t n, const double* x, double step,
                             double beta, double qmin, double qmax, double* out);

struct AdamArgs {
  double lr;
  double beta1;
  double beta2;
  double eps;
  double bias_correction1;  // 1 - beta1^t
  double bias_correction2;  // 1 - beta2^t
};

// In-place Adam update of param given grad and moments m, v.
using AdamFn = void (*)(std::size_t n, double* param, const double* grad,
                        double* m, double* v, const AdamArgs& args);

struct KernelTable {
  Isa isa;
  GemmFn gemm;
  AxpyFn axpy;
  FakeQuantFn fake_quant;
  AdamFn adam;
};

// Selected table. ZSQ_SIMD=scalar in the environment forces the reference path.
const KernelTable& kernels();

const KernelTable& scalar_kernels();
// Null when the build or the CPU lacks AVX2+FMA.
const KernelTable* avx2_kernels();

bool cpu_has_avx2();
std::string_view isa_name(Isa isa);

// Round half away from zero. Shared by both variants so ties agree bit-exactly.
inline double round_half_away(double v) {
  const double t = std::trunc(v);
  const double frac = v - t;
  if (frac >= 0.5) return t + 1.0;
  if (frac <= -0.5) return t - 1.0;
  return t;
}

}  // namespace zsq::kernels
