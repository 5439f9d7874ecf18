#include "zsq/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "zsq/error.hpp"
#include "zsq/kernels/kernels.hpp"

namespace zsq {
namespace {

[[noreturn]] void shape_fail(const std::string& op, const std::string& detail) {
  throw ShapeError(op + ": " + detail);
}

void accumulate(const Tensor& dst, std::span<const double> g) {
  auto d = dst.grad();
  kernels::kernels().axpy(g.size(), 1.0, g.data(), d.data());
}

// Elementwise unary op; derivative receives (x, y) and returns dy/dx.
template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  Tensor out(a.shape());
  const auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  if (needs_grad({&a})) {
    out.set_requires_grad(true);
    Tape::current().record([a, out, deriv]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      const auto xs = a.data();
      const auto ys = out.data();
      auto gx = a.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * deriv(xs[i], ys[i]);
    });
  }
  return out;
}

enum class Bcast { kNone, kScalarA, kScalarB };

Bcast check_binary(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Bcast::kNone;
  if (b.numel() == 1) return Bcast::kScalarB;
  if (a.numel() == 1) return Bcast::kScalarA;
  shape_fail(op, "incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

// Elementwise binary op. dfa/dfb return partial derivatives given (x, y, z).
template <class Fwd, class Da, class Db>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Da dfa, Db dfb) {
  const Bcast mode = check_binary(op, a, b);
  const Shape& shape = mode == Bcast::kScalarA ? b.shape() : a.shape();
  Tensor out(shape);
  const auto xa = a.data();
  const auto xb = b.data();
  auto y = out.data();
  const std::size_t n = y.size();
  auto ia = [mode](std::size_t i) { return mode == Bcast::kScalarA ? 0 : i; };
  auto ib = [mode](std::size_t i) { return mode == Bcast::kScalarB ? 0 : i; };
  for (std::size_t i = 0; i < n; ++i) y[i] = fwd(xa[ia(i)], xb[ib(i)]);
  if (needs_grad({&a, &b})) {
    out.set_requires_grad(true);
    Tape::current().record([a, b, out, dfa, dfb, ia, ib]() mutable {
      if (!out.has_grad()) return;
      const auto gz = out.grad();
      const auto xa = a.data();
      const auto xb = b.data();
      const auto z = out.data();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < gz.size(); ++i)
          ga[ia(i)] += gz[i] * dfa(xa[ia(i)], xb[ib(i)], z[i]);
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < gz.size(); ++i)
          gb[ib(i)] += gz[i] * dfb(xa[ia(i)], xb[ib(i)], z[i]);
      }
    });
  }
  return out;
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void require_nchw(const char* op, const Tensor& x) {
  if (x.dim() != 4) shape_fail(op, "expected NCHW input, got " + shape_str(x.shape()));
}

// Splits a shape around `axis` into outer * extent * inner.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const char* op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    shape_fail(op, "axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double z) { return -z / y; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary(
      a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Tensor square(const Tensor& a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor pow(const Tensor& a, double exponent) {
  return unary(
      a, [exponent](double x) { return std::pow(x, exponent); },
      [exponent](double x, double) { return exponent * std::pow(x, exponent - 1.0); });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& a) {
  return unary(
      a, [](double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); },
      [](double x, double) { return 1.0 - stable_sigmoid(x); });
}

Tensor silu(const Tensor& a) {
  return unary(
      a, [](double x) { return x * stable_sigmoid(x); },
      [](double x, double) {
        const double s = stable_sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary(
      a, [slope](double x) { return x > 0 ? x : slope * x; },
      [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  const AxisSplit s = split_axis("softmax", a.shape(), axis);
  Tensor out(a.shape());
  const auto x = a.data();
  auto y = out.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.extent; ++k) mx = std::max(mx, x[base + k * s.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const double e = std::exp(x[base + k * s.inner] - mx);
        y[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) y[base + k * s.inner] /= total;
    }
  }
  if (needs_grad({&a})) {
    out.set_requires_grad(true);
    Tape::current().record([a, out, s]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      const auto y = out.data();
      auto gx = a.grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.extent * s.inner + in;
          double dot = 0.0;
          for (std::size_t k = 0; k < s.extent; ++k) {
            const std::size_t i = base + k * s.inner;
            dot += gy[i] * y[i];
          }
          for (std::size_t k = 0; k < s.extent; ++k) {
            const std::size_t i = base + k * s.inner;
            gx[i] += y[i] * (gy[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
  const AxisSplit s = split_axis("log_softmax", a.shape(), axis);
  Tensor out(a.shape());
  const auto x = a.data();
  auto y = out.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.extent; ++k) mx = std::max(mx, x[base + k * s.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < s.extent; ++k) total += std::exp(x[base + k * s.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t k = 0; k < s.extent; ++k) y[base + k * s.inner] = x[base + k * s.inner] - lse;
    }
  }
  if (needs_grad({&a})) {
    out.set_requires_grad(true);
    Tape::current().record([a, out, s]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      const auto y = out.data();
      auto gx = a.grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.extent * s.inner + in;
          double total = 0.0;
          for (std::size_t k = 0; k < s.extent; ++k) total += gy[base + k * s.inner];
          for (std::size_t k = 0; k < s.extent; ++k) {
            const std::size_t i = base + k * s.inner;
            gx[i] += gy[i] - std::exp(y[i]) * total;
          }
        }
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  Tensor out = Tensor::scalar(total);
  if (needs_grad({&a})) {
    out.set_requires_grad(true);
    Tape::current().record([a, out]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0];
      for (double& v : a.grad()) v += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) shape_fail("mean", "empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor l2_norm(const Tensor& a) {
  double ss = 0.0;
  for (double v : a.data()) ss += v * v;
  const double norm = std::sqrt(ss);
  Tensor out = Tensor::scalar(norm);
  if (needs_grad({&a})) {
    out.set_requires_grad(true);
    Tape::current().record([a, out, norm]() mutable {
      if (!out.has_grad() || norm == 0.0) return;
      const double g = out.grad()[0] / norm;
      const auto x = a.data();
      auto gx = a.grad();
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g * x[i];
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(0)) {
    shape_fail("matmul", "cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  Tensor out({m, n});
  const auto& kt = kernels::kernels();
  kt.gemm(m, n, k, {a.data().data(), k, 1}, {b.data().data(), n, 1}, out.data().data(), n, false);
  if (needs_grad({&a, &b})) {
    out.set_requires_grad(true);
    Tape::current().record([a, b, out, m, n, k]() mutable {
      if (!out.has_grad()) return;
      const auto& kt = kernels::kernels();
      const double* gc = out.grad().data();
      if (a.requires_grad()) {
        // dA[m x k] = dC[m x n] * B^T
        kt.gemm(m, k, n, {gc, n, 1}, {b.data().data(), 1, n}, a.grad().data(), k, true);
      }
      if (b.requires_grad()) {
        // dB[k x n] = A^T * dC
        kt.gemm(k, n, m, {a.data().data(), 1, k}, {gc, n, 1}, b.grad().data(), n, true);
      }
    });
  }
  return out;
}

Tensor channel_mean(const Tensor& x) {
  require_nchw("channel_mean", x);
  const std::size_t n = x.size(0), c = x.size(1), hw = x.size(2) * x.size(3);
  Tensor out({c});
  const auto xs = x.data();
  auto y = out.data();
  const double inv = 1.0 / static_cast<double>(n * hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double total = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const double* p = xs.data() + (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) total += p[i];
    }
    y[ch] = total * inv;
  }
  if (needs_grad({&x})) {
    out.set_requires_grad(true);
    Tape::current().record([x, out, n, c, hw, inv]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      auto gx = x.grad();
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double g = gy[ch] * inv;
          double* p = gx.data() + (b * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) p[i] += g;
        }
      }
    });
  }
  return out;
}

Tensor channel_affine(const Tensor& x, const Tensor& scale_c, const Tensor& shift_c) {
  require_nchw("channel_affine", x);
  const std::size_t n = x.size(0), c = x.size(1), hw = x.size(2) * x.size(3);
  if (scale_c.numel() != c || shift_c.numel() != c) {
    shape_fail("channel_affine", "per-channel vectors " + shape_str(scale_c.shape()) + " / " +
                                     shape_str(shift_c.shape()) + " do not match input " +
                                     shape_str(x.shape()));
  }
  Tensor out(x.shape());
  const auto xs = x.data();
  const auto sc = scale_c.data();
  const auto sh = shift_c.data();
  auto y = out.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) y[off + i] = xs[off + i] * sc[ch] + sh[ch];
    }
  }
  if (needs_grad({&x, &scale_c, &shift_c})) {
    out.set_requires_grad(true);
    Tape::current().record([x, scale_c, shift_c, out, n, c, hw]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      const auto xs = x.data();
      const auto sc = scale_c.data();
      const bool gx_on = x.requires_grad();
      const bool gs_on = scale_c.requires_grad();
      const bool gb_on = shift_c.requires_grad();
      std::span<double> gx, gs, gb;
      if (gx_on) gx = x.grad();
      if (gs_on) gs = scale_c.grad();
      if (gb_on) gb = shift_c.grad();
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t off = (b * c + ch) * hw;
          double dscale = 0.0, dshift = 0.0;
          for (std::size_t i = 0; i < hw; ++i) {
            const double g = gy[off + i];
            if (gx_on) gx[off + i] += g * sc[ch];
            dscale += g * xs[off + i];
            dshift += g;
          }
          if (gs_on) gs[ch] += dscale;
          if (gb_on) gb[ch] += dshift;
        }
      }
    });
  }
  return out;
}

BatchNormResult batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                            Tensor running_mean, Tensor running_var, BnMode mode,
                            double momentum, double eps) {
  require_nchw("batchnorm2d", x);
  const std::size_t c = x.size(1);
  if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
      running_var.numel() != c) {
    shape_fail("batchnorm2d", "parameter vectors do not match " + std::to_string(c) +
                                  " channels of input " + shape_str(x.shape()));
  }
  BatchNormResult result;
  auto batch_stats = [&]() {
    result.batch_mean = channel_mean(x);
    const Tensor centered = channel_affine(x, Tensor({c}, 1.0), scale(result.batch_mean, -1.0));
    result.batch_var = channel_mean(square(centered));
    return centered;
  };

  if (mode == BnMode::kTrain) {
    const Tensor centered = batch_stats();
    const Tensor inv_std = pow(add_scalar(result.batch_var, eps), -0.5);
    result.output = channel_affine(centered, mul(inv_std, gamma), beta);
    auto rm = running_mean.data();
    auto rv = running_var.data();
    const auto bm = result.batch_mean.data();
    const auto bv = result.batch_var.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      rm[ch] = (1.0 - momentum) * rm[ch] + momentum * bm[ch];
      rv[ch] = (1.0 - momentum) * rv[ch] + momentum * bv[ch];
    }
    return result;
  }

  // Running statistics are constants here; only gamma, beta and x carry gradients.
  Tensor inv_std({c});
  Tensor neg_mean_inv({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    inv_std.data()[ch] = 1.0 / std::sqrt(running_var.data()[ch] + eps);
    neg_mean_inv.data()[ch] = -running_mean.data()[ch] * inv_std.data()[ch];
  }
  const Tensor scale_c = mul(gamma, inv_std);
  const Tensor shift_c = add(mul(gamma, neg_mean_inv), beta);
  result.output = channel_affine(x, scale_c, shift_c);
  if (mode == BnMode::kMeasure) batch_stats();
  return result;
}

Tensor maxpool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  require_nchw("maxpool2d", x);
  const std::size_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  if (kernel == 0 || stride == 0 || h < kernel || w < kernel) {
    shape_fail("maxpool2d", "kernel " + std::to_string(kernel) + " does not fit " + shape_str(x.shape()));
  }
  const std::size_t ho = (h - kernel) / stride + 1, wo = (w - kernel) / stride + 1;
  Tensor out({n, c, ho, wo});
  std::vector<std::size_t> argmax(out.numel());
  const auto xs = x.data();
  auto y = out.data();
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t i = 0; i < ho; ++i) {
      for (std::size_t j = 0; j < wo; ++j, ++o) {
        std::size_t best = base + i * stride * w + j * stride;
        for (std::size_t di = 0; di < kernel; ++di) {
          for (std::size_t dj = 0; dj < kernel; ++dj) {
            const std::size_t idx = base + (i * stride + di) * w + j * stride + dj;
            if (xs[idx] > xs[best]) best = idx;
          }
        }
        argmax[o] = best;
        y[o] = xs[best];
      }
    }
  }
  if (needs_grad({&x})) {
    out.set_requires_grad(true);
    Tape::current().record([x, out, argmax = std::move(argmax)]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[argmax[i]] += gy[i];
    });
  }
  return out;
}

Tensor upsample_nearest2d(const Tensor& x, std::size_t factor) {
  require_nchw("upsample_nearest2d", x);
  if (factor == 0) shape_fail("upsample_nearest2d", "factor must be positive");
  const std::size_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  const std::size_t ho = h * factor, wo = w * factor;
  Tensor out({n, c, ho, wo});
  const auto xs = x.data();
  auto y = out.data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    for (std::size_t i = 0; i < ho; ++i) {
      for (std::size_t j = 0; j < wo; ++j) {
        y[plane * ho * wo + i * wo + j] = xs[plane * h * w + (i / factor) * w + j / factor];
      }
    }
  }
  if (needs_grad({&x})) {
    out.set_requires_grad(true);
    Tape::current().record([x, out, n, c, h, w, factor]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      auto gx = x.grad();
      const std::size_t ho = h * factor, wo = w * factor;
      for (std::size_t plane = 0; plane < n * c; ++plane) {
        for (std::size_t i = 0; i < ho; ++i) {
          for (std::size_t j = 0; j < wo; ++j) {
            gx[plane * h * w + (i / factor) * w + j / factor] += gy[plane * ho * wo + i * wo + j];
          }
        }
      }
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  const Shape& ref = parts.front().shape();
  const AxisSplit ref_split = split_axis("concat", ref, axis);
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.dim() != ref.size()) shape_fail("concat", "rank mismatch " + shape_str(p.shape()) + " vs " + shape_str(ref));
    for (std::size_t d = 0; d < ref.size(); ++d) {
      if (d != axis && p.size(d) != ref[d]) {
        shape_fail("concat", "shape " + shape_str(p.shape()) + " incompatible with " + shape_str(ref) +
                                 " along axis " + std::to_string(axis));
      }
    }
    out_shape[axis] += p.size(axis);
  }
  Tensor out(out_shape);
  const std::size_t outer = ref_split.outer, inner = ref_split.inner;
  const std::size_t total_extent = out_shape[axis];
  auto y = out.data();
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t ext = p.size(axis);
    const auto xs = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(xs.data() + o * ext * inner, ext * inner,
                  y.data() + (o * total_extent + offset) * inner);
    }
    offset += ext;
  }
  bool any = false;
  for (const Tensor& p : parts) any = any || needs_grad({&p});
  if (any) {
    out.set_requires_grad(true);
    Tape::current().record([parts, out, outer, inner, total_extent, axis]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      std::size_t offset = 0;
      for (const Tensor& p : parts) {
        const std::size_t ext = p.size(axis);
        if (p.requires_grad()) {
          auto gx = p.grad();
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = gy.data() + (o * total_extent + offset) * inner;
            double* dst = gx.data() + o * ext * inner;
            for (std::size_t i = 0; i < ext * inner; ++i) dst[i] += src[i];
          }
        }
        offset += ext;
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit s = split_axis("slice", a.shape(), axis);
  if (start + length > s.extent) {
    shape_fail("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                            ") exceeds axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  Tensor out(out_shape);
  const auto xs = a.data();
  auto y = out.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(xs.data() + (o * s.extent + start) * s.inner, length * s.inner,
                y.data() + o * length * s.inner);
  }
  if (needs_grad({&a})) {
    out.set_requires_grad(true);
    Tape::current().record([a, out, s, start, length]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      auto gx = a.grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        const double* src = gy.data() + o * length * s.inner;
        double* dst = gx.data() + (o * s.extent + start) * s.inner;
        for (std::size_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    shape_fail("reshape", "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), a.values());
  if (needs_grad({&a})) {
    out.set_requires_grad(true);
    Tape::current().record([a, out]() mutable {
      if (!out.has_grad()) return;
      accumulate(a, out.grad());
    });
  }
  return out;
}

}  // namespace zsq
