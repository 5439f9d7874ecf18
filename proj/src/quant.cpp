#include "zsq/quant.hpp"

#include <algorithm>
#include <cmath>

#include "zsq/error.hpp"
#include "zsq/kernels/kernels.hpp"

namespace zsq {

QuantizerParams QuantizerParams::make(int bits, QuantKind kind, bool asymmetric, double step) {
  QuantizerParams q;
  q.bits = bits;
  q.kind = kind;
  q.asymmetric = asymmetric;
  q.step = Tensor({1}, step, true);
  q.offset = Tensor({1}, 0.0, asymmetric);
  validate(q);
  return q;
}

double QuantizerParams::q_min() const { return -std::ldexp(1.0, bits - 1); }
double QuantizerParams::q_max() const { return std::ldexp(1.0, bits - 1) - 1.0; }

QuantizerParams QuantizerParams::clone() const {
  QuantizerParams q = *this;
  q.step = Tensor(step.shape(), step.values(), step.requires_grad());
  q.offset = Tensor(offset.shape(), offset.values(), offset.requires_grad());
  return q;
}

void validate(const QuantizerParams& q) {
  if (q.bits < 2) throw ValidationError("quantizer: bit width " + std::to_string(q.bits) + " < 2");
  if (!q.step.defined() || q.step.numel() != 1) throw ValidationError("quantizer: step must be a single value");
  if (!(q.step_value() > 0.0)) {
    throw ValidationError("quantizer: step must be positive, got " + std::to_string(q.step_value()));
  }
}

SteGrads ste_backward(const Tensor& upstream, const Tensor& x, const QuantizerParams& q) {
  if (upstream.shape() != x.shape()) {
    throw ShapeError("ste_backward: upstream " + shape_str(upstream.shape()) + " vs input " +
                     shape_str(x.shape()));
  }
  SteGrads out;
  out.grad_x = Tensor(x.shape());
  const auto up = upstream.data();
  auto gx = out.grad_x.data();
  if (q.passthrough()) {
    std::copy(up.begin(), up.end(), gx.begin());
    if (q.asymmetric) out.grad_offset = 0.0;
    return out;
  }
  const double s = q.step_value();
  const double beta = q.offset_value();
  const double lo = q.q_min(), hi = q.q_max();
  const double g = 1.0 / std::sqrt(static_cast<double>(x.numel()) * hi);
  const auto xs = x.data();
  double gs = 0.0, gb = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double v = (xs[i] - beta) / s;
    if (v < lo) {
      gs += up[i] * lo;
      gb += up[i];
    } else if (v > hi) {
      gs += up[i] * hi;
      gb += up[i];
    } else {
      gx[i] = up[i];
      gs += up[i] * (kernels::round_half_away(v) - v);
    }
  }
  out.grad_step = gs * g;
  if (q.asymmetric) out.grad_offset = gb;
  return out;
}

Tensor fake_quantize(const Tensor& x, const QuantizerParams& q) {
  validate(q);
  if (q.passthrough()) return x;
  Tensor out(x.shape());
  kernels::kernels().fake_quant(x.numel(), x.data().data(), q.step_value(), q.offset_value(),
                                q.q_min(), q.q_max(), out.data().data());
  const bool offset_learnable = q.asymmetric && q.offset.requires_grad();
  if (needs_grad({&x, &q.step}) || (offset_learnable && needs_grad({&q.offset}))) {
    out.set_requires_grad(true);
    Tape::current().record([x, q, out]() {
      if (!out.has_grad()) return;
      const Tensor upstream(out.shape(), std::vector<double>(out.grad().begin(), out.grad().end()));
      const SteGrads g = ste_backward(upstream, x, q);
      if (x.requires_grad()) {
        auto gx = x.grad();
        const auto src = g.grad_x.data();
        kernels::kernels().axpy(gx.size(), 1.0, src.data(), gx.data());
      }
      if (q.step.requires_grad()) q.step.grad()[0] += g.grad_step;
      if (q.asymmetric && q.offset.requires_grad() && g.grad_offset) q.offset.grad()[0] += *g.grad_offset;
    });
  }
  return out;
}

QuantizerParams init_step_from_calibration(std::span<const double> samples, QuantizerParams q) {
  if (samples.empty()) throw ValidationError("init_step_from_calibration: no samples");
  if (q.bits < 2) throw ValidationError("quantizer: bit width " + std::to_string(q.bits) + " < 2");
  double abs_sum = 0.0;
  double lo = samples[0], hi = samples[0];
  for (double v : samples) {
    abs_sum += std::abs(v);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double mean_abs = abs_sum / static_cast<double>(samples.size());
  double s = 2.0 * mean_abs / std::sqrt(q.q_max());
  if (!(s > 0.0)) {
    warn("init_step_from_calibration: all-zero calibration samples, step floored to 1e-8");
    s = kMinStep;
  }
  double beta = 0.0;
  if (q.asymmetric) {
    const double span = q.q_max() - q.q_min();
    if (s * span < hi - lo) s = (hi - lo) / span;
    beta = lo - s * q.q_min();
  }
  if (!q.step.defined()) q.step = Tensor({1}, 0.0, true);
  if (!q.offset.defined()) q.offset = Tensor({1}, 0.0, q.asymmetric);
  q.step.data()[0] = s;
  q.offset.data()[0] = beta;
  return q;
}

void clamp_step(QuantizerParams& q) {
  double& s = q.step.values()[0];
  if (!(s > kMinStep)) s = kMinStep;
}

}  // namespace zsq
