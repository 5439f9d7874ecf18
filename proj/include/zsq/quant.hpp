#pragma once
// Per-tensor fake quantization with a learnable step size (LSQ) and an
// optional learnable offset (LSQ+).
//
//   v     = (x - beta) / s
//   x_hat = s * clamp(round(v), -2^(b-1), 2^(b-1) - 1) + beta
//
// round() is round-half-away-from-zero. Gradients use the straight-through
// estimator: d x_hat / dx = 1 inside the clip range and 0 outside, and the
// step gradient is scaled by g = 1 / sqrt(numel(x) * q_max).

#include <optional>
#include <span>
#include <string>

#include "zsq/tensor.hpp"

namespace zsq {

enum class QuantKind { kWeight, kActivation };

// Bit width that disables quantization (identity pass-through).
inline constexpr int kPassthroughBits = 32;

struct QuantizerParams {
  int bits = 8;
  Tensor step;    // one element, learnable
  Tensor offset;  // one element, learnable only when asymmetric
  QuantKind kind = QuantKind::kWeight;
  bool asymmetric = false;

  static QuantizerParams make(int bits, QuantKind kind, bool asymmetric = false, double step = 1.0);

  double q_min() const;
  double q_max() const;
  double step_value() const { return step.data()[0]; }
  double offset_value() const { return asymmetric ? offset.data()[0] : 0.0; }
  bool passthrough() const { return bits >= kPassthroughBits; }

  // Deep copy (fresh tensors).
  QuantizerParams clone() const;
};

// Throws ValidationError for bits < 2 or a non-positive step.
void validate(const QuantizerParams& q);

// Differentiable with respect to x, q.step and (asymmetric only) q.offset.
Tensor fake_quantize(const Tensor& x, const QuantizerParams& q);

struct SteGrads {
  Tensor grad_x;
  double grad_step = 0.0;
  std::optional<double> grad_offset;  // only for asymmetric quantizers
};

// The gradients fake_quantize propagates for a given upstream gradient.
SteGrads ste_backward(const Tensor& upstream, const Tensor& x, const QuantizerParams& q);

// LSQ initialization: s = 2 * mean(|x|) / sqrt(q_max). Asymmetric quantizers
// additionally place the lowest level at min(x), widening s if needed so the
// grid reaches max(x). All-zero samples give s = 1e-8 and a warning.
QuantizerParams init_step_from_calibration(std::span<const double> samples, QuantizerParams q);

// Keeps s strictly positive after an optimizer step.
inline constexpr double kMinStep = 1e-8;
void clamp_step(QuantizerParams& q);

}  // namespace zsq
