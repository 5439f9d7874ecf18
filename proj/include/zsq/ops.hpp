#pragma once
// Differentiable tensor operations.
//
// Broadcasting is limited to two cases: a one-element tensor against any
// shape, and per-channel vectors against NCHW maps (channel_affine). Anything
// else is a ShapeError naming the op and both shapes.

#include <cstddef>
#include <vector>

#include "zsq/tensor.hpp"

namespace zsq {

// Elementwise arithmetic; either side may be a one-element tensor.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor pow(const Tensor& a, double exponent);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

Tensor sigmoid(const Tensor& a);
// log(sigmoid(a)) evaluated without cancellation.
Tensor log_sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.1);

Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a, std::size_t axis);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Euclidean norm of all elements; the gradient at the origin is taken as zero.
Tensor l2_norm(const Tensor& a);

// [M, K] x [K, N] -> [M, N]
Tensor matmul(const Tensor& a, const Tensor& b);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// x: [N, Cin, H, W], weight: [Cout, Cin, kh, kw], bias: [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opts);

// Mean over N, H, W of an NCHW tensor -> [C].
Tensor channel_mean(const Tensor& x);
// y[n, c, h, w] = x[n, c, h, w] * scale[c] + shift[c].
Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& shift);

enum class BnMode {
  kTrain,    // normalize with batch statistics, update running statistics
  kEval,     // normalize with running statistics
  kMeasure,  // normalize with running statistics, also report batch statistics
};

struct BatchNormResult {
  Tensor output;
  Tensor batch_mean;  // [C]; undefined in kEval
  Tensor batch_var;   // [C], biased; undefined in kEval
};

// running_mean / running_var are [C] handles whose shared storage is updated in kTrain:
// r <- (1 - momentum) r + momentum * batch_stat.
BatchNormResult batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                            Tensor running_mean, Tensor running_var, BnMode mode,
                            double momentum = 0.1, double eps = 1e-5);

Tensor maxpool2d(const Tensor& x, std::size_t kernel, std::size_t stride);
Tensor upsample_nearest2d(const Tensor& x, std::size_t factor);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor reshape(const Tensor& a, Shape shape);

}  // namespace zsq
