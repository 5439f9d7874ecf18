#pragma once
// Central finite-difference oracle for reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "zsq/ops.hpp"
#include "zsq/tensor.hpp"

namespace zsq::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape), 0.0, requires_grad);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

// Scalarizes an arbitrary-shaped output with fixed random weights so every
// output element contributes a distinct coefficient.
inline Tensor project(const Tensor& out, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  Tensor weights = random_tensor(out.shape(), rng, -1.0, 1.0, false);
  return sum(mul(out, weights));
}

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t probes = 0;
};

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Compares backward() against (f(x+h) - f(x-h)) / 2h on `probes_per_input`
// random coordinates of every input that requires grad.
inline GradCheckReport grad_check(std::vector<Tensor> inputs, const LossFn& loss_fn,
                                  std::mt19937_64& rng, std::size_t probes_per_input = 5,
                                  double h = 1e-5, double floor = 1e-6) {
  Tape::current().clear();
  for (Tensor& t : inputs)
    if (t.requires_grad()) t.zero_grad();
  Tensor loss = loss_fn(inputs);
  backward(loss);

  GradCheckReport report;
  NoGradGuard no_grad;
  for (Tensor& t : inputs) {
    if (!t.requires_grad()) continue;
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    std::uniform_int_distribution<std::size_t> pick(0, t.numel() - 1);
    for (std::size_t p = 0; p < probes_per_input; ++p) {
      const std::size_t i = pick(rng);
      const double orig = t.data()[i];
      t.data()[i] = orig + h;
      const double fp = loss_fn(inputs).item();
      t.data()[i] = orig - h;
      const double fm = loss_fn(inputs).item();
      t.data()[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), floor});
      report.max_rel_err = std::max(report.max_rel_err, std::abs(numeric - analytic[i]) / denom);
      ++report.probes;
    }
  }
  return report;
}

}  // namespace zsq::testing
