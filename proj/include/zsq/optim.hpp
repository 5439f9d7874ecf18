#pragma once

#include <cstddef>
#include <vector>

#include "zsq/tensor.hpp"

namespace zsq {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, AdamConfig config = {});

  // One update from the accumulated gradients. Parameters that received no
  // gradient keep their value but still advance the shared step counter.
  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamConfig config_;
  std::size_t t_ = 0;
};

// Cosine annealing from base at step 0 to 0 at step total.
double cosine_lr(double base, std::size_t step, std::size_t total);

bool grads_finite(const std::vector<Tensor>& params);

}  // namespace zsq
