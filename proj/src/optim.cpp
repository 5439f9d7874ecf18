#include "zsq/optim.hpp"

#include <cmath>
#include <numbers>

#include "zsq/kernels/kernels.hpp"

namespace zsq {

Adam::Adam(std::vector<Tensor> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const Tensor& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double t = static_cast<double>(t_);
  const kernels::AdamArgs args{lr,
                               config_.beta1,
                               config_.beta2,
                               config_.eps,
                               1.0 - std::pow(config_.beta1, t),
                               1.0 - std::pow(config_.beta2, t)};
  const auto& k = kernels::kernels();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    k.adam(p.numel(), p.data().data(), p.grad().data(), m_[i].data(), v_[i].data(), args);
  }
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

double cosine_lr(double base, std::size_t step, std::size_t total) {
  if (total == 0 || step >= total) return 0.0;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

bool grads_finite(const std::vector<Tensor>& params) {
  for (const Tensor& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) {
      if (!std::isfinite(g)) return false;
    }
  }
  return true;
}

}  // namespace zsq
