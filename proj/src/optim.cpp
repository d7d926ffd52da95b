#include "synthkd/optim.hpp"

#include <cmath>

namespace synthkd {

SgdOptimizer::SgdOptimizer(NamedParams params, double momentum, double weight_decay)
    : momentum_(momentum), weight_decay_(weight_decay) {
  for (auto& [name, p] : params) {
    params_.push_back(p);
    velocity_.emplace_back(p.size(), 0.0);
  }
}

void SgdOptimizer::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Array& p = params_[i];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto data = p.data_mut();
    std::vector<double>& v = velocity_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double grad = g[j] + weight_decay_ * data[j];
      v[j] = momentum_ * v[j] + grad;
      data[j] -= lr * v[j];
    }
  }
}

void SgdOptimizer::zero_grad() {
  for (Array& p : params_) p.zero_grad();
}

AdamOptimizer::AdamOptimizer(NamedParams params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto& [name, p] : params) {
    params_.push_back(p);
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void AdamOptimizer::step(double lr) {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(beta1_, step_count_);
  const double bc2 = 1.0 - std::pow(beta2_, step_count_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Array& p = params_[i];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto data = p.data_mut();
    std::vector<double>& m = m_[i];
    std::vector<double>& v = v_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      data[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
    }
  }
}

void AdamOptimizer::zero_grad() {
  for (Array& p : params_) p.zero_grad();
}

double step_decay_lr(double base_lr, int epoch, int total_epochs,
                     std::span<const double> milestone_fractions) {
  double lr = base_lr;
  for (double frac : milestone_fractions) {
    if (epoch >= static_cast<int>(frac * total_epochs)) lr *= 0.1;
  }
  return lr;
}

}  // namespace synthkd
