#pragma once

#include <vector>

#include "synthkd/array.hpp"
#include "synthkd/nets.hpp"

namespace synthkd {

// SGD with momentum and decoupled-from-nothing weight decay (decay is added
// to the gradient, the classic formulation).
class SgdOptimizer {
 public:
  SgdOptimizer(NamedParams params, double momentum, double weight_decay);

  void step(double lr);
  void zero_grad();

 private:
  std::vector<Array> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_;
  double weight_decay_;
};

class AdamOptimizer {
 public:
  explicit AdamOptimizer(NamedParams params, double beta1 = 0.9, double beta2 = 0.999,
                         double eps = 1e-8);

  void step(double lr);
  void zero_grad();

 private:
  std::vector<Array> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  long step_count_ = 0;
};

// Step-decay schedule: lr/10 after each milestone fraction of total epochs.
double step_decay_lr(double base_lr, int epoch, int total_epochs,
                     std::span<const double> milestone_fractions);

}  // namespace synthkd
