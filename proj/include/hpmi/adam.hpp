#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hpmi/tensor.hpp"

namespace hpmi {

// Standard Adam with bias correction. Moment tensors mirror the parameter
// shapes; the whole state is plain data so training stays deterministic.
class OptimizerState {
 public:
  OptimizerState(const std::vector<const Tensor*>& params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                 double epsilon = 1e-8);

  int64_t step_count() const { return step_; }
  double learning_rate() const { return lr_; }

  friend void adam_step(OptimizerState& state, std::span<Tensor* const> params, const std::vector<Tensor>& grads);

 private:
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  int64_t step_ = 0;
  double lr_;
  double beta1_;
  double beta2_;
  double epsilon_;
};

// One bias-corrected update of every parameter in place.
void adam_step(OptimizerState& state, std::span<Tensor* const> params, const std::vector<Tensor>& grads);

}  // namespace hpmi
