#include "hpmi/adam.hpp"

#include <cmath>

namespace hpmi {

OptimizerState::OptimizerState(const std::vector<const Tensor*>& params, double lr, double beta1, double beta2,
                               double epsilon)
    : lr_(lr), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const Tensor* p : params) {
    m_.push_back(Tensor::zeros(p->shape()));
    v_.push_back(Tensor::zeros(p->shape()));
  }
}

void adam_step(OptimizerState& state, std::span<Tensor* const> params, const std::vector<Tensor>& grads) {
  if (params.size() != state.m_.size() || grads.size() != state.m_.size()) {
    throw ShapeError("adam_step: got " + std::to_string(params.size()) + " parameters / " +
                     std::to_string(grads.size()) + " gradients for " + std::to_string(state.m_.size()) + " slots");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    require_same_shape(*params[i], grads[i], "adam_step");
    require_same_shape(*params[i], state.m_[i], "adam_step");
  }

  state.step_ += 1;
  const double bc1 = 1.0 - std::pow(state.beta1_, static_cast<double>(state.step_));
  const double bc2 = 1.0 - std::pow(state.beta2_, static_cast<double>(state.step_));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Tensor& m = state.m_[i];
    Tensor& v = state.v_[i];
    const Tensor& g = grads[i];
    for (int64_t j = 0; j < p.numel(); ++j) {
      m.at(j) = state.beta1_ * m.at(j) + (1.0 - state.beta1_) * g.at(j);
      v.at(j) = state.beta2_ * v.at(j) + (1.0 - state.beta2_) * g.at(j) * g.at(j);
      const double m_hat = m.at(j) / bc1;
      const double v_hat = v.at(j) / bc2;
      p.at(j) -= state.lr_ * m_hat / (std::sqrt(v_hat) + state.epsilon_);
    }
  }
}

}  // namespace hpmi
