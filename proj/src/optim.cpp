#include "mdml/optim.hpp"

#include <cmath>

namespace mdml {

void adam_step(const std::string& param_name, Array& param, const Array& grad, AdamState& state, const AdamConfig& cfg) {
  if (param.size() != grad.size()) {
    throw OptimError("adam: gradient size " + std::to_string(grad.size()) + " does not match parameter '" + param_name + "' of size " + std::to_string(param.size()));
  }
  if (!grad.allFinite()) {
    throw OptimError("adam: non-finite gradient for parameter '" + param_name + "'");
  }
  if (state.m.size() == 0) {
    state.m = Array::Zero(param.size());
    state.v = Array::Zero(param.size());
  }
  if (state.m.size() != param.size()) {
    throw OptimError("adam: state size does not match parameter '" + param_name + "'");
  }
  state.step += 1;
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad;
  state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad.square();
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const Array mhat = state.m / bc1;
  const Array vhat = state.v / bc2;
  param -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
}

double warmup_lr(double base_lr, std::int64_t step, std::int64_t warmup_steps) {
  if (warmup_steps <= 0) return base_lr;
  if (step >= warmup_steps) return base_lr;
  return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
}

}  // namespace mdml
