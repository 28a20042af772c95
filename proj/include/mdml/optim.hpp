#pragma once

#include <cstdint>
#include <string>

#include "mdml/tensor.hpp"

namespace mdml {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment accumulators for one parameter tensor.
struct AdamState {
  Array m;
  Array v;
  std::int64_t step = 0;
};

class OptimError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One Adam update. Deterministic; throws OptimError naming the parameter
/// when the gradient contains non-finite values.
void adam_step(const std::string& param_name, Array& param, const Array& grad, AdamState& state, const AdamConfig& cfg);

/// Constant learning rate with linear warmup from 0 over `warmup_steps`.
double warmup_lr(double base_lr, std::int64_t step, std::int64_t warmup_steps);

}  // namespace mdml
