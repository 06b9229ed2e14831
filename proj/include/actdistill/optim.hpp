#pragma once

#include "actdistill/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace actdistill {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

/// Moment buffers for one fixed, ordered parameter list.
struct OptimizerState {
  AdamWConfig config;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::uint64_t step = 0;

  OptimizerState() = default;
  OptimizerState(std::span<Tensor* const> params, AdamWConfig cfg);
};

/// One AdamW update from the parameters' accumulated gradients.
///
/// Decoupled decay scales each parameter by (1 - lr * weight_decay) before the
/// bias-corrected Adam update. A tensor with no gradient buffer counts as zero
/// gradient. Non-finite gradients reject the whole step with NumericalError and
/// leave parameters and state untouched.
void adamw_step(OptimizerState& state, std::span<Tensor* const> params, double lr);

/// Global L2 norm of all gradients.
double global_grad_norm(std::span<Tensor* const> params);

/// Rescales gradients so their global norm is at most max_norm. Returns the
/// norm before clipping.
double clip_grad_norm(std::span<Tensor* const> params, double max_norm);

void zero_grads(std::span<Tensor* const> params);

}  // namespace actdistill
