#include "actdistill/optim.hpp"

#include "actdistill/error.hpp"

#include <cmath>
#include <string>

namespace actdistill {

OptimizerState::OptimizerState(std::span<Tensor* const> params, AdamWConfig cfg) : config(cfg) {
  first_moment.reserve(params.size());
  second_moment.reserve(params.size());
  for (const Tensor* p : params) {
    first_moment.push_back(Matrix::Zero(p->values().rows(), p->values().cols()));
    second_moment.push_back(Matrix::Zero(p->values().rows(), p->values().cols()));
  }
}

void adamw_step(OptimizerState& state, std::span<Tensor* const> params, double lr) {
  if (!(lr >= 0.0)) throw ContractError("adamw_step: learning rate must be non-negative");
  if (params.size() != state.first_moment.size()) {
    throw ContractError("adamw_step: parameter list does not match optimizer state");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = *params[i];
    if (p.values().rows() != state.first_moment[i].rows() ||
        p.values().cols() != state.first_moment[i].cols()) {
      throw ContractError("adamw_step: moment buffer shape mismatch at parameter " +
                          std::to_string(i));
    }
    if (p.has_grad() && !p.grad().allFinite()) {
      throw NumericalError("adamw_step: non-finite gradient at parameter " + std::to_string(i));
    }
  }
  const AdamWConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    p.values() *= (1.0 - lr * c.weight_decay);
    if (p.has_grad()) {
      const Matrix& g = p.grad();
      m = c.beta1 * m + (1.0 - c.beta1) * g;
      v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
    } else {
      m *= c.beta1;
      v *= c.beta2;
    }
    p.values().array() -=
        lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.epsilon);
  }
}

double global_grad_norm(std::span<Tensor* const> params) {
  double sq = 0.0;
  for (const Tensor* p : params) {
    if (p->has_grad()) sq += p->grad().squaredNorm();
  }
  return std::sqrt(sq);
}

double clip_grad_norm(std::span<Tensor* const> params, double max_norm) {
  if (!(max_norm > 0.0)) throw ContractError("clip_grad_norm: max_norm must be positive");
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (Tensor* p : params) {
      if (p->has_grad()) p->grad() *= s;
    }
  }
  return norm;
}

void zero_grads(std::span<Tensor* const> params) {
  for (Tensor* p : params) p->zero_grad();
}

}  // namespace actdistill
