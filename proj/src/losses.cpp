#include "actdistill/losses.hpp"

#include "actdistill/error.hpp"
#include "actdistill/ops.hpp"

#include <cmath>
#include <string>

namespace actdistill {

void LossWeights::validate() const {
  const double v[] = {alpha, beta, eta, gamma, kappa};
  const char* names[] = {"loss.alpha", "loss.beta", "loss.eta", "loss.gamma", "loss.kappa"};
  for (int i = 0; i < 5; ++i) {
    if (!(v[i] >= 0.0) || !std::isfinite(v[i])) {
      throw ConfigError(std::string(names[i]) + " must be finite and >= 0");
    }
  }
}

Var semantic_loss(const Var& s_stu, const Var& s_tea, double eta) {
  if (s_stu.rows() < 1) throw ContractError("semantic_loss: empty batch");
  // 1 - cos(a, b) = ||a/|a| - b/|b|||^2 / 2, which is exactly 0 for equal rows.
  const Var diff = ops::sub(ops::normalize_rows(s_stu), ops::normalize_rows(s_tea));
  const Var instance = ops::scale(ops::mean_all(ops::squared_norm_rows(diff)), 0.5);
  if (eta == 0.0) return instance;
  const Var relational = ops::frobenius_sq(ops::cosine_gram(s_stu), ops::cosine_gram(s_tea));
  return ops::add(instance, ops::scale(relational, eta));
}

Var action_loss(const Var& pred, const Var& target, const Var& teacher,
                const std::optional<Var>& previous, bool stop_gradient) {
  auto term = [&](const Var& other) {
    return ops::mean_all(ops::squared_norm_rows(ops::sub(pred, other)));
  };
  Var loss = ops::add(term(target), term(teacher));
  if (previous) loss = ops::add(loss, term(stop_gradient ? ops::stop_grad(*previous) : *previous));
  return loss;
}

std::vector<double> lambda_weights(std::size_t layers, double kappa) {
  if (layers == 0) throw ContractError("lambda_weights: L must be >= 1");
  std::vector<double> out(layers);
  for (std::size_t l = 1; l <= layers; ++l) {
    out[l - 1] = std::pow(static_cast<double>(l) / static_cast<double>(layers), kappa);
  }
  return out;
}

Var load_balance(const Var& gates) {
  const Index L = gates.cols();
  if (L < 1) throw ContractError("load_balance: no gates");
  // sum_l (g_l - mean)^2 = (1/L) sum_{i<j} (g_i - g_j)^2, which is exactly 0 for equal gates.
  const Index pairs = L * (L - 1) / 2;
  if (pairs == 0) return ops::mean_all(ops::scale(gates, 0.0));
  Matrix diff = Matrix::Zero(L, pairs);
  Index c = 0;
  for (Index i = 0; i < L; ++i) {
    for (Index j = i + 1; j < L; ++j, ++c) {
      diff(i, c) = 1.0;
      diff(j, c) = -1.0;
    }
  }
  const Var d = ops::matmul(gates, gates.tape().constant(std::move(diff), "pair_diff"));
  return ops::mean_all(ops::scale(ops::squared_norm_rows(d), 1.0 / static_cast<double>(L)));
}

double LossReport::recompose(const LossWeights& w) const {
  double total_ = 0.0;
  for (std::size_t l = 0; l < lambda.size(); ++l) {
    total_ += lambda[l] * (w.alpha * sem[l] + w.beta * act[l]);
  }
  return total_ + w.gamma * lb;
}

TotalLoss total_loss(std::span<const Var> sem, std::span<const Var> act, const Var& gates,
                     const LossWeights& w) {
  w.validate();
  const std::size_t L = static_cast<std::size_t>(gates.cols());
  if ((w.use_semantic && sem.size() != L) || (w.use_action && act.size() != L)) {
    throw ContractError("total_loss: per-layer terms must match the gate count L=" + std::to_string(L));
  }
  TotalLoss out;
  out.report.lambda = lambda_weights(L, w.kappa);
  out.report.sem.assign(L, 0.0);
  out.report.act.assign(L, 0.0);
  out.report.gate_mean = gates.value().colwise().mean();
  Tape& tape = gates.tape();
  Var total = tape.constant(Matrix::Zero(1, 1), "zero");
  for (std::size_t l = 0; l < L; ++l) {
    const double lambda = out.report.lambda[l];
    if (w.use_semantic) {
      out.report.sem[l] = sem[l].item();
      total = ops::add(total, ops::scale(sem[l], lambda * w.alpha));
    }
    if (w.use_action) {
      out.report.act[l] = act[l].item();
      total = ops::add(total, ops::scale(act[l], lambda * w.beta));
    }
  }
  if (w.use_load_balance) {
    const Var lb = load_balance(gates);
    out.report.lb = lb.item();
    total = ops::add(total, ops::scale(lb, w.gamma));
  }
  out.total = total;
  out.report.total = total.item();
  return out;
}

}  // namespace actdistill
