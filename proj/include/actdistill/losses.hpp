#pragma once

#include "actdistill/tape.hpp"

#include <optional>
#include <span>
#include <vector>

namespace actdistill {

struct LossWeights {
  double alpha = 1.0;
  double beta = 1.0;
  double eta = 0.5;
  double gamma = 0.05;
  double kappa = 2.0;
  // Ablation switches; a disabled term contributes exactly zero.
  bool use_semantic = true;
  bool use_action = true;
  bool use_load_balance = true;

  void validate() const;
};

/// mean_b (1 - cos(s_stu_b, s_tea_b)) + eta ||Gram(s_stu) - Gram(s_tea)||_F^2,
/// with Gram the B x B pairwise cosine matrix. Inputs are [B, d_c].
Var semantic_loss(const Var& s_stu, const Var& s_tea, double eta);

/// Batch mean of ||pred - a||^2 + ||pred - teacher||^2 + ||pred - sg(previous)||^2.
/// The third term is dropped when `previous` is empty (first layer). With
/// stop_gradient false the previous prediction is used as-is.
Var action_loss(const Var& pred, const Var& target, const Var& teacher,
                const std::optional<Var>& previous, bool stop_gradient = true);

/// lambda_l = (l / L)^kappa for l = 1..L.
std::vector<double> lambda_weights(std::size_t layers, double kappa);

/// Per row sum_l (g_l - mean(g))^2, averaged over rows. Gates are [B, L].
Var load_balance(const Var& gates);

struct LossReport {
  std::vector<double> sem;
  std::vector<double> act;
  std::vector<double> lambda;
  double lb = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;  // pre-clip global norm, filled by the trainer
  RowVector gate_mean;     // [L], batch mean of the gates

  /// sum_l lambda_l (alpha sem_l + beta act_l) + gamma lb from the parts.
  double recompose(const LossWeights& w) const;
};

struct TotalLoss {
  Var total;
  LossReport report;
};

/// Combines per-layer terms and the gate regularizer. Disabled terms are left
/// out of the graph and reported as 0.
TotalLoss total_loss(std::span<const Var> sem, std::span<const Var> act, const Var& gates,
                     const LossWeights& w);

}  // namespace actdistill
