#include "actdistill/graph.hpp"

#include "actdistill/error.hpp"

#include <cmath>

namespace actdistill {

CapsuleParams CapsuleParams::init(std::size_t width, std::size_t affinity_dim,
                                  std::size_t capsule_dim, Rng& rng) {
  CapsuleParams p;
  p.phi = kaiming_uniform(width, affinity_dim, rng);
  p.psi = kaiming_uniform(width, affinity_dim, rng);
  p.w1 = kaiming_uniform(width, width, rng);
  p.w2 = kaiming_uniform(width, width, rng);
  p.wp = bias_uniform(width, width, rng);
  p.proj = kaiming_uniform(width, capsule_dim, rng);
  p.std_mean = Tensor({capsule_dim});
  p.std_var = Tensor({capsule_dim}, Matrix::Ones(1, static_cast<Index>(capsule_dim)));
  return p;
}

namespace {

template <typename Self, typename F>
void visit_capsule(Self& p, const std::string& prefix, const F& f) {
  f(prefix + "phi", p.phi);
  f(prefix + "psi", p.psi);
  f(prefix + "W1", p.w1);
  f(prefix + "W2", p.w2);
  f(prefix + "wp", p.wp);
  f(prefix + "proj", p.proj);
  f(prefix + "std_mean", p.std_mean);
  f(prefix + "std_var", p.std_var);
}

}  // namespace

void CapsuleParams::visit(const std::string& prefix, const ParamVisitor& f) {
  visit_capsule(*this, prefix, f);
}
void CapsuleParams::visit(const std::string& prefix, const ConstParamVisitor& f) const {
  visit_capsule(*this, prefix, f);
}

Var SparseAdjacency::dense() const {
  return ops::scatter_cols(weights, neighbors, neighbors.rows());
}

Var build_affinity(const Var& h, const CapsuleParams& params) {
  if (h.rows() < 2) throw ContractError("build_affinity: need N >= 2 tokens");
  Tape& tape = h.tape();
  const Var a = ops::matmul(h, tape.parameter(params.phi));
  const Var b = ops::matmul(h, tape.parameter(params.psi));
  const Var logits = ops::matmul(a, ops::transpose(b));
  if (logits.value().maxCoeff() > 700.0) {
    throw NumericalError("build_affinity: affinity exponent " +
                         std::to_string(logits.value().maxCoeff()) +
                         " exceeds 700; rescale the affinity projections or reduce affinity_dim");
  }
  return ops::exp(logits);
}

SparseAdjacency topk_normalize(const Var& affinity, std::size_t k, double eps) {
  if (k < 1 || k > static_cast<std::size_t>(affinity.cols())) {
    throw ContractError("topk_normalize: k=" + std::to_string(k) + " outside [1, N=" +
                        std::to_string(affinity.cols()) + "]");
  }
  SparseAdjacency adj;
  adj.neighbors = ops::topk_indices(affinity.value(), static_cast<Index>(k));
  adj.weights = ops::l1_normalize_rows(ops::gather_cols(affinity, adj.neighbors), eps);
  return adj;
}

Var aggregate(const Var& h, const SparseAdjacency& adj, const Tensor& w) {
  return ops::matmul(adj.dense(), ops::matmul(h, h.tape().parameter(w)));
}

Var message_pass(const Var& h, const SparseAdjacency& adj, const CapsuleParams& params,
                 const GraphOptions& opts, Rng* rng, bool train) {
  Var x = ops::relu(aggregate(h, adj, params.w1));
  x = ops::dropout(x, opts.dropout, rng, train);
  x = ops::relu(aggregate(x, adj, params.w2));
  return ops::dropout(x, opts.dropout, rng, train);
}

Var standardize(const Var& projected, const CapsuleParams& params, const GraphOptions& opts) {
  if (!params.calibrated) return projected;
  Tape& tape = projected.tape();
  const RowVector inv_std =
      (params.std_var.values().row(0).array() + opts.std_eps).rsqrt().matrix();
  const Var centered = ops::sub(projected, tape.parameter(params.std_mean));
  return ops::mul_row(centered, tape.constant(Matrix(inv_std), "inv_std"));
}

namespace {

Var pool_logits(const Var& h, const CapsuleParams& params) {
  // [N, d] x [d, 1] -> transposed to a [1, N] row.
  return ops::transpose(ops::matmul(h, ops::transpose(h.tape().parameter(params.wp))));
}

}  // namespace

PooledCapsule attention_pool(const Var& h, const CapsuleParams& params, const GraphOptions& opts) {
  PooledCapsule out;
  out.alpha = ops::softmax_rows(pool_logits(h, params));
  out.pooled = ops::matmul(out.alpha, h);
  out.capsule = standardize(ops::matmul(out.pooled, h.tape().parameter(params.proj)), params, opts);
  return out;
}

Var raw_capsule(const Var& h, const CapsuleParams& params, const GraphOptions& opts, Rng* rng,
                bool train) {
  Tape& tape = h.tape();
  if (opts.kind == EncapsulationKind::kMlp) {
    Var x = ops::relu(ops::matmul(ops::mean_rows(h), tape.parameter(params.w1)));
    x = ops::dropout(x, opts.dropout, rng, train);
    x = ops::relu(ops::matmul(x, tape.parameter(params.w2)));
    x = ops::dropout(x, opts.dropout, rng, train);
    return ops::matmul(x, tape.parameter(params.proj));
  }
  const SparseAdjacency adj = topk_normalize(build_affinity(h, params), opts.k, opts.l1_eps);
  const Var refined = message_pass(h, adj, params, opts, rng, train);
  const Var alpha = ops::softmax_rows(pool_logits(refined, params));
  return ops::matmul(ops::matmul(alpha, refined), tape.parameter(params.proj));
}

Encapsulation encapsulate(const Var& h, const CapsuleParams& params, const GraphOptions& opts,
                          Rng* rng, bool train) {
  Encapsulation out;
  if (opts.kind == EncapsulationKind::kMlp) {
    out.capsule = standardize(raw_capsule(h, params, opts, rng, train), params, opts);
    return out;
  }
  out.adjacency = topk_normalize(build_affinity(h, params), opts.k, opts.l1_eps);
  const Var refined = message_pass(h, *out.adjacency, params, opts, rng, train);
  out.capsule = attention_pool(refined, params, opts).capsule;
  return out;
}

}  // namespace actdistill
