#pragma once

#include "actdistill/backbone.hpp"

#include <optional>
#include <string>

namespace actdistill {

enum class EncapsulationKind {
  kGat,  // top-k affinity graph + two message-passing passes + attention pooling
  kMlp,  // ablation: mean-pool rows, two ReLU layers (same W1, W2), no graph
};

struct GraphOptions {
  std::size_t k = 8;
  std::size_t affinity_dim = 16;
  double dropout = 0.1;
  double l1_eps = 1e-12;
  /// Additive floor inside the standardization square root.
  double std_eps = 1e-8;
  EncapsulationKind kind = EncapsulationKind::kGat;
};

/// Per-layer graph encoder parameters.
struct CapsuleParams {
  Tensor phi, psi;  // [d, d_a] affinity projections
  Tensor w1, w2;    // [d, d] message transforms, one per pass
  Tensor wp;        // [d] pooling projection
  Tensor proj;      // [d, d_c] capsule projection
  Tensor std_mean, std_var;  // [d_c], frozen after calibration
  bool calibrated = false;

  static CapsuleParams init(std::size_t width, std::size_t affinity_dim, std::size_t capsule_dim,
                            Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
  void visit(const std::string& prefix, const ConstParamVisitor& f) const;
};

/// Top-k row graph: neighbors(i, t) and their normalized weights.
struct SparseAdjacency {
  ops::IndexMatrix neighbors;  // [N, k]
  Var weights;                 // [N, k]

  /// Dense [N, N] form with zeros off the neighbor sets.
  Var dense() const;
};

/// A(i, j) = exp(phi(h_i) . psi(h_j)), diagonal included. N >= 2.
/// Throws NumericalError if any exponent exceeds 700.
Var build_affinity(const Var& h, const CapsuleParams& params);

/// Keeps the k largest affinities per row (ties to the smaller index) and
/// divides by their sum plus eps.
SparseAdjacency topk_normalize(const Var& affinity, std::size_t k, double eps);

/// sum_j A(i, j) h_j W, without the nonlinearity.
Var aggregate(const Var& h, const SparseAdjacency& adj, const Tensor& w);

/// Two passes h <- relu(A h W) with W = w1 then w2, sharing one adjacency;
/// dropout on each pass output in train mode.
Var message_pass(const Var& h, const SparseAdjacency& adj, const CapsuleParams& params,
                 const GraphOptions& opts, Rng* rng, bool train);

struct PooledCapsule {
  Var alpha;    // [1, N] pooling weights
  Var pooled;   // [1, d]
  Var capsule;  // [1, d_c]
};

/// alpha = softmax_i(h_i . wp); pooled = alpha h; capsule = standardized pooled proj
/// (projection only until calibrated).
PooledCapsule attention_pool(const Var& h, const CapsuleParams& params, const GraphOptions& opts);

/// Capsule before standardization; used for calibration.
Var raw_capsule(const Var& h, const CapsuleParams& params, const GraphOptions& opts, Rng* rng,
                bool train);

struct Encapsulation {
  std::optional<SparseAdjacency> adjacency;  // empty for the MLP ablation
  Var capsule;                               // [1, d_c]
};

Encapsulation encapsulate(const Var& h, const CapsuleParams& params, const GraphOptions& opts,
                          Rng* rng, bool train);

/// Applies the frozen standardization to a projected capsule.
Var standardize(const Var& projected, const CapsuleParams& params, const GraphOptions& opts);

}  // namespace actdistill
