#pragma once

#include "actdistill/gradcheck.hpp"
#include "actdistill/ops.hpp"
#include "actdistill/trainer.hpp"

#include <functional>

namespace actdistill::testing {

inline Matrix random_matrix(Index r, Index c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline Matrix uniform_matrix(Index r, Index c, Rng& rng, double lo, double hi) {
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

/// Analytic gradient of a scalar-valued builder wrt a standalone tensor.
inline Matrix analytic_grad(const std::function<Var(Tape&, const Tensor&)>& f, const Tensor& theta) {
  Tensor t = theta;
  t.set_requires_grad(true);
  Tape tape;
  tape.backward(f(tape, t));
  return t.grad();
}

/// Central differences of the same builder evaluated on an inference tape.
inline Matrix numeric_grad(const std::function<Var(Tape&, const Tensor&)>& f, const Tensor& theta,
                           double eps = 1e-6) {
  return finite_diff_grad(
      [&](const Tensor& t) {
        Tape tape(GradMode::kInference);
        return f(tape, t).item();
      },
      theta, eps);
}

inline double grad_error(const std::function<Var(Tape&, const Tensor&)>& f, const Tensor& theta) {
  return relative_error(analytic_grad(f, theta), numeric_grad(f, theta));
}

inline BackboneConfig tiny_backbone(std::size_t layers = 2, std::uint64_t seed = 1) {
  BackboneConfig c;
  c.layers = layers;
  c.width = 8;
  c.heads = 2;
  c.ffn_width = 16;
  c.capsule_dim = 4;
  c.token_dim = 11;
  c.seed = seed;
  return c;
}

inline WorldConfig tiny_world(std::uint64_t seed = 5) {
  WorldConfig w;
  w.n_tokens = 5;
  w.token_dim = 11;
  w.n_objects = 3;
  w.seed = seed;
  return w;
}

inline GraphOptions tiny_graph() {
  GraphOptions g;
  g.k = 3;
  g.affinity_dim = 4;
  g.dropout = 0.0;
  return g;
}

}  // namespace actdistill::testing
