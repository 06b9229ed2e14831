#include "helpers.hpp"

#include "actdistill/error.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace actdistill;
using namespace actdistill::testing;

namespace {

CapsuleParams random_capsule(Index d, Index da, Index dc, Rng& rng) {
  return CapsuleParams::init(static_cast<std::size_t>(d), static_cast<std::size_t>(da),
                             static_cast<std::size_t>(dc), rng);
}

}  // namespace

TEST(Affinity, ZeroProjectionsGiveOnes) {
  Rng rng(1);
  CapsuleParams p = random_capsule(4, 3, 2, rng);
  p.phi.values().setZero();
  Tape t(GradMode::kInference);
  EXPECT_EQ(build_affinity(t.constant(random_matrix(5, 4, rng)), p).value(), Matrix::Ones(5, 5));
}

TEST(Affinity, HandExample) {
  Rng rng(1);
  CapsuleParams p = random_capsule(2, 2, 2, rng);
  p.phi.values() = Matrix::Identity(2, 2);
  p.psi.values() = Matrix::Identity(2, 2);
  Matrix h(3, 2);
  h << 1, 0, 0, 1, 1, 1;
  Tape t(GradMode::kInference);
  const Matrix a = build_affinity(t.constant(h), p).value();
  EXPECT_DOUBLE_EQ(a(0, 0), std::exp(1.0));
  EXPECT_DOUBLE_EQ(a(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(a(0, 2), std::exp(1.0));
  EXPECT_TRUE((a.array() > 0.0).all());

  const SparseAdjacency adj = topk_normalize(t.constant(a), 2, 1e-12);
  EXPECT_EQ(adj.neighbors(0, 0), 0);
  EXPECT_EQ(adj.neighbors(0, 1), 2);
  EXPECT_NEAR(adj.weights.value()(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(adj.weights.value()(0, 1), 0.5, 1e-12);
}

TEST(Affinity, OverflowGuard) {
  Rng rng(1);
  CapsuleParams p = random_capsule(2, 2, 2, rng);
  p.phi.values() = Matrix::Identity(2, 2) * 30.0;
  p.psi.values() = Matrix::Identity(2, 2) * 30.0;
  Tape t(GradMode::kInference);
  EXPECT_THROW(build_affinity(t.constant(Matrix::Ones(2, 2)), p), NumericalError);
  EXPECT_THROW(build_affinity(t.constant(Matrix::Ones(1, 2)), p), ContractError);
}

TEST(TopK, RejectsBadK) {
  Tape t(GradMode::kInference);
  const Var a = t.constant(Matrix::Ones(3, 3));
  EXPECT_THROW(topk_normalize(a, 4, 1e-12), ContractError);
  EXPECT_THROW(topk_normalize(a, 0, 1e-12), ContractError);
}

// Property: rows are stochastic and positive, neighbors are the k largest.
TEST(TopK, RowStochasticAndLargest) {
  Rng rng(2);
  for (int s = 0; s < 100; ++s) {
    const Index n = 2 + static_cast<Index>(rng.below(7));
    const std::size_t k = 1 + rng.below(static_cast<std::uint64_t>(n));
    Tape t(GradMode::kInference);
    const Matrix a = random_matrix(n, n, rng).array().exp();
    const SparseAdjacency adj = topk_normalize(t.constant(a), k, 1e-12);
    const Matrix& w = adj.weights.value();
    for (Index i = 0; i < n; ++i) {
      EXPECT_NEAR(w.row(i).sum(), 1.0, 1e-9);
      EXPECT_TRUE((w.row(i).array() > 0.0).all());
      const double kth = a(i, adj.neighbors(i, static_cast<Index>(k) - 1));
      int above = 0;
      for (Index j = 0; j < n; ++j) above += a(i, j) > kth;
      EXPECT_LT(above, static_cast<int>(k));
    }
  }
}

TEST(TopK, TiesAreDeterministic) {
  Tape t(GradMode::kInference);
  const Var a = t.constant(Matrix::Ones(4, 4));
  const SparseAdjacency x = topk_normalize(a, 2, 1e-12), y = topk_normalize(a, 2, 1e-12);
  EXPECT_EQ(x.neighbors, y.neighbors);
  for (Index i = 0; i < 4; ++i) {
    EXPECT_EQ(x.neighbors(i, 0), 0);
    EXPECT_EQ(x.neighbors(i, 1), 1);
  }
}

// k = N turns exp-then-L1 into a row softmax of the log-affinities.
TEST(TopK, FullGraphIsSoftmax) {
  Rng rng(3);
  for (int s = 0; s < 100; ++s) {
    const Index n = 2 + static_cast<Index>(rng.below(7));
    const Index d = 1 + static_cast<Index>(rng.below(16));
    CapsuleParams p = random_capsule(d, 4, 2, rng);
    Tape t(GradMode::kInference);
    const Var h = t.constant(random_matrix(n, d, rng));
    const SparseAdjacency adj = topk_normalize(build_affinity(h, p), static_cast<std::size_t>(n), 1e-12);
    const Matrix logits = (h.value() * p.phi.values()) * (h.value() * p.psi.values()).transpose();
    const Matrix soft = ops::softmax_rows(t.constant(logits)).value();
    EXPECT_LT((adj.dense().value() - soft).cwiseAbs().maxCoeff(), 1e-12);
  }
}

// One full-graph aggregation equals single-head attention with the same weights.
TEST(TopK, FullGraphAggregationIsAttention) {
  Rng rng(4);
  for (int s = 0; s < 20; ++s) {
    BackboneConfig cfg = tiny_backbone(2, 10 + static_cast<std::uint64_t>(s));
    cfg.heads = 1;
    const Backbone m = Backbone::init(cfg);
    const LayerParams& lp = m.layers[0];
    CapsuleParams p = random_capsule(8, 8, 4, rng);
    p.phi.values() = lp.wq.values() / std::sqrt(8.0);
    p.psi.values() = lp.wk.values();
    p.w1.values() = lp.wv.values();
    Tape t(GradMode::kInference);
    const Var x = t.constant(random_matrix(6, 8, rng));
    const SparseAdjacency adj = topk_normalize(build_affinity(x, p), 6, 0.0);
    const Matrix graph = aggregate(x, adj, p.w1).value();
    const Matrix attn = self_attention(x, lp, 1, false).value();
    EXPECT_LT((graph - attn).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(MessagePass, SelfLoopIdentity) {
  Rng rng(5);
  CapsuleParams p = random_capsule(3, 2, 2, rng);
  p.w1.values() = Matrix::Identity(3, 3);
  p.w2.values() = Matrix::Identity(3, 3);
  Tape t(GradMode::kInference);
  const Matrix h = random_matrix(4, 3, rng);
  SparseAdjacency adj;
  adj.neighbors = ops::IndexMatrix(4, 1);
  for (Index i = 0; i < 4; ++i) adj.neighbors(i, 0) = i;
  adj.weights = t.constant(Matrix::Ones(4, 1));
  GraphOptions opts = tiny_graph();
  EXPECT_EQ(message_pass(t.constant(h), adj, p, opts, nullptr, false).value(), h.cwiseMax(0.0));
}

TEST(MessagePass, NegativeWeightsClipToZero) {
  Rng rng(5);
  CapsuleParams p = random_capsule(3, 2, 2, rng);
  p.w1.values().setConstant(-1.0);
  Tape t(GradMode::kInference);
  const Var h = t.constant(uniform_matrix(4, 3, rng, 0.1, 1.0));
  const SparseAdjacency adj = topk_normalize(build_affinity(h, p), 2, 1e-12);
  EXPECT_TRUE(message_pass(h, adj, p, tiny_graph(), nullptr, false).value().isZero());
}

TEST(MessagePass, MatchesDenseLoopOracle) {
  Rng rng(6);
  for (int s = 0; s < 20; ++s) {
    const Index n = 4, d = 3;
    CapsuleParams p = random_capsule(d, 2, 2, rng);
    Tape t(GradMode::kInference);
    const Matrix hv = random_matrix(n, d, rng);
    const Var h = t.constant(hv);
    const SparseAdjacency adj = topk_normalize(build_affinity(h, p), 2, 1e-12);

    Matrix dense = Matrix::Zero(n, n);
    for (Index i = 0; i < n; ++i) {
      for (Index k = 0; k < 2; ++k) dense(i, adj.neighbors(i, k)) = adj.weights.value()(i, k);
    }
    auto pass = [&](const Matrix& x, const Matrix& w) {
      Matrix out = Matrix::Zero(n, d);
      for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < n; ++j) out.row(i) += dense(i, j) * (x.row(j) * w);
      }
      return Matrix(out.cwiseMax(0.0));
    };
    const Matrix expected = pass(pass(hv, p.w1.values()), p.w2.values());
    const Matrix got = message_pass(h, adj, p, tiny_graph(), nullptr, false).value();
    EXPECT_LT((got - expected).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Pool, ZeroProjectionIsMean) {
  Rng rng(7);
  CapsuleParams p = random_capsule(4, 2, 3, rng);
  p.wp.values().setZero();
  Tape t(GradMode::kInference);
  const Matrix h = random_matrix(5, 4, rng);
  const PooledCapsule pc = attention_pool(t.constant(h), p, tiny_graph());
  EXPECT_LT((pc.pooled.value() - h.colwise().mean()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((pc.alpha.value().array() - 0.2).abs().maxCoeff(), 1e-15);
}

TEST(Pool, SaturatesOnDominantRow) {
  Rng rng(7);
  CapsuleParams p = random_capsule(3, 2, 3, rng);
  p.wp.values() << 1.0, 0.0, 0.0;
  Matrix h = uniform_matrix(4, 3, rng, -1.0, 1.0);
  h(2, 0) = 60.0;
  Tape t(GradMode::kInference);
  const PooledCapsule pc = attention_pool(t.constant(h), p, tiny_graph());
  EXPECT_LT((pc.pooled.value() - h.row(2)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Pool, AlphaSumsToOne) {
  Rng rng(8);
  for (int s = 0; s < 50; ++s) {
    CapsuleParams p = random_capsule(6, 2, 3, rng);
    Tape t(GradMode::kInference);
    const PooledCapsule pc = attention_pool(t.constant(random_matrix(5, 6, rng, 3.0)), p, tiny_graph());
    EXPECT_NEAR(pc.alpha.value().sum(), 1.0, 1e-12);
  }
}

TEST(Pool, StandardizationAfterCalibration) {
  Rng rng(9);
  CapsuleParams p = random_capsule(4, 2, 3, rng);
  p.std_mean.values() << 1.0, 2.0, 3.0;
  p.std_var.values() << 4.0, 4.0, 4.0;
  GraphOptions opts = tiny_graph();
  opts.std_eps = 0.0;
  Tape t(GradMode::kInference);
  const Var x = t.constant(Matrix::Constant(1, 3, 3.0));
  EXPECT_EQ(standardize(x, p, opts).value(), x.value());  // uncalibrated passes through
  p.calibrated = true;
  const Matrix s = standardize(x, p, opts).value();
  EXPECT_DOUBLE_EQ(s(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(s(0, 1), 0.5);
  EXPECT_DOUBLE_EQ(s(0, 2), 0.0);
}

TEST(Encapsulate, PermutationInvariantCapsule) {
  Rng rng(10);
  for (int s = 0; s < 30; ++s) {
    const Index n = 6, d = 8;
    CapsuleParams p = random_capsule(d, 4, 4, rng);
    const Matrix h = random_matrix(n, d, rng);
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), Index{0});
    for (std::size_t k = perm.size() - 1; k > 0; --k) std::swap(perm[k], perm[rng.below(k + 1)]);
    Matrix ph(n, d);
    for (Index r = 0; r < n; ++r) ph.row(r) = h.row(perm[static_cast<std::size_t>(r)]);

    Tape t(GradMode::kInference);
    const Encapsulation a = encapsulate(t.constant(h), p, tiny_graph(), nullptr, false);
    const Encapsulation b = encapsulate(t.constant(ph), p, tiny_graph(), nullptr, false);
    EXPECT_LT((a.capsule.value() - b.capsule.value()).cwiseAbs().maxCoeff(), 1e-12);
    const Matrix da = a.adjacency->dense().value(), db = b.adjacency->dense().value();
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < n; ++j) {
        EXPECT_NEAR(db(i, j), da(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]), 1e-12);
      }
    }
  }
}

TEST(Encapsulate, CapsuleGradientWrtPhi) {
  Rng rng(11);
  for (int s = 0; s < 50; ++s) {
    CapsuleParams p = random_capsule(8, 4, 4, rng);
    const Matrix h = random_matrix(6, 8, rng);
    GraphOptions opts = tiny_graph();
    opts.k = 6;  // every affinity enters, so phi always has signal
    p.phi.set_requires_grad(true);
    auto loss = [&](Tape& t) {
      return ops::squared_norm_rows(encapsulate(t.constant(h), p, opts, nullptr, false).capsule);
    };
    {
      Tape t;
      t.backward(loss(t));
    }
    const Matrix analytic = p.phi.grad();
    const Matrix numeric = finite_diff_grad_inplace(
        [&] {
          Tape t(GradMode::kInference);
          return loss(t).item();
        },
        p.phi, 1e-6);
    EXPECT_LT(relative_error(analytic, numeric), 1e-5) << s;
  }
}

TEST(Encapsulate, MlpVariantHasNoGraph) {
  Rng rng(12);
  CapsuleParams p = random_capsule(8, 4, 4, rng);
  GraphOptions opts = tiny_graph();
  opts.kind = EncapsulationKind::kMlp;
  Tape t(GradMode::kInference);
  const Matrix h = random_matrix(5, 8, rng);
  const Encapsulation e = encapsulate(t.constant(h), p, opts, nullptr, false);
  EXPECT_FALSE(e.adjacency.has_value());
  const Matrix expected =
      ((h.colwise().mean() * p.w1.values()).cwiseMax(0.0) * p.w2.values()).cwiseMax(0.0) * p.proj.values();
  EXPECT_LT((e.capsule.value() - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Encapsulate, DropoutOnlyInTrainMode) {
  Rng rng(13);
  CapsuleParams p = random_capsule(8, 4, 4, rng);
  GraphOptions opts = tiny_graph();
  opts.dropout = 0.5;
  const Matrix h = random_matrix(5, 8, rng);
  Tape t(GradMode::kInference);
  const Matrix a = encapsulate(t.constant(h), p, opts, nullptr, false).capsule.value();
  const Matrix b = encapsulate(t.constant(h), p, opts, nullptr, false).capsule.value();
  EXPECT_EQ(a, b);
  Rng drop(1);
  const Matrix c = encapsulate(t.constant(h), p, opts, &drop, true).capsule.value();
  EXPECT_NE(a, c);
}
