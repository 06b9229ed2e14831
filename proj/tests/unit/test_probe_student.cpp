#include "helpers.hpp"

#include "actdistill/error.hpp"
#include "actdistill/flops.hpp"
#include "actdistill/student.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace actdistill;
using namespace actdistill::testing;

namespace {

struct Fixture {
  Dataset data = make_dataset(tiny_world(), 12);
  Backbone teacher = Backbone::init(tiny_backbone(3));
  TeacherProbe probe;

  Fixture() {
    probe = TeacherProbe::init(teacher.config, tiny_graph(), 2);
    calibrate(probe.graphs, teacher, data, tiny_graph(), 12);
  }
};

Matrix dense_forward(const Backbone& m, const Episode& e) {
  Tape t(GradMode::kInference);
  return forward_all_layers(m, encode(t, m, e.visual, e.instruction)).back().value();
}

Var gates_var(Tape& t, const std::vector<bool>& mask) {
  Matrix g(1, static_cast<Index>(mask.size()));
  for (std::size_t l = 0; l < mask.size(); ++l) g(0, static_cast<Index>(l)) = mask[l] ? 1.0 : 0.0;
  return t.constant(g);
}

}  // namespace

TEST(Probe, InitHasOneSetPerLayer) {
  const TeacherProbe p = TeacherProbe::init(tiny_backbone(4), tiny_graph(), 1);
  EXPECT_EQ(p.layers(), 4u);
  EXPECT_EQ(p.heads.size(), 4u);
}

TEST(Probe, TrainableExcludesStatistics) {
  TeacherProbe p = TeacherProbe::init(tiny_backbone(2), tiny_graph(), 1);
  for (Tensor* t : p.trainable()) {
    EXPECT_NE(t, &p.graphs[0].std_mean);
    EXPECT_NE(t, &p.graphs[0].std_var);
  }
}

TEST(Probe, CalibrationCentersCapsules) {
  Fixture f;
  for (std::size_t l = 0; l < f.probe.layers(); ++l) {
    EXPECT_TRUE(f.probe.graphs[l].calibrated);
    EXPECT_TRUE((f.probe.graphs[l].std_var.values().array() > 0.0).all());
    Matrix mean = Matrix::Zero(1, 4);
    for (const Episode& e : f.data.episodes) {
      Tape t(GradMode::kInference);
      const auto hidden = teacher_hidden(t, f.teacher, e);
      mean += encapsulate(hidden[l], f.probe.graphs[l], tiny_graph(), nullptr, false).capsule.value();
    }
    mean /= static_cast<double>(f.data.size());
    EXPECT_LT(mean.cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Probe, AuxLossZeroAndSumOfSquares) {
  Fixture f;
  TeacherProbe one;
  one.graphs = {f.probe.graphs[0]};
  one.heads = {f.probe.heads[0]};
  one.heads[0].visit("", [](const std::string&, Tensor& t) { t.values().setZero(); });
  Tape t(GradMode::kInference);
  std::vector<std::vector<Var>> hidden{{teacher_hidden(t, f.teacher, f.data.episodes[0])[0]}};
  const AuxLoss ones = aux_loss(one, hidden, Matrix::Ones(1, 7), tiny_graph(), nullptr, false);
  EXPECT_DOUBLE_EQ(ones.total.item(), 7.0);
  const AuxLoss zero = aux_loss(one, hidden, Matrix::Zero(1, 7), tiny_graph(), nullptr, false);
  EXPECT_EQ(zero.total.item(), 0.0);
}

TEST(Probe, AuxLossIsLayerSum) {
  Fixture f;
  Tape t(GradMode::kInference);
  std::vector<std::vector<Var>> hidden;
  Matrix actions(2, 7);
  for (int i = 0; i < 2; ++i) {
    hidden.push_back(teacher_hidden(t, f.teacher, f.data.episodes[static_cast<std::size_t>(i)]));
    actions.row(i) = f.data.episodes[static_cast<std::size_t>(i)].action;
  }
  const AuxLoss loss = aux_loss(f.probe, hidden, actions, tiny_graph(), nullptr, false);
  double sum = 0.0;
  for (const Var& v : loss.per_layer) sum += v.item();
  EXPECT_NEAR(loss.total.item(), sum, 1e-12);
  ASSERT_EQ(loss.predictions.size(), 3u);
  EXPECT_EQ(loss.predictions[0].rows(), 2);
}

TEST(Probe, AuxGradientWrtPooling) {
  Fixture f;
  TeacherProbe& p = f.probe;
  p.graphs[1].wp.set_requires_grad(true);
  const Episode& e = f.data.episodes[3];
  auto loss = [&](Tape& t) {
    std::vector<std::vector<Var>> hidden{teacher_hidden(t, f.teacher, e)};
    return aux_loss(p, hidden, Matrix(e.action), tiny_graph(), nullptr, false).total;
  };
  {
    Tape t;
    t.backward(loss(t));
  }
  const Matrix analytic = p.graphs[1].wp.grad();
  const Matrix numeric = finite_diff_grad_inplace(
      [&] {
        Tape t(GradMode::kInference);
        return loss(t).item();
      },
      p.graphs[1].wp, 1e-6);
  EXPECT_LT(relative_error(analytic, numeric), 1e-5);
}

TEST(Stage1, SingleEpisodeOverfit) {
  const Dataset d = make_dataset(tiny_world(), 1);
  const Backbone teacher = Backbone::init(tiny_backbone(3));
  TrainSchedule s;
  s.epochs = 11;
  s.batch = 1;
  s.lr = 3e-3;
  s.warmup = 0;
  s.cosine = false;
  GraphOptions opts = tiny_graph();
  const Stage1Result r = stage1_train(teacher, d, s, opts, 1);
  std::size_t monotone_layers = 0;
  for (std::size_t layer = 1; layer <= 3; ++layer) {
    std::vector<double> curve;
    for (const Stage1Row& row : r.rows) {
      if (row.layer == layer) curve.push_back(row.aux_mse);
    }
    ASSERT_EQ(curve.size(), 11u);
    bool ok = true;
    for (std::size_t i = 1; i < curve.size(); ++i) ok = ok && curve[i] <= curve[i - 1];
    monotone_layers += ok;
  }
  EXPECT_GE(monotone_layers, 2u);
}

TEST(Stage1, ZeroEpochsLeavesTrainableAtInit) {
  const Dataset d = make_dataset(tiny_world(), 4);
  const Backbone teacher = Backbone::init(tiny_backbone(2));
  TrainSchedule s;
  s.epochs = 0;
  s.seed = 5;
  Stage1Result r = stage1_train(teacher, d, s, tiny_graph(), 4);
  TeacherProbe init = TeacherProbe::init(teacher.config, tiny_graph(), 5);
  const auto a = r.probe.trainable(), b = init.trainable();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->values(), b[i]->values());
  EXPECT_TRUE(r.rows.empty());
}

TEST(Stage1, DeterministicAndTeacherUntouched) {
  const Dataset d = make_dataset(tiny_world(), 8);
  const Backbone teacher = Backbone::init(tiny_backbone(2));
  const auto before = teacher.parameter_hash();
  TrainSchedule s;
  s.epochs = 2;
  s.batch = 4;
  const Stage1Result a = stage1_train(teacher, d, s, tiny_graph(), 8);
  const Stage1Result b = stage1_train(teacher, d, s, tiny_graph(), 8);
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) EXPECT_EQ(a.rows[i].aux_mse, b.rows[i].aux_mse);
  EXPECT_EQ(a.probe.parameter_hash(), b.probe.parameter_hash());
  EXPECT_EQ(teacher.parameter_hash(), before);
}

TEST(TeacherCache, EntriesAndDeterminism) {
  Fixture f;
  const TeacherCache a = export_teacher_capsules(f.probe, f.teacher, f.data, tiny_graph());
  const TeacherCache b = export_teacher_capsules(f.probe, f.teacher, f.data, tiny_graph());
  EXPECT_EQ(a.entries(), f.data.size() * 3);
  EXPECT_EQ(a.content_hash(), b.content_hash());
  ASSERT_EQ(a.actions.size(), f.data.size());
  EXPECT_EQ(a.actions[0].rows(), 3);
  EXPECT_EQ(a.actions[0].cols(), 7);
}

TEST(TeacherCache, ReloadChecksHashes) {
  Fixture f;
  const TeacherCache c = export_teacher_capsules(f.probe, f.teacher, f.data, tiny_graph());
  const auto path = std::filesystem::temp_directory_path() / "actdistill_test_cache.actd";
  save_teacher_cache(c, path);
  EXPECT_EQ(load_teacher_cache(path, c.probe_hash, c.dataset_hash).content_hash(), c.content_hash());
  try {
    load_teacher_cache(path, c.probe_hash + 1, c.dataset_hash);
    FAIL();
  } catch (const IntegrityError& e) {
    EXPECT_EQ(e.code(), IntegrityCode::kHashMismatch);
  }
  EXPECT_THROW(load_teacher_cache(path, c.probe_hash, c.dataset_hash + 1), IntegrityError);
  std::filesystem::remove(path);
}

TEST(Router, GateExamples) {
  const RouterParams zero = RouterParams::init(3, 8, 0.0);
  const RouterParams low = RouterParams::init(3, 8, -1.0);
  Tape t(GradMode::kInference);
  Rng rng(1);
  EncoderOutputs enc{t.constant(random_matrix(5, 8, rng)), t.constant(random_matrix(1, 8, rng))};
  EXPECT_EQ(compute_gates(zero, enc).value(), Matrix::Constant(1, 3, 0.5));
  EXPECT_NEAR(compute_gates(low, enc).value()(0, 1), 0.2689, 1e-4);
  EXPECT_EQ(low.w[0].size(), 16u);
}

TEST(Router, ThresholdRule) {
  RowVector g(3);
  g << 0.5, 0.49, 0.9;
  const GateVector v = GateVector::threshold(g, 0.5);
  EXPECT_TRUE(v.mask[0]);
  EXPECT_FALSE(v.mask[1]);
  EXPECT_TRUE(v.mask[2]);
  EXPECT_EQ(v.executed(), 2u);
  EXPECT_THROW(GateVector::threshold(g, 1.0), ContractError);
  EXPECT_THROW(GateVector::threshold(g, -0.1), ContractError);
}

TEST(Student, SelfDerivedCopyOfTeacher) {
  Fixture f;
  const StudentModel s = derive_student(f.teacher, f.probe, -1.0);
  EXPECT_EQ(s.backbone.parameter_hash(), f.teacher.parameter_hash());
  EXPECT_EQ(s.backbone_hash(), f.teacher.parameter_hash());
  EXPECT_EQ(s.layers(), 3u);
  EXPECT_EQ(s.graphs[1].phi.values(), f.probe.graphs[1].phi.values());
  EXPECT_TRUE(s.router.w[2].values().isZero());
  EXPECT_EQ(s.router.b[2].values()(0, 0), -1.0);
}

TEST(Student, TrainableExcludesFinalHeadAndStatistics) {
  Fixture f;
  StudentModel s = derive_student(f.teacher, f.probe, -1.0);
  for (Tensor* t : s.trainable()) {
    EXPECT_NE(t, &s.backbone.head.w1);
    EXPECT_NE(t, &s.backbone.head.w2);
    EXPECT_NE(t, &s.graphs[0].std_var);
  }
}

TEST(Student, GatesDependOnlyOnInput) {
  Fixture f;
  StudentModel s = derive_student(f.teacher, f.probe, -1.0);
  Rng rng(3);
  for (std::size_t l = 0; l < 3; ++l) s.router.w[l].values() = random_matrix(1, 16, rng);
  const Episode& e = f.data.episodes[5];
  EXPECT_EQ(gate_values(s, e), gate_values(s, e));
  EXPECT_NE(gate_values(s, e), gate_values(s, f.data.episodes[6]));
}

TEST(Student, SoftForwardExtremes) {
  Fixture f;
  const StudentModel s = derive_student(f.teacher, f.probe, -1.0);
  const Episode& e = f.data.episodes[1];
  Tape t(GradMode::kInference);
  const EncoderOutputs enc = encode(t, s.backbone, e.visual, e.instruction);
  const SoftForward ones = soft_gated_forward(s, enc, tiny_graph(), nullptr, false, gates_var(t, {true, true, true}));
  EXPECT_EQ(ones.z_last.value(), dense_forward(f.teacher, e));
  const SoftForward zeros = soft_gated_forward(s, enc, tiny_graph(), nullptr, false, gates_var(t, {false, false, false}));
  EXPECT_EQ(zeros.z_last.value(), initial_state(enc).value());
  EXPECT_EQ(ones.capsules.size(), 3u);
  EXPECT_EQ(ones.actions[2].cols(), 7);
}

// Property: soft forward with binary gates equals routed inference with that mask, bit for bit.
TEST(Student, BinaryGateEquivalence) {
  Fixture f;
  const StudentModel s = derive_student(f.teacher, f.probe, -1.0);
  for (unsigned bits = 0; bits < 8; ++bits) {
    const std::vector<bool> mask{(bits & 1u) != 0, (bits & 2u) != 0, (bits & 4u) != 0};
    for (std::size_t i = 0; i < 4; ++i) {
      const Episode& e = f.data.episodes[i];
      Tape t(GradMode::kInference);
      const EncoderOutputs enc = encode(t, s.backbone, e.visual, e.instruction);
      const SoftForward soft = soft_gated_forward(s, enc, tiny_graph(), nullptr, false, gates_var(t, mask));
      const RoutedOutput hard = routed_forward(s, e, mask);
      EXPECT_EQ(soft.z_last.value(), hard.z) << bits;
      EXPECT_EQ(hard.executed, mask);
    }
  }
}

TEST(Student, TauZeroIsDenseAndMatchesTeacher) {
  Fixture f;
  const StudentModel s = derive_student(f.teacher, f.probe, -1.0);
  for (std::size_t i = 0; i < 5; ++i) {
    const Episode& e = f.data.episodes[i];
    const RoutedOutput r = hard_routed_forward(s, e, 0.0);
    EXPECT_EQ(r.gates.executed(), 3u);
    EXPECT_EQ(r.z, dense_forward(f.teacher, e));
    EXPECT_EQ(predict_action(s, r.z), predict_native(f.teacher, e));
  }
}

TEST(Student, AllSkippedKeepsInitialState) {
  Fixture f;
  const StudentModel s = derive_student(f.teacher, f.probe, 0.0);  // all gates 0.5
  const Episode& e = f.data.episodes[0];
  const RoutedOutput r = hard_routed_forward(s, e, 0.999);
  EXPECT_EQ(r.gates.executed(), 0u);
  Tape t(GradMode::kInference);
  EXPECT_EQ(r.z, initial_state(encode(t, s.backbone, e.visual, e.instruction)).value());
  const RoutedOutput half = hard_routed_forward(s, e, 0.5);
  EXPECT_EQ(half.gates.executed(), 3u);  // g >= tau executes
}

// Property: raising tau never adds layers or FLOPs.
TEST(Student, TauMonotonicity) {
  Fixture f;
  StudentModel s = derive_student(f.teacher, f.probe, 0.0);
  Rng rng(4);
  for (std::size_t l = 0; l < 3; ++l) {
    s.router.w[l].values() = random_matrix(1, 16, rng);
    s.router.b[l].values()(0, 0) = rng.normal();
  }
  const FlopsModel fm = FlopsModel::from_config(s.backbone.config, 5);
  for (const Episode& e : f.data.episodes) {
    std::vector<bool> prev(3, true);
    double prev_flops = fm.dense();
    for (double tau = 0.0; tau < 1.0; tau += 0.05) {
      const RoutedOutput r = hard_routed_forward(s, e, tau);
      for (std::size_t l = 0; l < 3; ++l) EXPECT_TRUE(!r.executed[l] || prev[l]);
      const double flops = fm.routed(r.executed);
      EXPECT_LE(flops, prev_flops);
      prev = r.executed;
      prev_flops = flops;
    }
  }
}

TEST(Student, TraceRecordsDecisionsAndCosts) {
  Fixture f;
  const StudentModel s = derive_student(f.teacher, f.probe, -1.0);
  const RoutedOutput r = routed_forward(s, f.data.episodes[0], {true, false, true});
  ASSERT_EQ(r.trace.size(), 3u);
  EXPECT_FALSE(r.trace[1].executed);
  EXPECT_EQ(r.trace[1].flops, 0.0);
  EXPECT_GT(r.trace[0].flops, 0.0);
  EXPECT_THROW(routed_forward(s, f.data.episodes[0], {true, false}), ContractError);
}

TEST(Student, RouterGradientIsNonzero) {
  Fixture f;
  StudentModel s = derive_student(f.teacher, f.probe, -1.0);
  s.router.w[1].set_requires_grad(true);
  const Episode& e = f.data.episodes[2];
  auto loss = [&](Tape& t) {
    const SoftForward sf = soft_gated_forward(s, encode(t, s.backbone, e.visual, e.instruction), tiny_graph(),
                                              nullptr, false);
    return ops::squared_norm_rows(ops::sub(sf.actions.back(), t.constant(Matrix(e.action))));
  };
  {
    Tape t;
    t.backward(loss(t));
  }
  const Matrix analytic = s.router.w[1].grad();
  EXPECT_GT(analytic.cwiseAbs().maxCoeff(), 0.0);
  const Matrix numeric = finite_diff_grad_inplace(
      [&] {
        Tape t(GradMode::kInference);
        return loss(t).item();
      },
      s.router.w[1], 1e-6);
  EXPECT_LT(relative_error(analytic, numeric), 1e-5);
}
