#pragma once

#include "actdistill/probe.hpp"

#include <optional>
#include <vector>

namespace actdistill {

/// Per-layer router weights over [mean(v_e); l_e] plus a scalar bias.
struct RouterParams {
  std::vector<Tensor> w;  // each [2d]
  std::vector<Tensor> b;  // each scalar

  static RouterParams init(std::size_t layers, std::size_t width, double bias_init);
  std::size_t layers() const noexcept { return w.size(); }
  void visit(const ParamVisitor& f);
  void visit(const ConstParamVisitor& f) const;
};

/// Layer gates for one input and, at inference, their tau-thresholded mask.
struct GateVector {
  RowVector g;              // [L], each in [0, 1]
  std::vector<bool> mask;   // executed iff g >= tau
  double tau = 0.5;

  static GateVector threshold(const RowVector& g, double tau);
  std::size_t executed() const;
};

/// Self-derived replica: copy of the teacher backbone (native head = final head),
/// student graph encoders and per-layer heads, and the router.
struct StudentModel {
  Backbone backbone;
  std::vector<CapsuleParams> graphs;
  std::vector<ActionHead> heads;
  RouterParams router;

  std::size_t layers() const noexcept { return backbone.layers.size(); }
  void visit(const ParamVisitor& f);
  void visit(const ConstParamVisitor& f) const;
  /// Backbone replica (encoders and layers), router, graph encoders, per-layer
  /// heads. The final head is not part of any loss and stays frozen.
  std::vector<Tensor*> trainable();
  void set_requires_grad(bool on);
  std::uint64_t parameter_hash() const;
  std::uint64_t backbone_hash() const;  // encoders + layers + final head
};

/// Student initialized from the teacher: backbone copied bit-for-bit, graph
/// encoders and heads copied from the trained probe, router w = 0, b = bias_init.
StudentModel derive_student(const Backbone& teacher, const TeacherProbe& probe, double bias_init);

/// g_l = sigmoid(w_l . [mean(v_e); l_e] + b_l) as a [1, L] variable.
Var compute_gates(const RouterParams& router, const EncoderOutputs& enc);

struct SoftForward {
  Var gates;                   // [1, L]
  Var z_last;                  // [N, d]
  std::vector<Var> states;     // z_1..z_L
  std::vector<Var> capsules;   // s_l, [1, d_c]
  std::vector<Var> actions;    // H_l(s_l), [1, 7]
};

/// Training forward: z_l = g_l layer(z_{l-1}) + (1 - g_l) z_{l-1}; capsules and
/// per-layer predictions from each z_l. Pass `gates` to override the router.
SoftForward soft_gated_forward(const StudentModel& student, const EncoderOutputs& enc,
                               const GraphOptions& opts, Rng* rng, bool train,
                               std::optional<Var> gates = std::nullopt);

struct LayerTrace {
  double gate;
  bool executed;
  double flops;
};

struct RoutedOutput {
  Matrix z;                   // running state after the last layer position
  std::vector<bool> executed;
  GateVector gates;
  std::vector<LayerTrace> trace;
};

/// Inference with an explicit execution mask. No graph encoders or heads are used.
RoutedOutput routed_forward(const StudentModel& student, const Episode& e,
                            const std::vector<bool>& mask);

/// Inference: execute layer l iff g_l >= tau, copy the state otherwise.
RoutedOutput hard_routed_forward(const StudentModel& student, const Episode& e, double tau);

/// Router gates for one episode, evaluated without recording.
RowVector gate_values(const StudentModel& student, const Episode& e);

/// Final head on the running representation.
ActionVector predict_action(const StudentModel& student, const Matrix& z);

}  // namespace actdistill
