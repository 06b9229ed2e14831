#include "actdistill/student.hpp"

#include "actdistill/error.hpp"
#include "actdistill/flops.hpp"
#include "actdistill/hash.hpp"

#include <string>

namespace actdistill {

RouterParams RouterParams::init(std::size_t layers, std::size_t width, double bias_init) {
  RouterParams r;
  for (std::size_t l = 0; l < layers; ++l) {
    r.w.emplace_back(Shape{2 * width});
    r.b.push_back(Tensor::scalar(bias_init));
  }
  return r;
}

void RouterParams::visit(const ParamVisitor& f) {
  for (std::size_t l = 0; l < w.size(); ++l) {
    f("router/layer" + std::to_string(l) + "/w", w[l]);
    f("router/layer" + std::to_string(l) + "/b", b[l]);
  }
}

void RouterParams::visit(const ConstParamVisitor& f) const {
  for (std::size_t l = 0; l < w.size(); ++l) {
    f("router/layer" + std::to_string(l) + "/w", w[l]);
    f("router/layer" + std::to_string(l) + "/b", b[l]);
  }
}

GateVector GateVector::threshold(const RowVector& g, double tau) {
  if (!(tau >= 0.0 && tau < 1.0)) {
    throw ContractError("routing threshold tau must lie in [0, 1), got " + std::to_string(tau));
  }
  GateVector out;
  out.g = g;
  out.tau = tau;
  out.mask.resize(static_cast<std::size_t>(g.size()));
  for (Index l = 0; l < g.size(); ++l) out.mask[static_cast<std::size_t>(l)] = g(l) >= tau;
  return out;
}

std::size_t GateVector::executed() const {
  std::size_t n = 0;
  for (bool m : mask) n += m ? 1 : 0;
  return n;
}

namespace {

template <typename Self, typename F>
void visit_student(Self& s, const F& f) {
  s.backbone.visit(f);
  for (std::size_t l = 0; l < s.graphs.size(); ++l) {
    const std::string base = "student/layer" + std::to_string(l) + "/";
    s.graphs[l].visit(base + "graph/", f);
    s.heads[l].visit(base + "head/", f);
  }
  s.router.visit(f);
}

}  // namespace

void StudentModel::visit(const ParamVisitor& f) { visit_student(*this, f); }
void StudentModel::visit(const ConstParamVisitor& f) const { visit_student(*this, f); }

std::vector<Tensor*> StudentModel::trainable() {
  std::vector<Tensor*> out;
  for (Tensor* t : {&backbone.enc_v_w, &backbone.enc_v_b, &backbone.enc_l_w, &backbone.enc_l_b}) {
    out.push_back(t);
  }
  for (std::size_t l = 0; l < backbone.layers.size(); ++l) {
    backbone.layers[l].visit("", ParamVisitor([&](const std::string&, Tensor& t) { out.push_back(&t); }));
  }
  for (std::size_t l = 0; l < graphs.size(); ++l) {
    CapsuleParams& g = graphs[l];
    for (Tensor* t : {&g.phi, &g.psi, &g.w1, &g.w2, &g.wp, &g.proj}) out.push_back(t);
    heads[l].visit("", ParamVisitor([&](const std::string&, Tensor& t) { out.push_back(&t); }));
  }
  for (std::size_t l = 0; l < router.layers(); ++l) {
    out.push_back(&router.w[l]);
    out.push_back(&router.b[l]);
  }
  return out;
}

void StudentModel::set_requires_grad(bool on) {
  for (Tensor* t : trainable()) t->set_requires_grad(on);
}

std::uint64_t StudentModel::parameter_hash() const {
  Fnv1a h;
  visit(ConstParamVisitor([&](const std::string& name, const Tensor& t) {
    h.update(name);
    h.update_value(t.content_hash());
  }));
  return h.digest();
}

std::uint64_t StudentModel::backbone_hash() const { return backbone.parameter_hash(); }

StudentModel derive_student(const Backbone& teacher, const TeacherProbe& probe, double bias_init) {
  if (probe.layers() != teacher.layers.size()) {
    throw ContractError("derive_student: probe has " + std::to_string(probe.layers()) +
                        " layers, teacher " + std::to_string(teacher.layers.size()));
  }
  StudentModel s;
  s.backbone = teacher;
  s.graphs = probe.graphs;
  s.heads = probe.heads;
  s.router = RouterParams::init(teacher.layers.size(), teacher.config.width, bias_init);
  s.backbone.set_requires_grad(false);
  for (auto& g : s.graphs) g.visit("", ParamVisitor([](const std::string&, Tensor& t) { t.set_requires_grad(false); }));
  for (auto& h : s.heads) h.visit("", ParamVisitor([](const std::string&, Tensor& t) { t.set_requires_grad(false); }));
  return s;
}

Var compute_gates(const RouterParams& router, const EncoderOutputs& enc) {
  Tape& tape = enc.visual.tape();
  const Var parts[] = {ops::mean_rows(enc.visual), enc.language};
  const Var pooled = ops::concat_cols(parts);  // [1, 2d]
  if (router.layers() == 0 || router.w.front().size() != static_cast<std::size_t>(pooled.cols())) {
    throw ContractError("compute_gates: router width does not match encoder outputs");
  }
  std::vector<Var> logits;
  logits.reserve(router.layers());
  for (std::size_t l = 0; l < router.layers(); ++l) {
    const Var dot = ops::matmul(pooled, ops::transpose(tape.parameter(router.w[l])));
    logits.push_back(ops::add(dot, tape.parameter(router.b[l])));
  }
  return ops::sigmoid(ops::concat_cols(logits));
}

SoftForward soft_gated_forward(const StudentModel& student, const EncoderOutputs& enc,
                               const GraphOptions& opts, Rng* rng, bool train,
                               std::optional<Var> gates) {
  SoftForward out;
  out.gates = gates ? *gates : compute_gates(student.router, enc);
  const std::size_t layers = student.layers();
  if (out.gates.cols() != static_cast<Index>(layers) || out.gates.rows() != 1) {
    throw ContractError("soft_gated_forward: gates must be [1, L]");
  }
  Var z = initial_state(enc);
  for (std::size_t l = 0; l < layers; ++l) {
    try {
      const Var candidate = apply_layer(z, student.backbone.layers[l], student.backbone.config.heads);
      z = ops::gate_blend(candidate, z, ops::element(out.gates, 0, static_cast<Index>(l)));
    } catch (const NumericalError& e) {
      throw NumericalError("student layer " + std::to_string(l + 1) + ": " + e.what());
    }
    out.states.push_back(z);
    const Var s = encapsulate(z, student.graphs[l], opts, rng, train).capsule;
    out.capsules.push_back(s);
    out.actions.push_back(apply_head(student.heads[l], s, opts.dropout, rng, train));
  }
  out.z_last = z;
  return out;
}

RowVector gate_values(const StudentModel& student, const Episode& e) {
  Tape tape(GradMode::kInference);
  const EncoderOutputs enc = encode(tape, student.backbone, e.visual, e.instruction);
  return compute_gates(student.router, enc).value();
}

namespace {

RoutedOutput run_masked(const StudentModel& student, Tape& tape, const EncoderOutputs& enc,
                        const RowVector& g, const std::vector<bool>& mask) {
  const std::size_t layers = student.layers();
  if (mask.size() != layers) {
    throw ContractError("routed_forward: mask length " + std::to_string(mask.size()) +
                        " != L=" + std::to_string(layers));
  }
  const FlopsModel flops = FlopsModel::from_config(student.backbone.config,
                                                   static_cast<std::size_t>(enc.visual.rows()));
  RoutedOutput out;
  out.executed = mask;
  Var z = initial_state(enc);
  for (std::size_t l = 0; l < layers; ++l) {
    if (mask[l]) z = apply_layer(z, student.backbone.layers[l], student.backbone.config.heads);
    out.trace.push_back({g(static_cast<Index>(l)), mask[l], mask[l] ? flops.layer_costs[l] : 0.0});
  }
  out.z = z.value();
  (void)tape;
  return out;
}

}  // namespace

RoutedOutput routed_forward(const StudentModel& student, const Episode& e,
                            const std::vector<bool>& mask) {
  Tape tape(GradMode::kInference);
  const EncoderOutputs enc = encode(tape, student.backbone, e.visual, e.instruction);
  const RowVector g = compute_gates(student.router, enc).value();
  RoutedOutput out = run_masked(student, tape, enc, g, mask);
  out.gates.g = g;
  out.gates.mask = mask;
  out.gates.tau = 0.0;
  return out;
}

RoutedOutput hard_routed_forward(const StudentModel& student, const Episode& e, double tau) {
  Tape tape(GradMode::kInference);
  const EncoderOutputs enc = encode(tape, student.backbone, e.visual, e.instruction);
  const RowVector g = compute_gates(student.router, enc).value();
  GateVector gv = GateVector::threshold(g, tau);
  RoutedOutput out = run_masked(student, tape, enc, g, gv.mask);
  out.gates = std::move(gv);
  return out;
}

ActionVector predict_action(const StudentModel& student, const Matrix& z) {
  Tape tape(GradMode::kInference);
  return native_action_head(student.backbone.head, tape.constant(z, "z")).value();
}

}  // namespace actdistill
