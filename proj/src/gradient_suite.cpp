#include "actdistill/gradient_suite.hpp"

#include "actdistill/gradcheck.hpp"
#include "actdistill/losses.hpp"
#include "actdistill/trainer.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

namespace actdistill {

namespace {

using LossFn = std::function<Var(Tape&)>;
using NamedParams = std::vector<std::pair<std::string, Tensor*>>;

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

std::vector<std::size_t> pick_coords(std::size_t n, std::size_t max, Rng& rng) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (max == 0 || n <= max) return all;
  for (std::size_t i = 0; i < max; ++i) std::swap(all[i], all[i + rng.below(n - i)]);
  all.resize(max);
  std::sort(all.begin(), all.end());
  return all;
}

void compare(const std::string& check, std::size_t instance, const LossFn& loss,
             const NamedParams& params, const GradSuiteOptions& opts, Rng& rng,
             std::vector<GradCheck>& out) {
  for (const auto& [name, t] : params) {
    t->set_requires_grad(true);
    t->zero_grad();
  }
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  // One vector over every sampled coordinate of every tensor: the gradient of
  // the loss with respect to the whole parameter set.
  std::vector<double> analytic, numeric;
  for (const auto& [name, t] : params) {
    const Matrix a = t->grad();
    const auto coords = pick_coords(t->size(), opts.max_coords, rng);
    const Matrix n = finite_diff_grad_inplace(
        [&] {
          Tape tape(GradMode::kInference);
          return loss(tape).item();
        },
        *t, opts.eps, coords);
    for (std::size_t c : coords) {
      analytic.push_back(a.data()[c]);
      numeric.push_back(n.data()[c]);
    }
  }
  const Eigen::Map<const Matrix> am(analytic.data(), 1, static_cast<Index>(analytic.size()));
  const Eigen::Map<const Matrix> nm(numeric.data(), 1, static_cast<Index>(numeric.size()));
  const double err = relative_error(am, nm);
  out.push_back({check, instance, params.size(), analytic.size(), err, err < opts.tolerance});
  for (const auto& [name, t] : params) {
    t->clear_grad();
    t->set_requires_grad(false);
  }
}

BackboneConfig small_backbone(Rng& rng) {
  BackboneConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.width = 8 + 8 * rng.below(2);  // 8 or 16
  cfg.ffn_width = 8;
  cfg.capsule_dim = 2 + rng.below(3);
  cfg.token_dim = 11;
  cfg.seed = rng.next();
  return cfg;
}

WorldConfig small_world(Rng& rng) {
  WorldConfig w;
  w.n_tokens = 2 + rng.below(6);  // N = n_tokens + 1 <= 8
  w.token_dim = 11;
  w.n_objects = 2;
  w.seed = rng.next();
  return w;
}

GraphOptions small_graph(Rng& rng, std::size_t tokens) {
  GraphOptions g;
  g.k = 1 + rng.below(tokens);
  g.affinity_dim = 2 + rng.below(3);
  g.dropout = 0.0;
  return g;
}

NamedParams probe_params(TeacherProbe& probe) {
  NamedParams out;
  probe.visit(ParamVisitor([&](const std::string& name, Tensor& t) {
    if (name.find("std_") == std::string::npos) out.emplace_back(name, &t);
  }));
  return out;
}

void capsule_check(std::size_t inst, Rng& rng, const GradSuiteOptions& opts, std::vector<GradCheck>& out) {
  const std::size_t n = 2 + rng.below(7);
  const std::size_t d = 4 * (1 + rng.below(4));
  GraphOptions g = small_graph(rng, n);
  g.kind = inst % 5 == 4 ? EncapsulationKind::kMlp : EncapsulationKind::kGat;
  const std::size_t dc = 2 + rng.below(d - 1);
  CapsuleParams p = CapsuleParams::init(d, g.affinity_dim, dc, rng);
  p.calibrated = true;
  for (double& v : p.std_mean.data()) v = 0.1 * rng.normal();
  for (double& v : p.std_var.data()) v = rng.uniform(0.5, 2.0);
  Tensor h = random_tensor({n, d}, rng);
  const Matrix readout = random_tensor({1, dc}, rng).values();
  const LossFn loss = [&](Tape& tape) {
    const Var s = encapsulate(tape.parameter(h), p, g, nullptr, false).capsule;
    return ops::sum_all(ops::mul(s, tape.constant(readout)));
  };
  NamedParams params{{"h", &h}, {"W1", &p.w1}, {"W2", &p.w2}, {"wp", &p.wp}, {"proj", &p.proj}};
  if (g.kind == EncapsulationKind::kGat) {
    params.emplace_back("phi", &p.phi);
    params.emplace_back("psi", &p.psi);
  }
  compare("capsule_pipeline", inst, loss, params, opts, rng, out);
}

struct SmallProblem {
  Backbone teacher;
  Dataset data;
  GraphOptions graph;
  TeacherProbe probe;
};

SmallProblem small_problem(Rng& rng, std::size_t episodes) {
  SmallProblem sp;
  const WorldConfig world = small_world(rng);
  sp.teacher = Backbone::init(small_backbone(rng));
  const std::uint64_t first = rng.below(1000);
  sp.data = make_dataset(world, episodes, first);
  sp.graph = small_graph(rng, world.n_tokens + 1);
  sp.probe = TeacherProbe::init(sp.teacher.config, sp.graph, rng.next());
  // Statistics from a handful of episodes would leave near-zero variances.
  calibrate(sp.probe.graphs, sp.teacher, make_dataset(world, 32, first), sp.graph, 32);
  return sp;
}

void aux_check(std::size_t inst, Rng& rng, const GradSuiteOptions& opts, std::vector<GradCheck>& out) {
  SmallProblem sp = small_problem(rng, 1 + rng.below(3));
  Matrix actions(static_cast<Index>(sp.data.size()), kActionDim);
  for (std::size_t i = 0; i < sp.data.size(); ++i) actions.row(static_cast<Index>(i)) = sp.data.episodes[i].action;
  const LossFn loss = [&](Tape& tape) {
    std::vector<std::vector<Var>> hidden;
    for (const Episode& e : sp.data.episodes) hidden.push_back(teacher_hidden(tape, sp.teacher, e));
    return aux_loss(sp.probe, hidden, actions, sp.graph, nullptr, false).total;
  };
  compare("aux_loss", inst, loss, probe_params(sp.probe), opts, rng, out);
}

void semantic_check(std::size_t inst, Rng& rng, const GradSuiteOptions& opts, std::vector<GradCheck>& out) {
  const std::size_t b = 1 + rng.below(5);
  const std::size_t dc = 2 + rng.below(7);
  Tensor s = random_tensor({b, dc}, rng);
  const Matrix tea = random_tensor({b, dc}, rng).values();
  const double eta = rng.uniform(0.0, 1.0);
  const LossFn loss = [&](Tape& tape) {
    return semantic_loss(tape.parameter(s), tape.constant(tea), eta);
  };
  compare("semantic_loss", inst, loss, {{"s_stu", &s}}, opts, rng, out);
}

void action_check(std::size_t inst, Rng& rng, const GradSuiteOptions& opts, std::vector<GradCheck>& out) {
  const std::size_t b = 1 + rng.below(4);
  Tensor pred = random_tensor({b, 7}, rng);
  Tensor prev = random_tensor({b, 7}, rng);
  const Matrix target = random_tensor({b, 7}, rng).values();
  const Matrix teacher = random_tensor({b, 7}, rng).values();
  const bool first = inst % 3 == 0;
  // Central differences see the previous prediction's true influence, so the
  // oracle comparison runs without the stop-gradient.
  const LossFn loss = [&](Tape& tape) {
    std::optional<Var> previous;
    if (!first) previous = tape.parameter(prev);
    return action_loss(tape.parameter(pred), tape.constant(target), tape.constant(teacher), previous, false);
  };
  NamedParams params{{"pred", &pred}};
  if (!first) params.emplace_back("previous", &prev);
  compare("action_loss", inst, loss, params, opts, rng, out);
}

void load_balance_check(std::size_t inst, Rng& rng, const GradSuiteOptions& opts, std::vector<GradCheck>& out) {
  const std::size_t b = 1 + rng.below(4);
  const std::size_t layers = 2 + rng.below(7);
  Tensor g({b, layers});
  for (double& v : g.data()) v = rng.uniform();
  const LossFn loss = [&](Tape& tape) { return load_balance(tape.parameter(g)); };
  compare("load_balance", inst, loss, {{"gates", &g}}, opts, rng, out);
}

void total_check(std::size_t inst, Rng& rng, const GradSuiteOptions& opts, std::vector<GradCheck>& out) {
  SmallProblem sp = small_problem(rng, 2 + rng.below(2));
  const TeacherCache cache = export_teacher_capsules(sp.probe, sp.teacher, sp.data, sp.graph);
  StudentModel student = derive_student(sp.teacher, sp.probe, rng.uniform(-1.0, 1.0));
  for (Tensor& w : student.router.w) {
    for (double& v : w.data()) v = 0.5 * rng.normal();
  }
  Stage2Options so;
  so.graph = sp.graph;
  so.stop_gradient = false;
  so.weights.alpha = rng.uniform(0.5, 2.0);
  so.weights.beta = rng.uniform(0.5, 2.0);
  so.weights.eta = rng.uniform(0.0, 1.0);
  so.weights.gamma = rng.uniform(0.0, 1.0);
  so.weights.kappa = rng.uniform(0.0, 3.0);
  std::vector<std::size_t> idx(sp.data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const LossFn loss = [&](Tape& tape) {
    return stage2_objective(tape, student, cache, sp.data, idx, so, nullptr, false).loss.total;
  };
  NamedParams params;
  std::vector<Tensor*> trainable = student.trainable();
  student.visit(ParamVisitor([&](const std::string& name, Tensor& t) {
    if (std::find(trainable.begin(), trainable.end(), &t) != trainable.end()) params.emplace_back(name, &t);
  }));
  compare("stage2_total", inst, loss, params, opts, rng, out);
}

using CheckFn = void (*)(std::size_t, Rng&, const GradSuiteOptions&, std::vector<GradCheck>&);

const std::vector<std::pair<std::string, CheckFn>>& registry() {
  static const std::vector<std::pair<std::string, CheckFn>> r = {
      {"capsule_pipeline", capsule_check}, {"aux_loss", aux_check},
      {"semantic_loss", semantic_check},   {"action_loss", action_check},
      {"load_balance", load_balance_check}, {"stage2_total", total_check},
  };
  return r;
}

}  // namespace

std::vector<std::string> gradient_check_names() {
  std::vector<std::string> names;
  for (const auto& [name, fn] : registry()) names.push_back(name);
  return names;
}

std::vector<GradCheck> run_gradient_suite(const GradSuiteOptions& opts) {
  std::vector<GradCheck> out;
  std::uint64_t salt = 0;
  for (const auto& [name, fn] : registry()) {
    ++salt;
    for (std::size_t i = 0; i < opts.instances; ++i) {
      Rng rng(mix_seed(opts.seed, salt * 1000 + i));
      fn(i, rng, opts, out);
    }
  }
  return out;
}

}  // namespace actdistill
