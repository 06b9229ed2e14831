#include "actdistill/pipeline.hpp"

#include "actdistill/error.hpp"

#include <chrono>

namespace actdistill {

DataSplits make_splits(const Config& cfg) {
  return {make_dataset(cfg.world, cfg.n_train, 0), make_dataset(cfg.world, cfg.n_test, cfg.n_train)};
}

namespace {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace

RunOutcome run_from_teacher(const Config& cfg, DataSplits data, Backbone teacher, std::ostream* log) {
  cfg.validate();
  RunOutcome out;
  out.data = std::move(data);
  out.teacher = std::move(teacher);
  out.teacher_test_mse = teacher_mse(out.teacher, out.data.test);
  out.teacher_eval = evaluate_dense(out.teacher, out.data.test, cfg.success_threshold);

  Stopwatch sw1;
  Stage1Result s1 = stage1_train(out.teacher, out.data.train, cfg.stage1, cfg.graph, cfg.calib_episodes);
  out.probe = std::move(s1.probe);
  out.stage1_rows = std::move(s1.rows);
  out.probe_test_mse = probe_layer_mse(out.probe, out.teacher, out.data.test, cfg.graph);
  if (log) *log << "stage1: " << sw1.seconds() << " s\n";

  Stopwatch sw2;
  const TeacherCache cache = export_teacher_capsules(out.probe, out.teacher, out.data.train, cfg.graph);
  out.stage2 = stage2_train(out.teacher, out.probe, out.data.train, cache, cfg.stage2_options());
  out.student = out.stage2.student;
  if (log) *log << "stage2: " << sw2.seconds() << " s, rolled back " << out.stage2.rolled_back << "\n";

  out.dense = evaluate(out.student, out.data.test, 0.0, cfg.success_threshold);
  out.routed = evaluate(out.student, out.data.test, cfg.tau, cfg.success_threshold);
  return out;
}

RunOutcome run_pipeline(const Config& cfg, std::ostream* log) {
  cfg.validate();
  DataSplits data = make_splits(cfg);
  Stopwatch sw;
  TeacherResult t = train_teacher(cfg.backbone_config(), data.train, cfg.teacher);
  if (log) *log << "teacher: " << sw.seconds() << " s\n";
  RunOutcome out = run_from_teacher(cfg, std::move(data), std::move(t.model), log);
  out.teacher_rows = std::move(t.rows);
  return out;
}

std::vector<std::pair<std::string, Config>> ablation_variants(const Config& base, const std::string& axis) {
  std::vector<std::pair<std::string, Config>> v;
  auto variant = [&](std::string name, auto&& edit) {
    Config c = base;
    edit(c);
    c.validate();
    v.emplace_back(std::move(name), std::move(c));
  };
  if (axis == "graph") {
    variant("gat", [](Config& c) { c.graph.kind = EncapsulationKind::kGat; });
    variant("mlp", [](Config& c) { c.graph.kind = EncapsulationKind::kMlp; });
  } else if (axis == "loss-terms") {
    variant("full", [](Config&) {});
    variant("no_semantic", [](Config& c) { c.loss.use_semantic = false; });
    variant("no_action", [](Config& c) { c.loss.use_action = false; });
    variant("no_load_balance", [](Config& c) { c.loss.use_load_balance = false; });
  } else if (axis == "k") {
    const std::size_t tokens = base.world.n_tokens + 1;
    for (std::size_t k : {std::size_t{2}, std::size_t{4}, std::size_t{8}}) {
      const std::size_t kk = std::min(k, tokens);
      variant("k=" + std::to_string(kk), [kk](Config& c) { c.graph.k = kk; });
    }
  } else if (axis == "alpha-beta") {
    for (auto [a, b] : {std::pair{1.0, 1.0}, {1.0, 2.0}, {2.0, 1.0}, {1.0, 0.5}}) {
      variant(format_g6(a) + ":" + format_g6(b), [a, b](Config& c) {
        c.loss.alpha = a;
        c.loss.beta = b;
      });
    }
  } else {
    throw ConfigError("unknown ablation axis '" + axis + "' (graph, loss-terms, k, alpha-beta)");
  }
  return v;
}

std::vector<AblationRow> run_ablation(const Config& base, const std::string& axis, std::ostream* log) {
  const auto variants = ablation_variants(base, axis);
  DataSplits data = make_splits(base);
  const Backbone teacher = train_teacher(base.backbone_config(), data.train, base.teacher).model;
  std::vector<AblationRow> rows;
  for (const auto& [name, cfg] : variants) {
    if (log) *log << "variant " << name << "\n";
    const RunOutcome r = run_from_teacher(cfg, data, teacher, log);
    rows.push_back({name, r.dense, r.routed});
  }
  return rows;
}

}  // namespace actdistill
