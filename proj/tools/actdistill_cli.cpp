// actdistill command-line driver. Artifacts and CSVs go to --out; timings and
// summaries go to stdout; failures print one line on stderr.
#include "actdistill/checkpoint.hpp"
#include "actdistill/error.hpp"
#include "actdistill/gradient_suite.hpp"
#include "actdistill/hash.hpp"
#include "actdistill/pipeline.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace actdistill;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::vector<std::string> overrides;

  Config config() const {
    Config cfg = config_path.empty() ? Config() : load_config(config_path);
    if (seed) apply_seed(cfg, *seed);
    for (const auto& o : overrides) apply_override(cfg, o);
    cfg.validate();
    return cfg;
  }
  ArtifactPaths out_paths() const {
    fs::create_directories(out);
    return {out};
  }
  ArtifactPaths in_paths(const Config& cfg) const { return {cfg.paths_in.empty() ? fs::path(out) : fs::path(cfg.paths_in)}; }
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "config file of 'key = value' lines");
  app->add_option("--seed", c.seed, "sets world.seed=s, backbone.seed=s+1, train.seed=s+2, teacher.seed=s+3, stage1.seed=s+4");
  app->add_option("--out", c.out, "output directory")->capture_default_str();
  app->add_option("--set", c.overrides, "override, key=value (repeatable)");
}

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

RunManifest manifest(const Config& cfg, const std::string& stage, std::uint64_t data, std::uint64_t teacher,
                     std::uint64_t probe) {
  return {.stage = stage, .config_hash = cfg.hash(), .dataset_hash = data, .teacher_hash = teacher,
          .probe_hash = probe};
}

// Loads a split if present, otherwise generates and stores it.
Dataset split(const Config& cfg, const fs::path& path, std::size_t n, std::uint64_t first) {
  if (fs::exists(path)) {
    Dataset d = load_dataset(path);
    if (d.config.hash() != cfg.world.hash() || d.size() != n || d.first_index != first) {
      throw IntegrityError(IntegrityCode::kHashMismatch, path.string() + " does not match the world config");
    }
    return d;
  }
  Dataset d = make_dataset(cfg.world, n, first);
  fs::create_directories(path.parent_path());
  save_dataset(d, path);
  return d;
}

DataSplits load_splits(const Config& cfg, const ArtifactPaths& in) {
  return {split(cfg, in.train_data(), cfg.n_train, 0), split(cfg, in.test_data(), cfg.n_test, cfg.n_train)};
}

Backbone load_teacher(const Config& cfg, const ArtifactPaths& in) {
  return load_backbone(in.teacher(), cfg.backbone_config());
}

TeacherProbe load_checked_probe(const Config& cfg, const ArtifactPaths& in, const Backbone& teacher) {
  RunManifest run;
  TeacherProbe probe = load_probe(in.probe(), cfg.backbone_config(), cfg.graph, &run);
  if (run.teacher_hash != teacher.parameter_hash()) {
    throw IntegrityError(IntegrityCode::kHashMismatch, "probe was trained on a different teacher");
  }
  return probe;
}

StudentModel load_trained_student(const Config& cfg, const ArtifactPaths& in) {
  return load_student(in.student(), cfg.backbone_config(), cfg.graph);
}

void write_teacher_rows(const std::vector<TeacherRow>& rows, const fs::path& path) {
  CsvWriter csv({"step", "loss"});
  for (const auto& r : rows) csv.row().add(r.step).add(r.loss);
  csv.write(path);
}

void write_stage1_rows(const std::vector<Stage1Row>& rows, const fs::path& path) {
  CsvWriter csv({"step", "layer", "aux_mse"});
  for (const auto& r : rows) csv.row().add(r.step).add(r.layer).add(r.aux_mse);
  csv.write(path);
}

void write_stage2_rows(const std::vector<Stage2Row>& rows, const fs::path& path) {
  CsvWriter csv({"step", "layer", "sem", "act", "lambda", "lb", "total"});
  for (const auto& r : rows) csv.row().add(r.step).add(r.layer).add(r.sem).add(r.act).add(r.lambda).add(r.lb).add(r.total);
  csv.write(path);
}

void write_eval(const std::vector<EvalReport>& reports, const fs::path& path) {
  CsvWriter csv({"tau", "success", "action_mse", "mean_executed", "flops_ratio", "backbone_ratio", "speedup"});
  for (const auto& r : reports) {
    csv.row().add(r.tau).add(r.success).add(r.action_mse).add(r.mean_executed).add(r.flops_ratio)
        .add(r.backbone_ratio).add(r.speedup);
  }
  csv.write(path);
}

void write_sweep_tau(const std::vector<EvalReport>& reports, const fs::path& path) {
  CsvWriter csv({"tau", "success", "flops_ratio", "speedup"});
  for (const auto& r : reports) csv.row().add(r.tau).add(r.success).add(r.flops_ratio).add(r.speedup);
  csv.write(path);
}

void print_eval(const char* label, const EvalReport& r) {
  std::cout << label << ": tau=" << r.tau << " success=" << r.success << " mse=" << r.action_mse
            << " executed=" << r.mean_executed << " flops_ratio=" << r.flops_ratio
            << " backbone_ratio=" << r.backbone_ratio << " wall_ms/ep=" << r.wall_ms_per_episode << "\n";
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      if constexpr (std::is_same_v<T, double>) {
        out.push_back(std::stod(item, &used));
      } else {
        if (!item.empty() && item[0] == '-') throw std::invalid_argument("negative");
        out.push_back(static_cast<T>(std::stoull(item, &used)));
      }
      if (used != item.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ConfigError(std::string(what) + ": cannot parse '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError(std::string(what) + ": empty list");
  return out;
}

// ---- subcommands ----

void cmd_gen_data(const Common& c) {
  const Config cfg = c.config();
  const ArtifactPaths out = c.out_paths();
  const DataSplits d = make_splits(cfg);
  save_dataset(d.train, out.train_data());
  save_dataset(d.test, out.test_data());
  CsvWriter csv({"split", "episodes", "first_index", "content_hash"});
  csv.row().add("train").add(d.train.size()).add(std::to_string(d.train.first_index)).add(hex_digest(d.train.content_hash()));
  csv.row().add("test").add(d.test.size()).add(std::to_string(d.test.first_index)).add(hex_digest(d.test.content_hash()));
  csv.write(out.dir / "datasets.csv");
  std::cout << "train " << hex_digest(d.train.content_hash()) << "\ntest " << hex_digest(d.test.content_hash()) << "\n";
}

void cmd_train_teacher(const Common& c) {
  const Config cfg = c.config();
  const ArtifactPaths out = c.out_paths();
  const DataSplits d = load_splits(cfg, c.in_paths(cfg));
  const auto t0 = std::chrono::steady_clock::now();
  const TeacherResult t = train_teacher(cfg.backbone_config(), d.train, cfg.teacher);
  save_backbone(t.model, manifest(cfg, "teacher", d.train.content_hash(), t.model.parameter_hash(), 0), out.teacher());
  write_teacher_rows(t.rows, out.dir / "teacher_loss.csv");
  std::cout << "teacher: " << elapsed(t0) << " s, test mse " << teacher_mse(t.model, d.test) << "\n";
}

void cmd_stage1(const Common& c) {
  const Config cfg = c.config();
  const ArtifactPaths in = c.in_paths(cfg), out = c.out_paths();
  const DataSplits d = load_splits(cfg, in);
  const Backbone teacher = load_teacher(cfg, in);
  const auto t0 = std::chrono::steady_clock::now();
  const Stage1Result s1 = stage1_train(teacher, d.train, cfg.stage1, cfg.graph, cfg.calib_episodes);
  const auto run = manifest(cfg, "stage1", d.train.content_hash(), teacher.parameter_hash(), s1.probe.parameter_hash());
  save_probe(s1.probe, run, out.probe());
  save_teacher_cache(export_teacher_capsules(s1.probe, teacher, d.train, cfg.graph), out.cache());
  write_stage1_rows(s1.rows, out.dir / "stage1_loss.csv");
  const auto mse = probe_layer_mse(s1.probe, teacher, d.test, cfg.graph);
  CsvWriter csv({"layer", "test_aux_mse"});
  for (std::size_t l = 0; l < mse.size(); ++l) csv.row().add(l + 1).add(mse[l]);
  csv.write(out.dir / "probe_mse.csv");
  std::cout << "stage1: " << elapsed(t0) << " s, test aux mse first " << mse.front() << " last " << mse.back() << "\n";
}

void cmd_stage2(const Common& c) {
  const Config cfg = c.config();
  const ArtifactPaths in = c.in_paths(cfg), out = c.out_paths();
  const DataSplits d = load_splits(cfg, in);
  const Backbone teacher = load_teacher(cfg, in);
  const TeacherProbe probe = load_checked_probe(cfg, in, teacher);
  const TeacherCache cache = load_teacher_cache(in.cache(), probe.parameter_hash(), d.train.content_hash());
  const auto t0 = std::chrono::steady_clock::now();
  const Stage2Result s2 = stage2_train(teacher, probe, d.train, cache, cfg.stage2_options());
  save_student(s2.student,
               manifest(cfg, "stage2", d.train.content_hash(), teacher.parameter_hash(), probe.parameter_hash()),
               out.student());
  write_stage2_rows(s2.rows, out.dir / "stage2_loss.csv");
  std::cout << "stage2: " << elapsed(t0) << " s, rolled back " << s2.rolled_back << " batches\n";
}

void cmd_eval(const Common& c, std::optional<double> tau_opt) {
  const Config cfg = c.config();
  const ArtifactPaths in = c.in_paths(cfg), out = c.out_paths();
  const DataSplits d = load_splits(cfg, in);
  const StudentModel student = load_trained_student(cfg, in);
  const double tau = tau_opt.value_or(cfg.tau);
  const EvalReport dense = evaluate(student, d.test, 0.0, cfg.success_threshold);
  std::vector<GateRow> gates;
  const EvalReport routed = evaluate(student, d.test, tau, cfg.success_threshold, &gates);
  write_eval({dense, routed}, out.dir / "eval.csv");
  CsvWriter csv({"episode", "layer", "g", "executed"});
  for (const auto& g : gates) csv.row().add(g.episode).add(g.layer).add(g.g).add(std::size_t{g.executed ? 1u : 0u});
  csv.write(out.dir / "gates.csv");
  print_eval("dense", dense);
  print_eval("routed", routed);
}

void cmd_sweep_tau(const Common& c, const std::string& taus) {
  const Config cfg = c.config();
  const auto tau_list = parse_list<double>(taus, "--taus");
  const ArtifactPaths in = c.in_paths(cfg), out = c.out_paths();
  const DataSplits d = load_splits(cfg, in);
  const StudentModel student = load_trained_student(cfg, in);
  const auto reports = sweep_tau(student, d.test, tau_list, cfg.success_threshold);
  write_sweep_tau(reports, out.dir / "sweep_tau.csv");
  for (const auto& r : reports) print_eval("sweep", r);
}

void cmd_sweep_skip(const Common& c, const std::string& ns_text) {
  const Config cfg = c.config();
  std::vector<std::size_t> ns;
  if (!ns_text.empty()) ns = parse_list<std::size_t>(ns_text, "--n");
  const ArtifactPaths in = c.in_paths(cfg), out = c.out_paths();
  const DataSplits d = load_splits(cfg, in);
  const StudentModel student = load_trained_student(cfg, in);
  if (ns.empty()) {
    for (std::size_t n = 0; n < student.layers(); ++n) ns.push_back(n);
  }
  const auto rows = sweep_skip(student, d.test, ns, cfg.success_threshold);
  CsvWriter csv({"n", "success", "flops_ratio"});
  for (const auto& r : rows) csv.row().add(r.n).add(r.success).add(r.flops_ratio);
  csv.write(out.dir / "sweep_skip.csv");
  for (const auto& r : rows) std::cout << "n=" << r.n << " success=" << r.success << " flops_ratio=" << r.flops_ratio << "\n";
}

void cmd_activation_hist(const Common& c, std::optional<double> tau_opt) {
  const Config cfg = c.config();
  const ArtifactPaths in = c.in_paths(cfg), out = c.out_paths();
  const DataSplits d = load_splits(cfg, in);
  const StudentModel student = load_trained_student(cfg, in);
  const auto freq = activation_histogram(student, d.test, tau_opt.value_or(cfg.tau));
  CsvWriter csv({"layer", "frequency"});
  for (std::size_t l = 0; l < freq.size(); ++l) csv.row().add(l + 1).add(freq[l]);
  csv.write(out.dir / "activation_hist.csv");
  for (std::size_t l = 0; l < freq.size(); ++l) std::cout << "layer " << l + 1 << ": " << freq[l] << "\n";
}

int cmd_gradcheck(const Common& c, std::size_t instances) {
  const Config cfg = c.config();  // validates overrides even though the suite has fixed sizes
  (void)cfg;
  const ArtifactPaths out = c.out_paths();
  GradSuiteOptions opts;
  opts.instances = instances;
  const auto results = run_gradient_suite(opts);
  CsvWriter csv({"check", "instance", "tensors", "coords", "rel_error", "passed"});
  std::size_t failed = 0;
  double worst = 0.0;
  for (const auto& r : results) {
    csv.row().add(r.check).add(r.instance).add(r.tensors).add(r.coords).add(r.rel_error).add(std::size_t{r.passed ? 1u : 0u});
    failed += r.passed ? 0 : 1;
    worst = std::max(worst, r.rel_error);
    if (!r.passed) std::cout << "FAIL " << r.check << "[" << r.instance << "] rel_err=" << r.rel_error << "\n";
  }
  csv.write(out.dir / "gradcheck.csv");
  std::cout << results.size() << " comparisons, " << failed << " failed, worst rel err " << worst << "\n";
  return failed == 0 ? 0 : 4;
}

void cmd_run(const Common& c) {
  const Config cfg = c.config();
  const ArtifactPaths out = c.out_paths();
  const auto t0 = std::chrono::steady_clock::now();
  const RunOutcome r = run_pipeline(cfg, &std::cout);
  save_dataset(r.data.train, out.train_data());
  save_dataset(r.data.test, out.test_data());
  const auto th = r.teacher.parameter_hash(), ph = r.probe.parameter_hash(), dh = r.data.train.content_hash();
  save_backbone(r.teacher, manifest(cfg, "teacher", dh, th, 0), out.teacher());
  save_probe(r.probe, manifest(cfg, "stage1", dh, th, ph), out.probe());
  save_student(r.student, manifest(cfg, "stage2", dh, th, ph), out.student());
  write_teacher_rows(r.teacher_rows, out.dir / "teacher_loss.csv");
  write_stage1_rows(r.stage1_rows, out.dir / "stage1_loss.csv");
  write_stage2_rows(r.stage2.rows, out.dir / "stage2_loss.csv");
  write_eval({r.dense, r.routed}, out.dir / "eval.csv");
  write_sweep_tau(sweep_tau(r.student, r.data.test, {0.4, 0.5, 0.6, 0.7}, cfg.success_threshold),
                  out.dir / "sweep_tau.csv");
  std::cout << "teacher test mse " << r.teacher_test_mse << "\n";
  print_eval("teacher", r.teacher_eval);
  print_eval("dense", r.dense);
  print_eval("routed", r.routed);
  std::cout << "total: " << elapsed(t0) << " s\n";
}

void cmd_ablate(const Common& c, const std::string& axis) {
  const Config cfg = c.config();
  const ArtifactPaths out = c.out_paths();
  const auto rows = run_ablation(cfg, axis, &std::cout);
  CsvWriter csv({"variant", "dense_success", "routed_success", "flops_ratio", "backbone_ratio"});
  for (const auto& r : rows) {
    csv.row().add(r.variant).add(r.dense.success).add(r.routed.success).add(r.routed.flops_ratio).add(r.routed.backbone_ratio);
  }
  csv.write(out.dir / ("ablation_" + axis + ".csv"));
  for (const auto& r : rows) {
    std::cout << r.variant << ": dense " << r.dense.success << " routed " << r.routed.success
              << " flops " << r.routed.flops_ratio << "\n";
  }
}

int fail(const char* kind, int code, const std::string& what) {
  std::cerr << "error kind=" << kind << " exit=" << code << " message=" << what << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ActDistill desk-scale distillation with dynamic layer routing"};
  app.require_subcommand(1);
  Common common;
  std::optional<double> tau;
  std::string taus = "0.4,0.5,0.6,0.7", ns, axis;
  std::size_t instances = 10;

  auto* gen = app.add_subcommand("gen-data", "generate train/test episode sets");
  auto* teacher = app.add_subcommand("train-teacher", "fit the teacher backbone");
  auto* s1 = app.add_subcommand("stage1", "train per-layer graph encoders and probe heads");
  auto* s2 = app.add_subcommand("stage2", "distill the routed student");
  auto* ev = app.add_subcommand("eval", "dense and routed evaluation with gate traces");
  auto* st = app.add_subcommand("sweep-tau", "evaluate over routing thresholds");
  auto* sk = app.add_subcommand("sweep-skip", "force-skip the n lowest-gated layers");
  auto* ah = app.add_subcommand("activation-hist", "per-layer execution frequency");
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  auto* run = app.add_subcommand("run", "teacher, stage I, stage II and evaluation in one go");
  auto* ab = app.add_subcommand("ablate", "train and evaluate ablation variants");
  for (auto* s : {gen, teacher, s1, s2, ev, st, sk, ah, gc, run, ab}) add_common(s, common);
  ev->add_option("--tau", tau, "routing threshold (default router.tau)");
  ah->add_option("--tau", tau, "routing threshold (default router.tau)");
  st->add_option("--taus", taus, "comma-separated thresholds")->capture_default_str();
  sk->add_option("--n", ns, "comma-separated skip counts (default 0..L-1)");
  gc->add_option("--instances", instances, "random instances per check")->capture_default_str();
  ab->add_option("--axis", axis, "graph, loss-terms, k or alpha-beta")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", 2, e.what());
  }

  try {
    if (*gen) cmd_gen_data(common);
    else if (*teacher) cmd_train_teacher(common);
    else if (*s1) cmd_stage1(common);
    else if (*s2) cmd_stage2(common);
    else if (*ev) cmd_eval(common, tau);
    else if (*st) cmd_sweep_tau(common, taus);
    else if (*sk) cmd_sweep_skip(common, ns);
    else if (*ah) cmd_activation_hist(common, tau);
    else if (*gc) return cmd_gradcheck(common, instances);
    else if (*run) cmd_run(common);
    else if (*ab) cmd_ablate(common, axis);
  } catch (const ConfigError& e) {
    return fail("config", 2, e.what());
  } catch (const ContractError& e) {
    return fail("usage", 2, e.what());
  } catch (const IntegrityError& e) {
    return fail("integrity", 3, e.what());
  } catch (const NumericalError& e) {
    return fail("numerical", 4, e.what());
  } catch (const std::exception& e) {
    return fail("internal", 1, e.what());
  }
  return 0;
}
