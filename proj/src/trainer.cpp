#include "actdistill/trainer.hpp"

#include "actdistill/checkpoint.hpp"
#include "actdistill/error.hpp"
#include "actdistill/hash.hpp"

#include <cmath>
#include <set>
#include <string>

namespace actdistill {

std::map<std::string, std::string> RunManifest::to_map() const {
  return {{"stage", stage},
          {"config_hash", hex_digest(config_hash)},
          {"dataset_hash", hex_digest(dataset_hash)},
          {"teacher_hash", hex_digest(teacher_hash)},
          {"probe_hash", hex_digest(probe_hash)},
          {"version", version}};
}

namespace {

std::uint64_t parse_hex(const std::map<std::string, std::string>& m, const std::string& key) {
  const auto it = m.find(key);
  if (it == m.end()) throw IntegrityError(IntegrityCode::kMalformed, "manifest has no key " + key);
  try {
    return std::stoull(it->second, nullptr, 16);
  } catch (const std::exception&) {
    throw IntegrityError(IntegrityCode::kMalformed, "manifest key " + key + " is not a hash");
  }
}

}  // namespace

RunManifest RunManifest::from_map(const std::map<std::string, std::string>& m) {
  RunManifest r;
  const auto stage = m.find("stage");
  const auto version = m.find("version");
  if (stage == m.end() || version == m.end()) {
    throw IntegrityError(IntegrityCode::kMalformed, "manifest lacks stage or version");
  }
  r.stage = stage->second;
  r.version = version->second;
  r.config_hash = parse_hex(m, "config_hash");
  r.dataset_hash = parse_hex(m, "dataset_hash");
  r.teacher_hash = parse_hex(m, "teacher_hash");
  r.probe_hash = parse_hex(m, "probe_hash");
  return r;
}

// ---- teacher ----

namespace {

Matrix stack_actions(const Dataset& data, std::span<const std::size_t> idx) {
  Matrix a(static_cast<Index>(idx.size()), kActionDim);
  for (std::size_t b = 0; b < idx.size(); ++b) a.row(static_cast<Index>(b)) = data.episodes[idx[b]].action;
  return a;
}

}  // namespace

TeacherResult train_teacher(const BackboneConfig& cfg, const Dataset& data,
                            const TrainSchedule& schedule) {
  schedule.validate();
  if (data.size() == 0) throw ContractError("train_teacher: empty dataset");
  TeacherResult result;
  result.model = Backbone::init(cfg);
  std::vector<Tensor*> params = result.model.parameters();
  for (Tensor* t : params) t->set_requires_grad(true);
  OptimizerState state(params, {.weight_decay = schedule.weight_decay});
  const std::size_t total = schedule.total_steps(data.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    const auto order = epoch_order(data.size(), schedule.seed, epoch);
    for (std::size_t start = 0; start < order.size(); start += schedule.batch, ++step) {
      const std::size_t end = std::min(order.size(), start + schedule.batch);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      Tape tape;
      std::vector<Var> preds;
      double loss_value = 0.0;
      try {
        for (std::size_t i : idx) {
          const Episode& e = data.episodes[i];
          const auto states = forward_all_layers(result.model, encode(tape, result.model, e.visual, e.instruction));
          preds.push_back(native_action_head(result.model.head, states.back()));
        }
        const Var target = tape.constant(stack_actions(data, idx), "actions");
        const Var loss = ops::mean_all(ops::squared_norm_rows(ops::sub(ops::concat_rows(preds), target)));
        loss_value = loss.item();
        zero_grads(params);
        tape.backward(loss);
        clip_grad_norm(params, schedule.clip);
        adamw_step(state, params, lr_at(step, schedule, total));
      } catch (const NumericalError& e) {
        throw NumericalError("train_teacher: diverged at step " + std::to_string(step) + ": " + e.what());
      }
      result.rows.push_back({step, loss_value});
    }
  }
  for (Tensor* t : params) {
    t->set_requires_grad(false);
    t->clear_grad();
  }
  return result;
}

double teacher_mse(const Backbone& model, const Dataset& data) {
  double sum = 0.0;
  for (const Episode& e : data.episodes) sum += (predict_native(model, e) - e.action).squaredNorm();
  return sum / static_cast<double>(data.size());
}

// ---- stage II ----

Stage2Batch stage2_objective(Tape& tape, const StudentModel& student, const TeacherCache& cache,
                             const Dataset& data, std::span<const std::size_t> idx,
                             const Stage2Options& opts, Rng* rng, bool train) {
  if (idx.empty()) throw ContractError("stage2: empty batch");
  if (cache.capsules.size() != data.size()) {
    throw ContractError("stage2: teacher cache has " + std::to_string(cache.capsules.size()) +
                        " entries for " + std::to_string(data.size()) + " episodes");
  }
  const std::size_t L = student.layers();
  const Index B = static_cast<Index>(idx.size());
  std::vector<SoftForward> fw;
  fw.reserve(idx.size());
  std::vector<Var> gate_rows;
  for (std::size_t i : idx) {
    const Episode& e = data.episodes[i];
    fw.push_back(soft_gated_forward(student, encode(tape, student.backbone, e.visual, e.instruction),
                                    opts.graph, rng, train));
    gate_rows.push_back(fw.back().gates);
  }
  const Var target = tape.constant(stack_actions(data, idx), "actions");
  std::vector<Var> sem, act;
  std::optional<Var> previous;
  for (std::size_t l = 0; l < L; ++l) {
    std::vector<Var> caps, acts;
    Matrix tea_s(B, cache.capsules[idx[0]].cols());
    Matrix tea_a(B, kActionDim);
    for (Index b = 0; b < B; ++b) {
      const std::size_t i = idx[static_cast<std::size_t>(b)];
      caps.push_back(fw[static_cast<std::size_t>(b)].capsules[l]);
      acts.push_back(fw[static_cast<std::size_t>(b)].actions[l]);
      tea_s.row(b) = cache.capsules[i].row(static_cast<Index>(l));
      tea_a.row(b) = cache.actions[i].row(static_cast<Index>(l));
    }
    const Var s_stu = ops::concat_rows(caps);
    const Var a_stu = ops::concat_rows(acts);
    if (opts.weights.use_semantic) {
      sem.push_back(semantic_loss(s_stu, tape.constant(std::move(tea_s), "teacher_capsules"),
                                  opts.weights.eta));
    }
    if (opts.weights.use_action) {
      act.push_back(action_loss(a_stu, target, tape.constant(std::move(tea_a), "teacher_actions"),
                                previous, opts.stop_gradient));
    }
    previous = a_stu;
  }
  Stage2Batch out{.loss = {}, .gates = ops::concat_rows(gate_rows)};
  out.loss = total_loss(sem, act, out.gates, opts.weights);
  return out;
}

LossReport stage2_step(StudentModel& student, OptimizerState& state, const TeacherCache& cache,
                       const Dataset& data, std::span<const std::size_t> idx,
                       const Stage2Options& opts, double lr, Rng& rng, std::size_t batch_id) {
  std::vector<Tensor*> params = student.trainable();
  std::vector<Matrix> saved;
  saved.reserve(params.size());
  for (const Tensor* t : params) saved.push_back(t->values());
  const OptimizerState saved_state = state;
  auto rollback = [&](const std::string& why) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->values() = saved[i];
    state = saved_state;
    zero_grads(params);
    throw NumericalError("stage2: batch " + std::to_string(batch_id) + " rolled back: " + why);
  };
  LossReport report;
  try {
    Tape tape;
    Stage2Batch batch = stage2_objective(tape, student, cache, data, idx, opts, &rng, true);
    report = batch.loss.report;
    if (!std::isfinite(report.total)) rollback("non-finite loss");
    zero_grads(params);
    tape.backward(batch.loss.total);
    report.grad_norm = clip_grad_norm(params, opts.schedule.clip);
    if (!std::isfinite(report.grad_norm)) rollback("non-finite gradient");
    adamw_step(state, params, lr);
  } catch (const NumericalError& e) {
    if (std::string_view(e.what()).find("rolled back") != std::string_view::npos) throw;
    rollback(e.what());
  }
  for (const Tensor* t : params) {
    if (!t->all_finite()) rollback("non-finite parameter after update");
  }
  return report;
}

Stage2Result stage2_train(const Backbone& teacher, const TeacherProbe& probe, const Dataset& data,
                          const TeacherCache& cache, const Stage2Options& opts) {
  opts.schedule.validate();
  opts.weights.validate();
  const std::uint64_t teacher_hash = teacher.parameter_hash();
  const std::uint64_t probe_hash = probe.parameter_hash();
  if (cache.probe_hash != probe_hash || cache.dataset_hash != data.content_hash()) {
    throw IntegrityError(IntegrityCode::kHashMismatch, "teacher cache does not match probe or dataset");
  }
  auto check_frozen = [&] {
    if (teacher.parameter_hash() != teacher_hash || probe.parameter_hash() != probe_hash) {
      throw IntegrityError(IntegrityCode::kFrozenViolation, "teacher or probe changed during stage II");
    }
  };

  Stage2Result result;
  result.student = derive_student(teacher, probe, opts.router_bias_init);
  result.student.set_requires_grad(true);
  std::vector<Tensor*> params = result.student.trainable();
  OptimizerState state(params, {.weight_decay = opts.schedule.weight_decay});
  Rng rng(mix_seed(opts.schedule.seed, 0x52));
  const std::size_t total = opts.schedule.total_steps(data.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < opts.schedule.epochs; ++epoch) {
    check_frozen();
    const auto order = epoch_order(data.size(), opts.schedule.seed, epoch);
    for (std::size_t start = 0; start < order.size(); start += opts.schedule.batch, ++step) {
      const std::size_t end = std::min(order.size(), start + opts.schedule.batch);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      LossReport report;
      try {
        report = stage2_step(result.student, state, cache, data, idx, opts,
                             lr_at(step, opts.schedule, total), rng, step);
      } catch (const NumericalError&) {
        ++result.rolled_back;
        continue;
      }
      for (std::size_t l = 0; l < report.lambda.size(); ++l) {
        result.rows.push_back({step, l + 1, report.sem[l], report.act[l], report.lambda[l], report.lb,
                               report.total});
      }
      result.mean_gates.push_back(report.gate_mean);
      result.reports.push_back(std::move(report));
    }
  }
  check_frozen();
  result.student.set_requires_grad(false);
  for (Tensor* t : params) t->clear_grad();
  return result;
}

// ---- checkpoints ----

namespace {

template <typename Model>
Checkpoint to_checkpoint(const Model& model, std::map<std::string, std::string> manifest) {
  Checkpoint ck;
  ck.manifest = std::move(manifest);
  model.visit(ConstParamVisitor([&](const std::string& name, const Tensor& t) {
    ck.add(name, Tensor(t.shape(), t.values()));
  }));
  return ck;
}

template <typename Model>
void fill_from(Model& model, const Checkpoint& ck, const std::filesystem::path& path) {
  std::set<std::string> used;
  model.visit(ParamVisitor([&](const std::string& name, Tensor& t) {
    try {
      t.values() = ck.get(name, t.shape()).values();
    } catch (const ContractError& e) {
      throw ContractError(path.string() + ": " + e.what());
    }
    used.insert(name);
  }));
  for (const NamedTensor& nt : ck.tensors) {
    if (!used.count(nt.name)) {
      throw ContractError(path.string() + ": unexpected tensor " + nt.name +
                          " (checkpoint does not match the configured model)");
    }
  }
}

std::string calibration_flags(const std::vector<CapsuleParams>& graphs) {
  std::string s;
  for (const auto& g : graphs) s.push_back(g.calibrated ? '1' : '0');
  return s;
}

void apply_calibration_flags(std::vector<CapsuleParams>& graphs, const std::string& flags) {
  if (flags.size() != graphs.size()) {
    throw ContractError("checkpoint: calibration flags for " + std::to_string(flags.size()) +
                        " layers, model has " + std::to_string(graphs.size()));
  }
  for (std::size_t l = 0; l < graphs.size(); ++l) graphs[l].calibrated = flags[l] == '1';
}

std::map<std::string, std::string> with_kind(const RunManifest& run, const std::string& kind) {
  auto m = run.to_map();
  m["kind"] = kind;
  return m;
}

Checkpoint read_kind(const std::filesystem::path& path, const std::string& kind, RunManifest* run) {
  Checkpoint ck = read_checkpoint(path);
  if (ck.manifest_value("kind") != kind) {
    throw IntegrityError(IntegrityCode::kMalformed,
                         path.string() + " holds a " + ck.manifest_value("kind") + ", expected " + kind);
  }
  if (run) *run = RunManifest::from_map(ck.manifest);
  return ck;
}

}  // namespace

void save_backbone(const Backbone& model, const RunManifest& run, const std::filesystem::path& path) {
  write_checkpoint(to_checkpoint(model, with_kind(run, "backbone")), path);
}

Backbone load_backbone(const std::filesystem::path& path, const BackboneConfig& cfg, RunManifest* run) {
  const Checkpoint ck = read_kind(path, "backbone", run);
  Backbone model = Backbone::init(cfg);
  fill_from(model, ck, path);
  return model;
}

void save_probe(const TeacherProbe& probe, const RunManifest& run, const std::filesystem::path& path) {
  auto m = with_kind(run, "probe");
  m["calibrated"] = calibration_flags(probe.graphs);
  write_checkpoint(to_checkpoint(probe, std::move(m)), path);
}

TeacherProbe load_probe(const std::filesystem::path& path, const BackboneConfig& cfg,
                        const GraphOptions& opts, RunManifest* run) {
  const Checkpoint ck = read_kind(path, "probe", run);
  TeacherProbe probe = TeacherProbe::init(cfg, opts, 0);
  fill_from(probe, ck, path);
  apply_calibration_flags(probe.graphs, ck.manifest_value("calibrated"));
  return probe;
}

void save_student(const StudentModel& student, const RunManifest& run,
                  const std::filesystem::path& path) {
  auto m = with_kind(run, "student");
  m["calibrated"] = calibration_flags(student.graphs);
  write_checkpoint(to_checkpoint(student, std::move(m)), path);
}

StudentModel load_student(const std::filesystem::path& path, const BackboneConfig& cfg,
                          const GraphOptions& opts, RunManifest* run) {
  const Checkpoint ck = read_kind(path, "student", run);
  StudentModel student = derive_student(Backbone::init(cfg), TeacherProbe::init(cfg, opts, 0), 0.0);
  fill_from(student, ck, path);
  apply_calibration_flags(student.graphs, ck.manifest_value("calibrated"));
  return student;
}

}  // namespace actdistill
