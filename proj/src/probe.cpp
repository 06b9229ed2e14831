#include "actdistill/probe.hpp"

#include "actdistill/checkpoint.hpp"
#include "actdistill/error.hpp"
#include "actdistill/hash.hpp"
#include "actdistill/optim.hpp"

#include <cmath>
#include <string>

namespace actdistill {

TeacherProbe TeacherProbe::init(const BackboneConfig& cfg, const GraphOptions& opts,
                                std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x9E));
  TeacherProbe p;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    p.graphs.push_back(CapsuleParams::init(cfg.width, opts.affinity_dim, cfg.capsule_dim, rng));
    p.heads.push_back(ActionHead::init(cfg.capsule_dim, cfg.width, rng));
  }
  return p;
}

void TeacherProbe::visit(const ParamVisitor& f) {
  for (std::size_t l = 0; l < graphs.size(); ++l) {
    const std::string base = "probe/layer" + std::to_string(l) + "/";
    graphs[l].visit(base, f);
    heads[l].visit(base + "head/", f);
  }
}

void TeacherProbe::visit(const ConstParamVisitor& f) const {
  for (std::size_t l = 0; l < graphs.size(); ++l) {
    const std::string base = "probe/layer" + std::to_string(l) + "/";
    graphs[l].visit(base, f);
    heads[l].visit(base + "head/", f);
  }
}

std::vector<Tensor*> TeacherProbe::trainable() {
  std::vector<Tensor*> out;
  for (std::size_t l = 0; l < graphs.size(); ++l) {
    CapsuleParams& g = graphs[l];
    for (Tensor* t : {&g.phi, &g.psi, &g.w1, &g.w2, &g.wp, &g.proj}) out.push_back(t);
    ActionHead& h = heads[l];
    for (Tensor* t : {&h.w1, &h.b1, &h.w2, &h.b2}) out.push_back(t);
  }
  return out;
}

void TeacherProbe::set_requires_grad(bool on) {
  for (Tensor* t : trainable()) t->set_requires_grad(on);
}

std::uint64_t TeacherProbe::parameter_hash() const {
  Fnv1a h;
  visit([&](const std::string& name, const Tensor& t) {
    h.update(name);
    h.update_value(t.content_hash());
  });
  for (const auto& g : graphs) h.update_value(static_cast<std::uint8_t>(g.calibrated));
  return h.digest();
}

std::vector<Var> teacher_hidden(Tape& tape, const Backbone& teacher, const Episode& e) {
  return forward_all_layers(teacher, encode(tape, teacher, e.visual, e.instruction));
}

void calibrate(std::span<CapsuleParams> graphs, const Backbone& source, const Dataset& data,
               const GraphOptions& opts, std::size_t max_episodes) {
  const std::size_t n = std::min(max_episodes, data.size());
  if (n == 0) throw ContractError("calibrate: no episodes");
  const std::size_t layers = graphs.size();
  std::vector<Matrix> samples(layers);
  for (std::size_t i = 0; i < n; ++i) {
    Tape tape(GradMode::kInference);
    const auto hidden = teacher_hidden(tape, source, data.episodes[i]);
    for (std::size_t l = 0; l < layers; ++l) {
      const Matrix c = raw_capsule(hidden[l], graphs[l], opts, nullptr, false).value();
      if (samples[l].size() == 0) samples[l].resize(static_cast<Index>(n), c.cols());
      samples[l].row(static_cast<Index>(i)) = c.row(0);
    }
  }
  for (std::size_t l = 0; l < layers; ++l) {
    const RowVector mean = samples[l].colwise().mean();
    RowVector var = (samples[l].rowwise() - mean).array().square().colwise().mean();
    // One sample (or a constant dimension) has no spread to scale by: center only.
    if (n < 2) var.setOnes();
    var = (var.array() > 0.0).select(var, 1.0);
    graphs[l].std_mean.values() = mean;
    graphs[l].std_var.values() = var;
    graphs[l].calibrated = true;
  }
}

AuxLoss aux_loss(const TeacherProbe& probe, std::span<const std::vector<Var>> hidden,
                 const Matrix& actions, const GraphOptions& opts, Rng* rng, bool train) {
  if (hidden.empty()) throw ContractError("aux_loss: empty batch");
  if (actions.rows() != static_cast<Index>(hidden.size()) || actions.cols() != kActionDim) {
    throw ContractError("aux_loss: actions must be [B, 7]");
  }
  Tape& tape = hidden.front().front().tape();
  const Var target = tape.constant(actions, "actions");
  AuxLoss out;
  for (std::size_t l = 0; l < probe.layers(); ++l) {
    std::vector<Var> caps, preds;
    for (const auto& h : hidden) {
      if (h.size() != probe.layers()) throw ContractError("aux_loss: hidden state count != L");
      const Var s = encapsulate(h[l], probe.graphs[l], opts, rng, train).capsule;
      caps.push_back(s);
      preds.push_back(apply_head(probe.heads[l], s, opts.dropout, rng, train));
    }
    const Var pred = ops::concat_rows(preds);
    out.capsules.push_back(ops::concat_rows(caps));
    out.predictions.push_back(pred);
    out.per_layer.push_back(ops::mean_all(ops::squared_norm_rows(ops::sub(pred, target))));
  }
  // mean_all over a [B,1] column is the batch mean of per-sample sums of squares.
  out.total = out.per_layer.front();
  for (std::size_t l = 1; l < out.per_layer.size(); ++l) out.total = ops::add(out.total, out.per_layer[l]);
  return out;
}

namespace {

Matrix stack_actions(const Dataset& data, std::span<const std::size_t> idx) {
  Matrix a(static_cast<Index>(idx.size()), kActionDim);
  for (std::size_t b = 0; b < idx.size(); ++b) a.row(static_cast<Index>(b)) = data.episodes[idx[b]].action;
  return a;
}

}  // namespace

Stage1Result stage1_train(const Backbone& teacher, const Dataset& data,
                          const TrainSchedule& schedule, const GraphOptions& opts,
                          std::size_t calib_episodes) {
  schedule.validate();
  const std::uint64_t teacher_hash = teacher.parameter_hash();
  auto check_teacher = [&] {
    if (teacher.parameter_hash() != teacher_hash) {
      throw IntegrityError(IntegrityCode::kFrozenViolation, "teacher parameters changed during stage I");
    }
  };

  Stage1Result result;
  result.probe = TeacherProbe::init(teacher.config, opts, schedule.seed);
  calibrate(result.probe.graphs, teacher, data, opts, calib_episodes);
  result.probe.set_requires_grad(true);

  std::vector<Tensor*> params = result.probe.trainable();
  OptimizerState state(params, {.weight_decay = schedule.weight_decay});
  Rng dropout_rng(mix_seed(schedule.seed, 0xD1));
  const std::size_t total = schedule.total_steps(data.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    check_teacher();
    const auto order = epoch_order(data.size(), schedule.seed, epoch);
    for (std::size_t start = 0; start < order.size(); start += schedule.batch, ++step) {
      const std::size_t end = std::min(order.size(), start + schedule.batch);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      Tape tape;
      std::vector<std::vector<Var>> hidden;
      for (std::size_t i : idx) hidden.push_back(teacher_hidden(tape, teacher, data.episodes[i]));
      const AuxLoss loss =
          aux_loss(result.probe, hidden, stack_actions(data, idx), opts, &dropout_rng, true);
      if (!std::isfinite(loss.total.item())) {
        throw NumericalError("stage1: non-finite loss at step " + std::to_string(step));
      }
      zero_grads(params);
      tape.backward(loss.total);
      clip_grad_norm(params, schedule.clip);
      adamw_step(state, params, lr_at(step, schedule, total));
      for (std::size_t l = 0; l < loss.per_layer.size(); ++l) {
        result.rows.push_back({step, l + 1, loss.per_layer[l].item()});
      }
    }
  }
  check_teacher();
  result.probe.set_requires_grad(false);
  return result;
}

std::vector<double> probe_layer_mse(const TeacherProbe& probe, const Backbone& teacher,
                                    const Dataset& data, const GraphOptions& opts) {
  std::vector<double> mse(probe.layers(), 0.0);
  for (const Episode& e : data.episodes) {
    Tape tape(GradMode::kInference);
    const auto hidden = teacher_hidden(tape, teacher, e);
    for (std::size_t l = 0; l < probe.layers(); ++l) {
      const Var s = encapsulate(hidden[l], probe.graphs[l], opts, nullptr, false).capsule;
      const Matrix pred = apply_head(probe.heads[l], s).value();
      mse[l] += (pred.row(0) - e.action).squaredNorm();
    }
  }
  for (double& m : mse) m /= static_cast<double>(data.size());
  return mse;
}

std::size_t TeacherCache::entries() const noexcept {
  std::size_t n = 0;
  for (const Matrix& c : capsules) n += static_cast<std::size_t>(c.rows());
  return n;
}

std::uint64_t TeacherCache::content_hash() const {
  Fnv1a h;
  for (std::size_t i = 0; i < capsules.size(); ++i) {
    h.update(capsules[i].data(), sizeof(double) * static_cast<std::size_t>(capsules[i].size()));
    h.update(actions[i].data(), sizeof(double) * static_cast<std::size_t>(actions[i].size()));
  }
  return h.digest();
}

TeacherCache export_teacher_capsules(const TeacherProbe& probe, const Backbone& teacher,
                                     const Dataset& data, const GraphOptions& opts) {
  TeacherCache cache;
  cache.probe_hash = probe.parameter_hash();
  cache.dataset_hash = data.content_hash();
  const Index layers = static_cast<Index>(probe.layers());
  for (const Episode& e : data.episodes) {
    Tape tape(GradMode::kInference);
    const auto hidden = teacher_hidden(tape, teacher, e);
    Matrix caps(layers, static_cast<Index>(teacher.config.capsule_dim));
    Matrix acts(layers, kActionDim);
    for (Index l = 0; l < layers; ++l) {
      const auto lu = static_cast<std::size_t>(l);
      const Var s = encapsulate(hidden[lu], probe.graphs[lu], opts, nullptr, false).capsule;
      caps.row(l) = s.value().row(0);
      acts.row(l) = apply_head(probe.heads[lu], s).value().row(0);
    }
    cache.capsules.push_back(std::move(caps));
    cache.actions.push_back(std::move(acts));
  }
  return cache;
}

void save_teacher_cache(const TeacherCache& cache, const std::filesystem::path& path) {
  Checkpoint ck;
  ck.manifest = {{"kind", "teacher_cache"},
                 {"count", std::to_string(cache.capsules.size())},
                 {"probe_hash", hex_digest(cache.probe_hash)},
                 {"dataset_hash", hex_digest(cache.dataset_hash)},
                 {"content_hash", hex_digest(cache.content_hash())}};
  for (std::size_t i = 0; i < cache.capsules.size(); ++i) {
    ck.add("cache/" + std::to_string(i) + "/s", Tensor::from_matrix(cache.capsules[i]));
    ck.add("cache/" + std::to_string(i) + "/a", Tensor::from_matrix(cache.actions[i]));
  }
  write_checkpoint(ck, path);
}

TeacherCache load_teacher_cache(const std::filesystem::path& path, std::uint64_t probe_hash,
                                std::uint64_t dataset_hash) {
  const Checkpoint ck = read_checkpoint(path);
  if (ck.manifest_value("probe_hash") != hex_digest(probe_hash) ||
      ck.manifest_value("dataset_hash") != hex_digest(dataset_hash)) {
    throw IntegrityError(IntegrityCode::kHashMismatch,
                         path.string() + " was built from a different probe or dataset");
  }
  TeacherCache cache;
  cache.probe_hash = probe_hash;
  cache.dataset_hash = dataset_hash;
  const std::size_t count = std::stoull(ck.manifest_value("count"));
  for (std::size_t i = 0; i < count; ++i) {
    cache.capsules.push_back(ck.get("cache/" + std::to_string(i) + "/s").values());
    cache.actions.push_back(ck.get("cache/" + std::to_string(i) + "/a").values());
  }
  if (hex_digest(cache.content_hash()) != ck.manifest_value("content_hash")) {
    throw IntegrityError(IntegrityCode::kHashMismatch, path.string() + ": cache content hash");
  }
  return cache;
}

}  // namespace actdistill
