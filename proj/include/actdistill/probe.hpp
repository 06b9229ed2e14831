#pragma once

#include "actdistill/graph.hpp"
#include "actdistill/schedule.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace actdistill {

/// Per-layer graph encoders and auxiliary action heads trained on the frozen
/// teacher's hidden states. Training-only: routed inference never reads it.
struct TeacherProbe {
  std::vector<CapsuleParams> graphs;
  std::vector<ActionHead> heads;

  static TeacherProbe init(const BackboneConfig& cfg, const GraphOptions& opts, std::uint64_t seed);

  std::size_t layers() const noexcept { return graphs.size(); }
  void visit(const ParamVisitor& f);
  void visit(const ConstParamVisitor& f) const;
  /// Trainable tensors (standardization statistics excluded).
  std::vector<Tensor*> trainable();
  void set_requires_grad(bool on);
  std::uint64_t parameter_hash() const;
};

/// Per-sample teacher hidden states h_1..h_L on a shared tape.
std::vector<Var> teacher_hidden(Tape& tape, const Backbone& teacher, const Episode& e);

/// Sets each layer's standardization from projected capsules of the first
/// `max_episodes` episodes (eval mode), then freezes it. Dimensions without
/// spread (including any single-episode calibration) keep unit variance.
void calibrate(std::span<CapsuleParams> graphs, const Backbone& source, const Dataset& data,
               const GraphOptions& opts, std::size_t max_episodes);

struct AuxLoss {
  Var total;                     // sum over layers
  std::vector<Var> per_layer;    // batch-mean squared error per layer
  std::vector<Var> predictions;  // per layer [B, 7]
  std::vector<Var> capsules;     // per layer [B, d_c]
};

/// sum_l mean_b ||H_l(s_l) - a_b||^2 over a batch of hidden states.
AuxLoss aux_loss(const TeacherProbe& probe, std::span<const std::vector<Var>> hidden,
                 const Matrix& actions, const GraphOptions& opts, Rng* rng, bool train);

struct Stage1Row {
  std::size_t step;
  std::size_t layer;  // 1-based
  double aux_mse;
};

struct Stage1Result {
  TeacherProbe probe;
  std::vector<Stage1Row> rows;
};

/// Trains graph encoders and aux heads with the teacher frozen. Aborts with
/// IntegrityError(kFrozenViolation) if the teacher's parameters change.
Stage1Result stage1_train(const Backbone& teacher, const Dataset& data,
                          const TrainSchedule& schedule, const GraphOptions& opts,
                          std::size_t calib_episodes);

/// Per-layer mean squared aux error over a dataset (eval mode).
std::vector<double> probe_layer_mse(const TeacherProbe& probe, const Backbone& teacher,
                                    const Dataset& data, const GraphOptions& opts);

/// Precomputed teacher supervision: per episode, [L, d_c] capsules and [L, 7]
/// aux predictions.
struct TeacherCache {
  std::vector<Matrix> capsules;
  std::vector<Matrix> actions;
  std::uint64_t probe_hash = 0;
  std::uint64_t dataset_hash = 0;

  std::size_t entries() const noexcept;
  std::uint64_t content_hash() const;
};

TeacherCache export_teacher_capsules(const TeacherProbe& probe, const Backbone& teacher,
                                     const Dataset& data, const GraphOptions& opts);

void save_teacher_cache(const TeacherCache& cache, const std::filesystem::path& path);
/// Throws IntegrityError(kHashMismatch) if the cache was built from a
/// different probe or dataset.
TeacherCache load_teacher_cache(const std::filesystem::path& path, std::uint64_t probe_hash,
                                std::uint64_t dataset_hash);

}  // namespace actdistill
