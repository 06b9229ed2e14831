#pragma once

#include "actdistill/losses.hpp"
#include "actdistill/optim.hpp"
#include "actdistill/student.hpp"

#include <filesystem>
#include <map>
#include <string>

namespace actdistill {

/// Run metadata stamped into every checkpoint.
struct RunManifest {
  std::string stage;
  std::uint64_t config_hash = 0;
  std::uint64_t dataset_hash = 0;
  std::uint64_t teacher_hash = 0;
  std::uint64_t probe_hash = 0;
  std::string version = "1";

  std::map<std::string, std::string> to_map() const;
  static RunManifest from_map(const std::map<std::string, std::string>& m);
};

// ---- teacher ----

struct TeacherRow {
  std::size_t step;
  double loss;
};

struct TeacherResult {
  Backbone model;
  std::vector<TeacherRow> rows;
};

/// Fits backbone and native head to the dataset actions, minimizing the batch
/// mean of ||H(h_L) - a||^2. Non-finite loss aborts with the step index.
TeacherResult train_teacher(const BackboneConfig& cfg, const Dataset& data,
                            const TrainSchedule& schedule);

/// Mean squared action error of the native head over a dataset.
double teacher_mse(const Backbone& model, const Dataset& data);

// ---- stage II ----

struct Stage2Options {
  LossWeights weights;
  GraphOptions graph;
  TrainSchedule schedule;
  double router_bias_init = -1.0;
  bool stop_gradient = true;
};

/// Batch objective on one tape; `total` is ready for backward().
struct Stage2Batch {
  TotalLoss loss;
  Var gates;  // [B, L]
};

Stage2Batch stage2_objective(Tape& tape, const StudentModel& student, const TeacherCache& cache,
                             const Dataset& data, std::span<const std::size_t> idx,
                             const Stage2Options& opts, Rng* rng, bool train);

/// One optimizer step on the student's trainable set. On a non-finite loss or
/// gradient the parameters and optimizer state are restored and NumericalError
/// names the batch.
LossReport stage2_step(StudentModel& student, OptimizerState& state, const TeacherCache& cache,
                       const Dataset& data, std::span<const std::size_t> idx,
                       const Stage2Options& opts, double lr, Rng& rng, std::size_t batch_id);

struct Stage2Row {
  std::size_t step;
  std::size_t layer;  // 1-based
  double sem, act, lambda, lb, total;
};

struct Stage2Result {
  StudentModel student;
  std::vector<Stage2Row> rows;
  std::vector<LossReport> reports;
  std::vector<RowVector> mean_gates;  // per step, batch-mean gates
  std::size_t rolled_back = 0;
};

/// Derives the student from the frozen teacher and probe and trains it.
/// Teacher and probe hashes are checked around every epoch.
Stage2Result stage2_train(const Backbone& teacher, const TeacherProbe& probe, const Dataset& data,
                          const TeacherCache& cache, const Stage2Options& opts);

// ---- checkpoints ----

void save_backbone(const Backbone& model, const RunManifest& run, const std::filesystem::path& path);
Backbone load_backbone(const std::filesystem::path& path, const BackboneConfig& cfg,
                       RunManifest* run = nullptr);

void save_probe(const TeacherProbe& probe, const RunManifest& run, const std::filesystem::path& path);
TeacherProbe load_probe(const std::filesystem::path& path, const BackboneConfig& cfg,
                        const GraphOptions& opts, RunManifest* run = nullptr);

void save_student(const StudentModel& student, const RunManifest& run,
                  const std::filesystem::path& path);
StudentModel load_student(const std::filesystem::path& path, const BackboneConfig& cfg,
                          const GraphOptions& opts, RunManifest* run = nullptr);

}  // namespace actdistill
