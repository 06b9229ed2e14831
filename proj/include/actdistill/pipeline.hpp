#pragma once

#include "actdistill/config.hpp"
#include "actdistill/metrics.hpp"

#include <filesystem>
#include <ostream>
#include <string>

namespace actdistill {

struct DataSplits {
  Dataset train;
  Dataset test;  // episodes n_train .. n_train + n_test - 1 of the same generator
};

DataSplits make_splits(const Config& cfg);

/// Artifact file names inside an output directory.
struct ArtifactPaths {
  std::filesystem::path dir;

  std::filesystem::path train_data() const { return dir / "train.actd"; }
  std::filesystem::path test_data() const { return dir / "test.actd"; }
  std::filesystem::path teacher() const { return dir / "teacher.actd"; }
  std::filesystem::path probe() const { return dir / "probe.actd"; }
  std::filesystem::path cache() const { return dir / "teacher_cache.actd"; }
  std::filesystem::path student() const { return dir / "student.actd"; }
};

struct RunOutcome {
  DataSplits data;
  Backbone teacher;
  TeacherProbe probe;
  StudentModel student;
  std::vector<TeacherRow> teacher_rows;
  std::vector<Stage1Row> stage1_rows;
  Stage2Result stage2;
  double teacher_test_mse = 0.0;
  std::vector<double> probe_test_mse;  // per layer
  EvalReport teacher_eval;             // teacher native head
  EvalReport dense;                    // student, tau = 0
  EvalReport routed;                   // student, configured tau
};

/// Teacher -> stage I -> stage II -> evaluation, all in memory. Progress lines
/// go to `log` when given.
RunOutcome run_pipeline(const Config& cfg, std::ostream* log = nullptr);

/// Stage I and II plus evaluation on an already trained teacher.
RunOutcome run_from_teacher(const Config& cfg, DataSplits data, Backbone teacher,
                            std::ostream* log = nullptr);

struct AblationRow {
  std::string variant;
  EvalReport dense;
  EvalReport routed;
};

/// Axes: "graph" (gat, mlp), "loss-terms" (full and each term disabled),
/// "k" (2, 4, 8 capped at the token count), "alpha-beta" (1:1, 1:2, 2:1, 1:0.5).
std::vector<std::pair<std::string, Config>> ablation_variants(const Config& base, const std::string& axis);

/// Trains the teacher once and every variant on top of it.
std::vector<AblationRow> run_ablation(const Config& base, const std::string& axis,
                                      std::ostream* log = nullptr);

}  // namespace actdistill
