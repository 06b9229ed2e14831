#pragma once

#include "actdistill/flops.hpp"
#include "actdistill/student.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace actdistill {

/// ||pred - a||_inf < threshold.
bool action_success(const ActionVector& pred, const ActionVector& a, double threshold);

struct GateRow {
  std::size_t episode;
  std::size_t layer;  // 1-based
  double g;
  bool executed;
};

struct EvalReport {
  double tau = 0.0;
  std::size_t episodes = 0;
  double success = 0.0;
  double action_mse = 0.0;
  double mean_executed = 0.0;
  std::size_t executed_total = 0;
  double flops_ratio = 1.0;
  double backbone_ratio = 1.0;
  double speedup = 1.0;  // dense / routed FLOPs
  double wall_ms_per_episode = 0.0;
};

/// Hard-routed evaluation at threshold tau. Optionally records gate traces.
EvalReport evaluate(const StudentModel& student, const Dataset& data, double tau,
                    double success_threshold, std::vector<GateRow>* gates = nullptr);

/// Native-head evaluation of a backbone (all layers executed).
EvalReport evaluate_dense(const Backbone& model, const Dataset& data, double success_threshold);

std::vector<EvalReport> sweep_tau(const StudentModel& student, const Dataset& data,
                                  const std::vector<double>& taus, double success_threshold);

struct SkipRow {
  std::size_t n;
  double success;
  double flops_ratio;
  double mean_executed;
};

/// Mask that drops the n layers with the lowest gates (ties: later layer first
/// kept, i.e. lower index skipped first). n must be < L.
std::vector<bool> skip_lowest(const RowVector& g, std::size_t n);

std::vector<SkipRow> sweep_skip(const StudentModel& student, const Dataset& data,
                                const std::vector<std::size_t>& ns, double success_threshold);

/// Per-layer fraction of episodes in which the layer executed at tau.
std::vector<double> activation_histogram(const StudentModel& student, const Dataset& data, double tau);

/// Fixed-format CSV: floats with 6 significant digits, '\n' line endings.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);
  CsvWriter& row();
  CsvWriter& add(double v);
  CsvWriter& add(std::size_t v);
  CsvWriter& add(const std::string& v);
  std::string str() const;
  void write(const std::filesystem::path& path) const;

 private:
  std::size_t columns_;
  std::string text_;
  std::size_t filled_ = 0;
};

std::string format_g6(double v);

}  // namespace actdistill
