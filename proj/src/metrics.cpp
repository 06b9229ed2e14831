#include "actdistill/metrics.hpp"

#include "actdistill/error.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace actdistill {

bool action_success(const ActionVector& pred, const ActionVector& a, double threshold) {
  return (pred - a).cwiseAbs().maxCoeff() < threshold;
}

namespace {

using Clock = std::chrono::steady_clock;

struct Accumulator {
  std::size_t n = 0, hits = 0, executed = 0;
  double sq = 0.0, routed = 0.0, dense = 0.0, layer_routed = 0.0, layer_dense = 0.0;

  void add(const ActionVector& pred, const ActionVector& a, double threshold,
           const FlopsModel& fm, const std::vector<bool>& mask) {
    ++n;
    hits += action_success(pred, a, threshold) ? 1 : 0;
    sq += (pred - a).squaredNorm();
    executed += static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
    routed += fm.routed(mask);
    dense += fm.dense();
    layer_routed += fm.routed(mask) - fm.fixed;
    layer_dense += fm.backbone_dense();
  }

  EvalReport report(double tau, double seconds) const {
    EvalReport r;
    r.tau = tau;
    r.episodes = n;
    const double dn = static_cast<double>(n);
    r.success = static_cast<double>(hits) / dn;
    r.action_mse = sq / dn;
    r.executed_total = executed;
    r.mean_executed = static_cast<double>(executed) / dn;
    r.flops_ratio = routed / dense;
    r.backbone_ratio = layer_routed / layer_dense;
    r.speedup = dense / routed;
    r.wall_ms_per_episode = 1e3 * seconds / dn;
    return r;
  }
};

FlopsModel flops_for(const BackboneConfig& cfg, const Dataset& data) {
  return FlopsModel::from_config(cfg, data.config.n_tokens);
}

void require_data(const Dataset& data) {
  if (data.size() == 0) throw ContractError("evaluation needs at least one episode");
}

}  // namespace

EvalReport evaluate(const StudentModel& student, const Dataset& data, double tau,
                    double success_threshold, std::vector<GateRow>* gates) {
  require_data(data);
  const FlopsModel fm = flops_for(student.backbone.config, data);
  Accumulator acc;
  const auto t0 = Clock::now();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Episode& e = data.episodes[i];
    const RoutedOutput out = hard_routed_forward(student, e, tau);
    acc.add(predict_action(student, out.z), e.action, success_threshold, fm, out.executed);
    if (gates) {
      for (std::size_t l = 0; l < out.trace.size(); ++l) {
        gates->push_back({i, l + 1, out.trace[l].gate, out.trace[l].executed});
      }
    }
  }
  return acc.report(tau, std::chrono::duration<double>(Clock::now() - t0).count());
}

EvalReport evaluate_dense(const Backbone& model, const Dataset& data, double success_threshold) {
  require_data(data);
  const FlopsModel fm = flops_for(model.config, data);
  const std::vector<bool> all(model.layers.size(), true);
  Accumulator acc;
  const auto t0 = Clock::now();
  for (const Episode& e : data.episodes) {
    acc.add(predict_native(model, e), e.action, success_threshold, fm, all);
  }
  return acc.report(0.0, std::chrono::duration<double>(Clock::now() - t0).count());
}

std::vector<EvalReport> sweep_tau(const StudentModel& student, const Dataset& data,
                                  const std::vector<double>& taus, double success_threshold) {
  std::vector<EvalReport> out;
  for (double tau : taus) out.push_back(evaluate(student, data, tau, success_threshold));
  return out;
}

std::vector<bool> skip_lowest(const RowVector& g, std::size_t n) {
  const std::size_t L = static_cast<std::size_t>(g.size());
  if (n >= L) {
    throw ContractError("sweep_skip: n=" + std::to_string(n) + " must be < L=" + std::to_string(L));
  }
  std::vector<std::size_t> order(L);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return g(static_cast<Index>(a)) < g(static_cast<Index>(b));
  });
  std::vector<bool> mask(L, true);
  for (std::size_t i = 0; i < n; ++i) mask[order[i]] = false;
  return mask;
}

std::vector<SkipRow> sweep_skip(const StudentModel& student, const Dataset& data,
                                const std::vector<std::size_t>& ns, double success_threshold) {
  require_data(data);
  for (std::size_t n : ns) {
    if (n >= student.layers()) {
      throw ContractError("sweep_skip: n=" + std::to_string(n) + " must be < L=" +
                          std::to_string(student.layers()));
    }
  }
  const FlopsModel fm = flops_for(student.backbone.config, data);
  std::vector<SkipRow> out;
  for (std::size_t n : ns) {
    Accumulator acc;
    for (const Episode& e : data.episodes) {
      const auto mask = skip_lowest(gate_values(student, e), n);
      const RoutedOutput r = routed_forward(student, e, mask);
      acc.add(predict_action(student, r.z), e.action, success_threshold, fm, mask);
    }
    const EvalReport rep = acc.report(0.0, 0.0);
    out.push_back({n, rep.success, rep.flops_ratio, rep.mean_executed});
  }
  return out;
}

std::vector<double> activation_histogram(const StudentModel& student, const Dataset& data, double tau) {
  require_data(data);
  std::vector<double> freq(student.layers(), 0.0);
  for (const Episode& e : data.episodes) {
    const GateVector gv = GateVector::threshold(gate_values(student, e), tau);
    for (std::size_t l = 0; l < freq.size(); ++l) freq[l] += gv.mask[l] ? 1.0 : 0.0;
  }
  for (double& f : freq) f /= static_cast<double>(data.size());
  return freq;
}

std::string format_g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

CsvWriter::CsvWriter(std::vector<std::string> header) : columns_(header.size()) {
  for (std::size_t i = 0; i < header.size(); ++i) text_ += (i ? "," : "") + header[i];
  text_ += '\n';
  filled_ = columns_;
}

CsvWriter& CsvWriter::row() {
  if (filled_ != columns_) throw ContractError("csv: previous row has " + std::to_string(filled_) + " cells");
  filled_ = 0;
  return *this;
}

CsvWriter& CsvWriter::add(const std::string& v) {
  if (filled_ == columns_) throw ContractError("csv: row already complete");
  text_ += v;
  text_ += ++filled_ == columns_ ? '\n' : ',';
  return *this;
}

CsvWriter& CsvWriter::add(double v) { return add(format_g6(v)); }
CsvWriter& CsvWriter::add(std::size_t v) { return add(std::to_string(v)); }

std::string CsvWriter::str() const {
  if (filled_ != columns_) throw ContractError("csv: incomplete last row");
  return text_;
}

void CsvWriter::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ContractError("cannot open " + path.string() + " for writing");
  out << str();
}

}  // namespace actdistill
