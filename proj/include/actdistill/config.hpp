#pragma once

#include "actdistill/trainer.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace actdistill {

/// Every tunable of a run, addressed by flat namespaced keys (see config_keys()).
struct Config {
  WorldConfig world;
  std::size_t n_train = 4096;
  std::size_t n_test = 512;
  BackboneConfig backbone;
  GraphOptions graph;
  LossWeights loss;
  bool stop_gradient = true;
  double tau = 0.5;
  double router_bias_init = -1.0;
  TrainSchedule train;
  TrainSchedule teacher;
  TrainSchedule stage1;
  std::size_t calib_episodes = 1024;
  double success_threshold = 0.05;
  std::string paths_in;

  Config();

  /// Cross-key invariants; single-key ranges are checked when a key is set.
  void validate() const;
  /// Canonical "key = value" listing of every key, in registry order.
  std::string dump() const;
  std::uint64_t hash() const;

  void set(std::string_view key, std::string_view value);

  /// Backbone config with input widths taken from the world.
  BackboneConfig backbone_config() const;
  Stage2Options stage2_options() const;
};

struct ConfigKey {
  std::string key;
  std::string doc;
};

const std::vector<ConfigKey>& config_keys();

/// "key = value" lines over defaults; '#' starts a comment. Errors carry the
/// line number.
Config parse_config(std::string_view text, Config base = Config());
Config load_config(const std::filesystem::path& path);

/// Applies one "key=value" override.
void apply_override(Config& cfg, std::string_view assignment);

/// world.seed = s, backbone.seed = s + 1, train.seed = s + 2, teacher.seed = s + 3,
/// stage1.seed = s + 4.
void apply_seed(Config& cfg, std::uint64_t seed);

}  // namespace actdistill
