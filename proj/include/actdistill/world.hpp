#pragma once

#include "actdistill/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace actdistill {

inline constexpr Index kIdCodeDim = 8;
inline constexpr Index kPositionDim = 3;
inline constexpr Index kActionDim = 7;
/// Instruction layout: target code (8), receptacle code (8), gripper bit (1).
inline constexpr Index kInstructionDim = 2 * kIdCodeDim + 1;

using ActionVector = Eigen::Matrix<double, 1, kActionDim>;
using Position = Eigen::RowVector3d;

struct WorldConfig {
  std::size_t n_tokens = 8;
  std::size_t token_dim = 16;
  std::size_t n_objects = 4;
  double noise_std = 0.1;
  std::uint64_t seed = 0;

  /// Throws ConfigError on any invariant violation.
  void validate() const;
  std::uint64_t hash() const;
};

/// One synthetic manipulation instance.
///
/// Object tokens are [id code | position | zeros]; the id code of object k is
/// the k-th basis vector of R^8. Remaining tokens are Gaussian noise.
struct Episode {
  Matrix visual;          // [n_tokens, token_dim]
  RowVector instruction;  // [kInstructionDim]
  ActionVector action;
};

/// Translation = receptacle - target; rotation = 0.1 * unit translation (zero
/// when the positions coincide); gripper passed through.
ActionVector compose_action(const Position& target, const Position& receptacle, double gripper);

Episode gen_episode(const WorldConfig& cfg, std::uint64_t index);

/// Recomputes the action from the tokens the instruction points at.
/// Throws ContractError if a referenced object id is absent.
ActionVector oracle_action(const Episode& e);

struct Dataset {
  WorldConfig config;
  std::uint64_t first_index = 0;
  std::vector<Episode> episodes;

  std::size_t size() const noexcept { return episodes.size(); }
  std::uint64_t content_hash() const;
  std::map<std::string, std::string> manifest() const;
};

/// Episodes first_index .. first_index + n - 1; n must be at least 1.
Dataset make_dataset(const WorldConfig& cfg, std::size_t n, std::uint64_t first_index = 0);

void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace actdistill
