#pragma once

#include "actdistill/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace actdistill {

/// Binary container layout (all integers little-endian):
///
///   "ACTD" | u32 version
///   u64 manifest_bytes | manifest ("key=value\n" lines, UTF-8)
///   u64 tensor_count
///   per tensor: u32 name_bytes | name | u8 dtype (0 = f64) | u8 rank |
///               u64 extent * rank | f64 payload, row-major
///   u64 FNV-1a checksum of every preceding byte
inline constexpr char kCheckpointMagic[4] = {'A', 'C', 'T', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 0;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Checkpoint {
  std::map<std::string, std::string> manifest;
  std::vector<NamedTensor> tensors;

  /// Appends a tensor; duplicate names throw ContractError.
  void add(std::string name, Tensor t);
  bool contains(const std::string& name) const;
  /// Looks up a tensor and checks its shape; mismatch throws ContractError
  /// naming the tensor.
  const Tensor& get(const std::string& name, const Shape& expected) const;
  const Tensor& get(const std::string& name) const;
  /// Missing key throws IntegrityError(kMalformed).
  const std::string& manifest_value(const std::string& key) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);
/// Throws IntegrityError with a code distinguishing magic, version,
/// truncation, checksum and structural failures.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Shortest round-trippable decimal form of a double.
std::string format_double(double v);

}  // namespace actdistill
