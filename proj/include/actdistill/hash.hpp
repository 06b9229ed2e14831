#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace actdistill {

/// Incremental FNV-1a, 64-bit. Used for content hashes and container checksums.
class Fnv1a {
 public:
  static constexpr std::uint64_t kOffset = 0xcbf29ce484222325ULL;
  static constexpr std::uint64_t kPrime = 0x100000001b3ULL;

  void update(std::span<const std::byte> bytes) noexcept {
    for (std::byte b : bytes) {
      state_ ^= static_cast<std::uint64_t>(b);
      state_ *= kPrime;
    }
  }

  void update(const void* data, std::size_t size) noexcept {
    update(std::span<const std::byte>(static_cast<const std::byte*>(data), size));
  }

  void update(std::string_view s) noexcept { update(s.data(), s.size()); }

  template <typename T>
  void update_value(const T& value) noexcept {
    update(&value, sizeof(T));
  }

  std::uint64_t digest() const noexcept { return state_; }

 private:
  std::uint64_t state_ = kOffset;
};

inline std::string hex_digest(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace actdistill
