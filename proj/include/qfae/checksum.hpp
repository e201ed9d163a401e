#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace qfae {

/// 64-bit FNV-1a hasher over raw bytes. Incremental so several tensors can be
/// folded into one digest.
class Fnv1a64 {
 public:
  static constexpr std::uint64_t kOffsetBasis = 0xcbf29ce484222325ULL;
  static constexpr std::uint64_t kPrime = 0x100000001b3ULL;

  void update(std::span<const std::byte> bytes) noexcept;
  void update(std::string_view text) noexcept;
  /// Hashes floats by their little-endian IEEE-754 encoding.
  void update(std::span<const float> values) noexcept;
  std::uint64_t digest() const noexcept { return state_; }

 private:
  std::uint64_t state_ = kOffsetBasis;
};

std::uint64_t fnv1a64(std::span<const std::byte> bytes) noexcept;

}  // namespace qfae
