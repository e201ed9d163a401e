#include "qfae/checksum.hpp"

#include <bit>
#include <cstring>

namespace qfae {

void Fnv1a64::update(std::span<const std::byte> bytes) noexcept {
  for (std::byte b : bytes) {
    state_ ^= static_cast<std::uint64_t>(b);
    state_ *= kPrime;
  }
}

void Fnv1a64::update(std::string_view text) noexcept {
  update(std::as_bytes(std::span<const char>(text.data(), text.size())));
}

void Fnv1a64::update(std::span<const float> values) noexcept {
  if constexpr (std::endian::native == std::endian::little) {
    update(std::as_bytes(values));
  } else {
    for (float v : values) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      std::byte le[4];
      for (int i = 0; i < 4; ++i) le[i] = static_cast<std::byte>((bits >> (8 * i)) & 0xffu);
      update(std::span<const std::byte>(le, 4));
    }
  }
}

std::uint64_t fnv1a64(std::span<const std::byte> bytes) noexcept {
  Fnv1a64 h;
  h.update(bytes);
  return h.digest();
}

}  // namespace qfae
