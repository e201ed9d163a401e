#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace qfae {

enum class DType { F32, F16 };

/// Dense row-major float tensor as stored in an archive.
struct HostTensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::int64_t numel() const;
  bool operator==(const HostTensor&) const = default;
};

using NamedTensors = std::map<std::string, HostTensor>;

/// Named-tensor flat file.
///
/// Layout: an 8-byte little-endian header length N, N bytes of UTF-8 JSON
/// mapping each tensor name to {"dtype", "shape", "data_offsets"}, then the
/// raw little-endian payload. Offsets are [begin, end) relative to the first
/// payload byte. An optional "__metadata__" entry holds string key/values.
class TensorArchive {
 public:
  NamedTensors tensors;
  std::map<std::string, std::string> metadata;

  static TensorArchive read(const std::filesystem::path& path);
  static TensorArchive parse(const std::vector<std::uint8_t>& bytes);

  /// Tensors are written in name order so equal contents give equal bytes.
  std::vector<std::uint8_t> serialize(DType dtype = DType::F32) const;
  void write(const std::filesystem::path& path, DType dtype = DType::F32) const;

  const HostTensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
};

/// Per-tensor FNV-1a over the little-endian F32 bytes.
std::uint64_t tensor_checksum(const HostTensor& t);
/// Folds names, shapes and data of every tensor in name order.
std::uint64_t tensors_checksum(const NamedTensors& tensors);

float half_to_float(std::uint16_t h) noexcept;
std::uint16_t float_to_half(float f) noexcept;

}  // namespace qfae
