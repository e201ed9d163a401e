#include "qfae/tensor_archive.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include "json.hpp"

#include "qfae/checksum.hpp"
#include "qfae/errors.hpp"

namespace qfae {
namespace {

using json = nlohmann::json;

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xffu));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

std::size_t element_size(DType d) { return d == DType::F32 ? 4 : 2; }

const char* dtype_name(DType d) { return d == DType::F32 ? "F32" : "F16"; }

}  // namespace

std::int64_t HostTensor::numel() const {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

float half_to_float(std::uint16_t h) noexcept {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1fu;
  std::uint32_t mant = h & 0x3ffu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      // subnormal: renormalize
      int e = -1;
      do {
        ++e;
        mant <<= 1;
      } while ((mant & 0x400u) == 0);
      mant &= 0x3ffu;
      bits = sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) | (mant << 13);
    }
  } else if (exp == 0x1f) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

std::uint16_t float_to_half(float f) noexcept {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
  const std::uint32_t abs = x & 0x7fffffffu;
  if (abs >= 0x7f800000u) {
    return sign | 0x7c00u | (abs > 0x7f800000u ? 0x200u : 0u);
  }
  if (abs >= 0x477ff000u) return sign | 0x7c00u;  // overflow to inf
  if (abs < 0x38800000u) {
    // half subnormal: count units of 2^-24, round half to even
    if (abs < 0x33000000u) return sign;
    const std::uint32_t mant = (abs & 0x7fffffu) | 0x800000u;
    const int shift = 126 - static_cast<int>(abs >> 23);
    std::uint32_t n = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1u);
    const std::uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (n & 1u))) ++n;
    return static_cast<std::uint16_t>(sign | n);
  }
  std::uint32_t h = ((abs - 0x38000000u) >> 13);
  const std::uint32_t rem = abs & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;
  return static_cast<std::uint16_t>(sign | h);
}

const HostTensor& TensorArchive::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ManifestError(name, "tensor not found in archive: " + name);
  return it->second;
}

std::vector<std::uint8_t> TensorArchive::serialize(DType dtype) const {
  json header = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (static_cast<std::int64_t>(t.data.size()) != t.numel()) {
      throw ValidationError("tensor '" + name + "' data size does not match its shape");
    }
    const std::uint64_t bytes = t.data.size() * element_size(dtype);
    header[name] = {{"dtype", dtype_name(dtype)}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  if (!metadata.empty()) header["__metadata__"] = metadata;

  const std::string text = header.dump();
  std::vector<std::uint8_t> out;
  out.reserve(8 + text.size() + offset);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, t] : tensors) {
    for (float v : t.data) {
      if (dtype == DType::F32) {
        const auto bits = std::bit_cast<std::uint32_t>(v);
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xffu));
      } else {
        const auto bits = float_to_half(v);
        out.push_back(static_cast<std::uint8_t>(bits & 0xffu));
        out.push_back(static_cast<std::uint8_t>(bits >> 8));
      }
    }
  }
  return out;
}

void TensorArchive::write(const std::filesystem::path& path, DType dtype) const {
  const auto bytes = serialize(dtype);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

TensorArchive TensorArchive::read(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open archive: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse(bytes);
}

TensorArchive TensorArchive::parse(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) throw IoError("archive truncated: missing header length");
  const std::uint64_t n = get_u64(bytes.data());
  if (n > bytes.size() - 8) throw IoError("archive truncated: header length exceeds file size");
  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
  } catch (const json::exception& e) {
    throw IoError(std::string("archive header is not valid JSON: ") + e.what());
  }
  if (!header.is_object()) throw IoError("archive header must be a JSON object");

  const std::uint8_t* payload = bytes.data() + 8 + n;
  const std::uint64_t payload_size = bytes.size() - 8 - n;

  TensorArchive ar;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : entry.items()) {
        ar.metadata[k] = v.is_string() ? v.get<std::string>() : v.dump();
      }
      continue;
    }
    HostTensor t;
    DType dtype;
    const auto dt = entry.at("dtype").get<std::string>();
    if (dt == "F32") {
      dtype = DType::F32;
    } else if (dt == "F16") {
      dtype = DType::F16;
    } else {
      throw IoError("unsupported dtype '" + dt + "' for tensor " + name);
    }
    t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto offs = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
    if (offs.size() != 2 || offs[0] > offs[1] || offs[1] > payload_size) {
      throw IoError("bad data_offsets for tensor " + name);
    }
    const std::uint64_t count = static_cast<std::uint64_t>(t.numel());
    if (offs[1] - offs[0] != count * element_size(dtype)) {
      throw IoError("byte range of tensor " + name + " does not match its shape");
    }
    t.data.resize(count);
    const std::uint8_t* p = payload + offs[0];
    for (std::uint64_t i = 0; i < count; ++i) {
      if (dtype == DType::F32) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[4 * i + b]) << (8 * b);
        t.data[i] = std::bit_cast<float>(bits);
      } else {
        const auto bits = static_cast<std::uint16_t>(p[2 * i] | (p[2 * i + 1] << 8));
        t.data[i] = half_to_float(bits);
      }
    }
    ar.tensors.emplace(name, std::move(t));
  }
  return ar;
}

std::uint64_t tensor_checksum(const HostTensor& t) {
  Fnv1a64 h;
  h.update(std::span<const float>(t.data));
  return h.digest();
}

std::uint64_t tensors_checksum(const NamedTensors& tensors) {
  Fnv1a64 h;
  for (const auto& [name, t] : tensors) {
    h.update(name);
    for (auto s : t.shape) {
      const auto v = static_cast<std::uint64_t>(s);
      std::byte le[8];
      for (int i = 0; i < 8; ++i) le[i] = static_cast<std::byte>((v >> (8 * i)) & 0xffu);
      h.update(std::span<const std::byte>(le, 8));
    }
    h.update(std::span<const float>(t.data));
  }
  return h.digest();
}

}  // namespace qfae
