#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "qfae/checksum.hpp"
#include "qfae/errors.hpp"
#include "qfae/tensor_archive.hpp"

using namespace qfae;

TEST(Fnv1a, PublishedVectors) {
  EXPECT_EQ(fnv1a64(std::as_bytes(std::span<const char>("", 0))), 0xcbf29ce484222325ULL);
  Fnv1a64 a;
  a.update(std::string_view("a"));
  EXPECT_EQ(a.digest(), 0xaf63dc4c8601ec8cULL);
  Fnv1a64 f;
  f.update(std::string_view("foobar"));
  EXPECT_EQ(f.digest(), 0x85944171f73967e8ULL);
}

TEST(Fnv1a, FloatsHashTheirLittleEndianBytes) {
  const float v[2] = {1.0f, -2.5f};
  Fnv1a64 a, b;
  a.update(std::span<const float>(v, 2));
  unsigned char bytes[8];
  std::memcpy(bytes, v, 8);  // host is little-endian here
  b.update(std::as_bytes(std::span<const unsigned char>(bytes, 8)));
  EXPECT_EQ(a.digest(), b.digest());
}

namespace {

TensorArchive sample_archive() {
  TensorArchive ar;
  ar.tensors["b.weight"] = {{2, 3}, {1, 2, 3, 4, 5, 6}};
  ar.tensors["a.bias"] = {{3}, {0.5f, -0.25f, 1e-3f}};
  ar.metadata["config"] = "side = 64\n";
  return ar;
}

}  // namespace

TEST(TensorArchive, RoundTripF32) {
  const auto ar = sample_archive();
  const auto bytes = ar.serialize();
  const auto back = TensorArchive::parse(bytes);
  EXPECT_EQ(back.tensors, ar.tensors);
  EXPECT_EQ(back.metadata, ar.metadata);
  EXPECT_EQ(back.serialize(), bytes);
}

TEST(TensorArchive, HeaderLayout) {
  const auto bytes = sample_archive().serialize();
  std::uint64_t n = 0;
  for (int i = 7; i >= 0; --i) n = (n << 8) | bytes[static_cast<std::size_t>(i)];
  ASSERT_LE(8 + n, bytes.size());
  const std::string header(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
  EXPECT_NE(header.find("\"dtype\":\"F32\""), std::string::npos);
  EXPECT_NE(header.find("__metadata__"), std::string::npos);
  // payload: 3 + 6 floats, tensors in name order (a.bias first)
  EXPECT_EQ(bytes.size() - 8 - n, 9u * 4u);
  float first;
  std::memcpy(&first, bytes.data() + 8 + n, 4);
  EXPECT_EQ(first, 0.5f);
}

TEST(TensorArchive, F16RoundTripWithinHalfPrecision) {
  const auto ar = sample_archive();
  const auto back = TensorArchive::parse(ar.serialize(DType::F16));
  for (const auto& [name, t] : ar.tensors) {
    const auto& b = back.at(name);
    ASSERT_EQ(b.shape, t.shape);
    for (std::size_t i = 0; i < t.data.size(); ++i) EXPECT_NEAR(b.data[i], t.data[i], std::abs(t.data[i]) * 1e-3 + 1e-7);
  }
}

TEST(TensorArchive, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "qfae_archive_test.qfa";
  sample_archive().write(path);
  EXPECT_EQ(TensorArchive::read(path).tensors, sample_archive().tensors);
  std::filesystem::remove(path);
}

TEST(TensorArchive, MissingTensorNamesIt) {
  const auto ar = sample_archive();
  try {
    (void)ar.at("block.0.attn.qkv.bias");
    FAIL();
  } catch (const ManifestError& e) {
    EXPECT_EQ(e.tensor(), "block.0.attn.qkv.bias");
  }
}

TEST(TensorArchive, RejectsTruncatedAndCorrupt) {
  auto bytes = sample_archive().serialize();
  auto cut = bytes;
  cut.resize(cut.size() - 4);
  EXPECT_ANY_THROW(TensorArchive::parse(cut));
  std::vector<std::uint8_t> tiny(4, 0);
  EXPECT_ANY_THROW(TensorArchive::parse(tiny));
  auto bad = bytes;
  bad[8] = '!';
  EXPECT_ANY_THROW(TensorArchive::parse(bad));
}

TEST(TensorArchive, ChecksumSensitiveToNameShapeAndData) {
  const auto ar = sample_archive();
  const auto base = tensors_checksum(ar.tensors);
  auto t = ar.tensors;
  t["a.bias"].data[0] = 0.5000001f;
  EXPECT_NE(tensors_checksum(t), base);
  t = ar.tensors;
  t["b.weight"].shape = {3, 2};
  EXPECT_NE(tensors_checksum(t), base);
  EXPECT_EQ(tensors_checksum(ar.tensors), base);
}

TEST(Half, KnownEncodings) {
  EXPECT_EQ(float_to_half(1.0f), 0x3c00);
  EXPECT_EQ(float_to_half(-2.0f), 0xc000);
  EXPECT_EQ(float_to_half(65504.0f), 0x7bff);
  EXPECT_EQ(float_to_half(1e6f), 0x7c00);
  EXPECT_EQ(float_to_half(std::ldexp(1.0f, -24)), 0x0001);
  EXPECT_EQ(float_to_half(std::ldexp(1.0f, -14)), 0x0400);
  EXPECT_EQ(float_to_half(0.0f), 0x0000);
  EXPECT_EQ(half_to_float(0x3555), 0.333251953125f);
  EXPECT_TRUE(std::isnan(half_to_float(0x7e00)));
}

TEST(Half, EveryFiniteHalfRoundTrips) {
  for (std::uint32_t h = 0; h < 0x10000; ++h) {
    const auto u = static_cast<std::uint16_t>(h);
    if ((u & 0x7c00) == 0x7c00) continue;
    EXPECT_EQ(float_to_half(half_to_float(u)), u) << std::hex << h;
  }
}

TEST(Half, RoundsToNearestEven) {
  // oracle: exhaustive nearest search over all finite halves
  std::mt19937 rng(3);
  std::uniform_real_distribution<float> u(-70000.0f, 70000.0f);
  for (int i = 0; i < 2000; ++i) {
    float f = u(rng) * (i % 2 ? 1e-4f : 1.0f);
    if (std::abs(f) > 65504.0f) continue;
    const std::uint16_t got = float_to_half(f);
    double best = 1e300;
    for (std::uint32_t h = 0; h < 0x10000; ++h) {
      if ((h & 0x7c00) == 0x7c00) continue;
      best = std::min(best, std::abs(static_cast<double>(half_to_float(static_cast<std::uint16_t>(h))) - f));
    }
    EXPECT_EQ(std::abs(static_cast<double>(half_to_float(got)) - f), best) << f;
  }
}
