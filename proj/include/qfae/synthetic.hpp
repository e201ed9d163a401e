#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "qfae/evaluation.hpp"
#include "qfae/imaging.hpp"

namespace qfae::synthetic {

struct SyntheticSpec {
  int side = 64;
  int n_train = 256;
  int n_test_normal = 64;
  int n_test_anomalous = 64;
  int square = 12;
  int waves = 4;
};

/// RGB image built from a few low-frequency plane waves, values in [0.15, 0.85].
imaging::ImageTensor smooth_texture(int side, int waves, std::mt19937_64& rng);

/// Pastes a square whose channels are pushed to the far end of [0,1] from the
/// local mean. Returns the top-left corner.
std::pair<int, int> insert_square(imaging::ImageTensor& img, int size, std::mt19937_64& rng);

struct SyntheticCorpus {
  std::vector<imaging::ImageTensor> train;
  std::vector<evaluation::TestItem> test;  // normals first, then anomalies
  std::vector<imaging::ImageTensor> masks;  // one per test item
};

SyntheticCorpus make_corpus(const SyntheticSpec& spec, std::uint64_t seed);

/// Writes the corpus in the dataset layout with index.json.
void write_dataset(const std::filesystem::path& root, const SyntheticCorpus& corpus);

}  // namespace qfae::synthetic
