#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qfae/imaging.hpp"
#include "qfae/model.hpp"
#include "qfae/perceptual.hpp"

namespace qfae::evaluation {

/// Mann-Whitney AUROC with midranks for ties. labels are 0 (normal) / 1.
double auroc(std::span<const double> scores, std::span<const int> labels);

/// Scoring configuration of one benchmark. Evaluation never augments.
struct EvalProfile {
  std::string name = "custom";
  perceptual::ScaleSet scales{{12, 16, 20}, {16, 32, 56}};
  perceptual::ScoreMode score_mode = perceptual::ScoreMode::MaxThenMean;
  perceptual::MapMode map_mode = perceptual::MapMode::Mean;
  bool liver_roi = false;
  bool bilateral = false;
  imaging::BilateralParams bilateral_params;
  double norm_mean = 0.449;
  double norm_std = 0.226;

  static constexpr bool augment = false;

  /// brats, resc, rsna, liver or custom.
  static EvalProfile named(const std::string& name);
  static bool is_known(const std::string& name);

  bool operator==(const EvalProfile&) const = default;
};

/// Decoded image -> side x side RGB in [0,1] following the profile's
/// preprocessing (liver ROI and bilateral filtering when enabled).
imaging::ImageTensor preprocess(const imaging::ImageTensor& raw, const EvalProfile& profile, int side,
                                std::vector<std::string>* warnings = nullptr);

struct TestItem {
  std::string id;
  imaging::ImageTensor image;  // preprocessed, not normalized
  int label = 0;
};

struct ImageResult {
  std::string id;
  int label = 0;
  double score = 0.0;
};

struct ScoredImage {
  double score = 0.0;
  perceptual::Map pixel_map;  // side x side
};

/// Image score from the raw maps; pixel map from the maps resized to the input.
ScoredImage score_image(const QfaeModel& model, const imaging::ImageTensor& image, const EvalProfile& profile);

struct RunResult {
  std::uint64_t seed = 0;
  double auroc = 0.0;
  std::vector<ImageResult> images;
};

using MapSink = std::function<void(const TestItem&, const perceptual::Map&)>;

/// Scores every test image with one trained model.
RunResult evaluate(const QfaeModel& model, const std::vector<TestItem>& test, const EvalProfile& profile,
                   std::uint64_t seed = 0, const MapSink& sink = {}, int workers = 1);

struct Report {
  std::string profile;
  std::size_t n_images = 0;
  std::vector<RunResult> per_seed;
  double auroc = 0.0;  // mean over runs
  double mean = 0.0;
  double std = 0.0;  // population std over runs

  std::string to_json(bool include_scores = true) const;
};

Report aggregate(const std::string& profile, std::vector<RunResult> runs);

/// Min-max normalized 8-bit grayscale PNG (constant maps become black).
void write_map_png(const std::filesystem::path& path, const perceptual::Map& map);
/// u32 height, u32 width, then height*width little-endian F32 values row-major.
void write_map_raw(const std::filesystem::path& path, const perceptual::Map& map);
perceptual::Map read_map_raw(const std::filesystem::path& path);

// ------------------------------------------------------------------- dataset

struct DatasetEntry {
  std::string path;  // relative to the dataset root
  int label = 0;
  std::string mask;  // optional, relative
  bool operator==(const DatasetEntry&) const = default;
};

/// train/good, test/good, test/ungood (+ test/masks) with index.json.
struct DatasetIndex {
  std::vector<DatasetEntry> train;
  std::vector<DatasetEntry> test;
  bool operator==(const DatasetIndex&) const = default;
};

/// Reads root/index.json when present, otherwise scans the directory layout.
DatasetIndex load_index(const std::filesystem::path& root);
void write_index(const std::filesystem::path& root, const DatasetIndex& index);

std::vector<imaging::ImageTensor> load_train(const std::filesystem::path& root, const DatasetIndex& index,
                                             const EvalProfile& profile, int side);
std::vector<TestItem> load_test(const std::filesystem::path& root, const DatasetIndex& index,
                                const EvalProfile& profile, int side);

}  // namespace qfae::evaluation
