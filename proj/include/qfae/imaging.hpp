#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "qfae/autograd.hpp"

namespace qfae::imaging {

enum class ColorSpace { Gray, Rgb };

/// Planar float image, data laid out as [C][H][W].
struct ImageTensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;
  ColorSpace colorspace = ColorSpace::Gray;
  bool normalized = false;

  ImageTensor() = default;
  ImageTensor(int c, int h, int w, float fill = 0.0f);

  float& at(int c, int y, int x) { return data[index(c, y, x)]; }
  float at(int c, int y, int x) const { return data[index(c, y, x)]; }
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * static_cast<std::size_t>(height) + static_cast<std::size_t>(y)) *
               static_cast<std::size_t>(width) +
           static_cast<std::size_t>(x);
  }
  std::size_t size() const { return data.size(); }

  /// Throws ValidationError when shape or value-range invariants are broken.
  void validate() const;

  bool operator==(const ImageTensor&) const = default;
};

/// Tokens of a patchified image: one row per patch, row-major over the grid.
using TokenSequence = ad::Matrix<float>;

struct PatchGrid {
  int patch_size = 0;
  int grid_h = 0;
  int grid_w = 0;
  int channels = 0;

  int tokens() const { return grid_h * grid_w; }
  int token_dim() const { return patch_size * patch_size * channels; }
  int height() const { return patch_size * grid_h; }
  int width() const { return patch_size * grid_w; }
};

struct AugmentConfig {
  double crop_scale_min = 0.90;
  double crop_scale_max = 1.00;
  double crop_aspect_min = 0.80;
  double crop_aspect_max = 1.20;
  double rotation_deg = 10.0;
  double vflip_prob = 0.5;
  double brightness = 0.1;
  double contrast = 0.1;
  double norm_mean = 0.449;
  double norm_std = 0.226;

  void validate() const;
  bool operator==(const AugmentConfig&) const = default;
  /// No crop, rotation, flip or jitter: augment reduces to resize + normalize.
  static AugmentConfig identity();
};

struct BoundingBox {
  int y0 = 0, x0 = 0;  // inclusive
  int y1 = 0, x1 = 0;  // inclusive
  int height() const { return y1 - y0 + 1; }
  int width() const { return x1 - x0 + 1; }
  bool operator==(const BoundingBox&) const = default;
};

struct BilateralParams {
  double spatial_sigma = 3.0;
  double range_sigma = 0.1;
  bool operator==(const BilateralParams&) const = default;
};

struct RoiResult {
  ImageTensor image;
  std::optional<BoundingBox> bbox;      // empty for all-zero inputs
  std::optional<std::string> warning;  // set for all-zero inputs
  bool scaled = false;
};

// ----------------------------------------------------------------- resampling

/// Antialiased bilinear (triangle filter) weights, out x in. Downscaling widens
/// the kernel by the scale factor; equal sizes give the identity.
Eigen::MatrixXd bilinear_weights(int in_size, int out_size);

/// Bicubic (a = -0.75, half-pixel centers, clamped borders) weights, out x in.
Eigen::MatrixXd bicubic_weights(int in_size, int out_size);

/// Separable resample of a single h x w plane with the given row/column weights.
Eigen::MatrixXd resample_plane(const Eigen::MatrixXd& plane, const Eigen::MatrixXd& row_weights,
                               const Eigen::MatrixXd& col_weights);

ImageTensor resize(const ImageTensor& img, int out_h, int out_w);

// ---------------------------------------------------------------- operations

ImageTensor load_image(const std::filesystem::path& path);
/// 8-bit (default) or 16-bit output. Values are clamped to [0,1] first.
void save_image(const std::filesystem::path& path, const ImageTensor& img, int bit_depth = 8);

/// Decodes, replicates grayscale to three channels and resizes to side x side.
ImageTensor load_and_resize(const std::filesystem::path& path, int side);
ImageTensor to_rgb(const ImageTensor& img);
/// Same contract as load_and_resize for an already decoded image.
ImageTensor prepare(const ImageTensor& img, int side);

ImageTensor normalize(const ImageTensor& img, double mean, double stddev);
ImageTensor denormalize(const ImageTensor& img, double mean, double stddev);

std::pair<TokenSequence, PatchGrid> patchify(const ImageTensor& img, int patch_size);
ImageTensor unpatchify(const TokenSequence& tokens, const PatchGrid& grid);

/// Flat-index maps between the (C*H) x W image layout and the L x (p*p*C)
/// token layout, used to run patchify/unpatchify on an autograd tape.
/// Within a token the order is (row in patch, column in patch, channel).
std::shared_ptr<const std::vector<Eigen::Index>> patchify_index(int channels, int height, int width, int patch_size);
std::shared_ptr<const std::vector<Eigen::Index>> unpatchify_index(const PatchGrid& grid);

ImageTensor augment(const ImageTensor& img, const AugmentConfig& cfg, int side, std::mt19937_64& rng);

std::optional<BoundingBox> nonzero_bbox(const ImageTensor& img);

/// Crop to the nonzero bounding box and center on a black side x side canvas,
/// downscaling with preserved aspect ratio when the crop does not fit. The
/// optional hook runs on the crop before it is placed.
RoiResult liver_roi_preprocess(const ImageTensor& img, int side,
                               const std::function<ImageTensor(const ImageTensor&)>& crop_hook = {});

ImageTensor bilateral_filter(const ImageTensor& img, double spatial_sigma, double range_sigma);

}  // namespace qfae::imaging
