#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "qfae/autograd.hpp"
#include "qfae/encoder.hpp"
#include "qfae/imaging.hpp"

namespace qfae::perceptual {

using ad::Matrix;
using ad::Tape;
using ad::Var;

/// Single-channel anomaly map, h x w.
using Map = Eigen::MatrixXd;

enum class ScoreMode { MaxThenMean, MeanThenMax };
enum class MapMode { Mean, Max };
enum class LossForm { Hierarchical, Simple };

std::string to_string(ScoreMode m);
std::string to_string(MapMode m);
std::string to_string(LossForm f);
ScoreMode parse_score_mode(const std::string& s);
MapMode parse_map_mode(const std::string& s);
LossForm parse_loss_form(const std::string& s);

/// Perceptual layers I and patch sizes P used together.
struct ScaleSet {
  std::vector<int> layers;
  std::vector<int> patch_sizes;

  void validate(int side, int depth) const;
  bool operator==(const ScaleSet&) const = default;
};

struct PerceptualConfig {
  ScaleSet train{{16, 20}, {32, 56}};
  ScaleSet eval{{12, 16, 20}, {16, 32, 56}};
  ScoreMode score_mode = ScoreMode::MaxThenMean;
  MapMode map_mode = MapMode::Mean;
  LossForm loss_form = LossForm::Hierarchical;

  void validate(int side, int depth) const;
  bool operator==(const PerceptualConfig&) const = default;
};

struct FeatureKey {
  int layer = 0;
  int patch = 0;
  bool operator==(const FeatureKey&) const = default;
};

/// Feature maps of one image, ordered layer-major then by patch size. Entry n
/// is grid_n^2 x width, rows in row-major spatial order.
template <typename T>
struct FeaturePyramid {
  std::vector<FeatureKey> keys;
  std::vector<int> grids;
  std::vector<Matrix<T>> features;
};

/// Ordered set of anomaly maps with their (layer, patch) provenance.
struct AnomalyMapStack {
  std::vector<Map> maps;
  std::vector<FeatureKey> keys;

  bool empty() const { return maps.empty(); }
  std::size_t size() const { return maps.size(); }
};

/// A frozen perceptual ViT instantiated once per input patch size.
template <typename T>
class PerceptualModel {
 public:
  PerceptualModel(const encoder::FrozenBackbone& backbone, int side, const std::vector<int>& patch_sizes);

  /// Feature variables for every (layer, patch) in the scale set.
  std::vector<Var> forward(Tape<T>& t, Var image, const ScaleSet& scales) const;

  FeaturePyramid<T> features(const imaging::ImageTensor& img, const ScaleSet& scales) const;

  const encoder::VisionTransformer<T>& variant(int patch) const;
  int side() const { return side_; }
  int width() const { return width_; }
  int depth() const { return depth_; }
  /// Checksum over every runtime variant, in patch-size order.
  std::uint64_t checksum() const;

 private:
  int side_;
  int width_;
  int depth_;
  std::map<int, encoder::VisionTransformer<T>> variants_;
};

/// Keys of a scale set in evaluation order (layer-major, then patch size).
std::vector<FeatureKey> scale_keys(const ScaleSet& scales);

/// 1 - cos between corresponding feature vectors. Zero-norm cells give 1.
Map layer_anomaly_map(const Eigen::Ref<const Eigen::MatrixXd>& f, const Eigen::Ref<const Eigen::MatrixXd>& g,
                      int h, int w);

/// Bilinear resize of a map (antialiased when shrinking).
Map resize_map(const Map& m, int h, int w);

/// Resizes each map to target and multiplies them elementwise.
Map combine_across_scales(const std::vector<Map>& maps, int target_h, int target_w);

double image_score(const AnomalyMapStack& stack, ScoreMode mode);
/// Per-pixel mean or max over maps that already share one resolution.
Map pixel_map(const AnomalyMapStack& stack, MapMode mode);
/// Every map of the stack resized to h x w.
AnomalyMapStack resize_stack(const AnomalyMapStack& stack, int h, int w);

/// Hierarchical loss from precomputed maps: per layer, every patch-size map is
/// resized to the finest grid in the stack and multiplied; the layer means are
/// averaged.
double hierarchical_loss(const AnomalyMapStack& stack);

/// Raw (unresized) maps between an image and its reconstruction.
template <typename T>
AnomalyMapStack anomaly_maps(const FeaturePyramid<T>& x, const FeaturePyramid<T>& x_rec);

/// Perceptual loss on a tape. Target features of x are constants; only the
/// reconstruction carries gradients.
///   Hierarchical: (1/|I|) sum_i mean(prod_p resize(A_{i,p})), resized to the
///                 finest grid present.
///   Simple:       (1/|I|) sum_i (1 - cos(feat_i, feat~_i)) with each layer's
///                 whole feature map flattened, at the first patch size only.
template <typename T>
Var perceptual_loss(Tape<T>& t, const PerceptualModel<T>& model, const FeaturePyramid<T>& target, Var x_rec,
                    const ScaleSet& scales, LossForm form);

/// Convenience wrapper over two normalized images; returns the scalar loss.
template <typename T>
T perceptual_loss(const PerceptualModel<T>& model, const imaging::ImageTensor& x, const imaging::ImageTensor& x_rec,
                  const ScaleSet& scales, LossForm form);

extern template class PerceptualModel<float>;
extern template class PerceptualModel<double>;

}  // namespace qfae::perceptual
