#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "qfae/autograd.hpp"
#include "qfae/imaging.hpp"
#include "qfae/nn.hpp"
#include "qfae/tensor_archive.hpp"

namespace qfae::encoder {

using ad::Matrix;
using ad::Tape;
using ad::Var;

/// Shape of a pre-norm ViT. Tap layer k is the output of block k (0-based),
/// taken before any final layer norm.
struct BackboneSpec {
  std::string name = "custom";
  int depth = 0;
  int width = 0;
  int heads = 0;
  int patch_size = 0;
  int special_tokens = 1;  // class token first, then registers
  std::vector<int> tap_layers;
  double mlp_ratio = 4.0;
  int in_channels = 3;

  /// Checks the structural invariants; when side > 0 also its divisibility.
  void validate(int side = 0) const;
  bool operator==(const BackboneSpec&) const = default;

  /// Tensor roles and shapes every archive for this spec must provide.
  /// pretrain_grid is the side of the position-embedding grid.
  std::map<std::string, std::vector<std::int64_t>> layout(int pretrain_grid) const;

  /// Taps at the 4th- and 2nd-to-last blocks.
  static std::vector<int> last_block_taps(int depth) { return {depth - 4, depth - 2}; }

  static BackboneSpec dinov2_vitl14_reg();
  static BackboneSpec dino_vitb8();
  static BackboneSpec mae_vitl16();
};

/// Immutable pretrained weights keyed by role name.
class FrozenBackbone {
 public:
  /// Resolves every role through the manifest (role -> archive name; roles
  /// absent from the manifest map to themselves) and validates shapes.
  static FrozenBackbone load(const TensorArchive& archive, const BackboneSpec& spec,
                             const std::map<std::string, std::string>& manifest = {});

  static std::map<std::string, std::string> read_manifest(const std::filesystem::path& path);

  const BackboneSpec& spec() const { return spec_; }
  const NamedTensors& weights() const { return weights_; }
  int pretrain_grid() const { return pretrain_grid_; }
  /// Recorded when the backbone was loaded.
  std::uint64_t checksum() const { return checksum_; }
  std::uint64_t recompute_checksum() const { return tensors_checksum(weights_); }

  /// Archive holding the weights under their role names.
  TensorArchive to_archive() const;

 private:
  FrozenBackbone() = default;
  friend FrozenBackbone make_toy_backbone(std::uint64_t, const BackboneSpec&, int);

  BackboneSpec spec_;
  NamedTensors weights_;
  int pretrain_grid_ = 0;
  std::uint64_t checksum_ = 0;
};

/// Seeded random backbone for desk-scale runs. pretrain_grid 0 means 4.
FrozenBackbone make_toy_backbone(std::uint64_t seed, const BackboneSpec& spec, int pretrain_grid = 0);

/// Runnable frozen ViT at a fixed input side and patch size. A patch size
/// other than the pretrained one resamples the patch-embedding kernel
/// bicubically; a different token grid interpolates the position embeddings.
template <typename T>
class VisionTransformer {
 public:
  VisionTransformer(const FrozenBackbone& backbone, int side, int patch_size = 0);

  /// Hidden states after each requested block, special tokens stripped.
  /// The image variable is a (C*side) x side plane stack.
  std::vector<Var> forward(Tape<T>& tape, Var image, std::span<const int> taps) const;

  /// Convenience inference path returning spatial tokens per tap.
  std::vector<Matrix<T>> hidden_states(const imaging::ImageTensor& img, std::span<const int> taps) const;

  const BackboneSpec& spec() const { return spec_; }
  int side() const { return side_; }
  int patch_size() const { return patch_; }
  int grid() const { return side_ / patch_; }
  int tokens() const { return grid() * grid(); }

  /// FNV-1a over the runtime weights cast to float.
  std::uint64_t checksum() const;

 private:
  BackboneSpec spec_;
  int side_;
  int patch_;
  nn::Linear<T> patch_embed_;
  ad::Param<T> special_;  // special_tokens x D, class position already added
  ad::Param<T> pos_;      // grid^2 x D
  std::vector<nn::TransformerBlock<T>> blocks_;
  std::shared_ptr<const std::vector<Eigen::Index>> patch_index_;
};

/// Image plane stack as a tape-ready matrix.
template <typename T>
Matrix<T> image_matrix(const imaging::ImageTensor& img);

/// Runs a backbone on a normalized image and returns its tapped spatial tokens.
std::vector<Matrix<float>> extract_hidden_states(const VisionTransformer<float>& backbone,
                                                 const imaging::ImageTensor& img);

/// Learned affine map from one encoder's width to the shared context width.
template <typename T>
struct Projection {
  nn::Linear<T> linear;

  Projection() = default;
  Projection(int index, int in_width, int out_width) : linear("proj." + std::to_string(index), in_width, out_width, true) {}

  int in_width() const { return static_cast<int>(linear.in_features()); }
  int out_width() const { return static_cast<int>(linear.out_features()); }
};

struct ContextSegment {
  int encoder = 0;
  int tap = 0;
  int offset = 0;
  int length = 0;
};

struct ContextLayout {
  std::vector<ContextSegment> segments;
  int total = 0;
  int width = 0;
};

/// Projects each encoder's tapped features and concatenates them in encoder,
/// then tap, then spatial order.
template <typename T>
Var project_concat(Tape<T>& tape, const std::vector<std::vector<Var>>& features,
                   const std::vector<Projection<T>>& projections, ContextLayout* layout = nullptr);

extern template class VisionTransformer<float>;
extern template class VisionTransformer<double>;

}  // namespace qfae::encoder
