#pragma once

#include <memory>
#include <vector>

#include "qfae/autograd.hpp"
#include "qfae/imaging.hpp"
#include "qfae/nn.hpp"

namespace qfae::decoder {

using ad::Tape;
using ad::Var;

struct DecoderConfig {
  int width = 768;
  int depth = 6;
  int heads = 12;
  double mlp_ratio = 4.0;
  int patch_size = 8;
  int channels = 3;

  void validate() const;
  bool operator==(const DecoderConfig&) const = default;
};

/// Lightweight transformer from latent queries to image patches. Learned
/// position embeddings are added to Z, then pre-norm blocks, a final norm and
/// a linear head of width patch^2 * channels. With depth 0 the decoder is the
/// linear head alone.
template <typename T>
class Decoder {
 public:
  Decoder() = default;
  /// grid is the number of patches per side; |Z| must equal grid^2.
  Decoder(const DecoderConfig& cfg, int grid);

  void init(std::uint64_t seed);

  Var decode(Tape<T>& t, Var z) const;
  /// unpatchify(decode(z)) as a (C*side) x side plane stack.
  Var reconstruct(Tape<T>& t, Var z) const;

  imaging::PatchGrid output_grid() const { return {cfg_.patch_size, grid_, grid_, cfg_.channels}; }
  int side() const { return grid_ * cfg_.patch_size; }
  const DecoderConfig& config() const { return cfg_; }
  nn::ParamList<T> parameters();

  nn::Linear<T>& head() { return head_; }

 private:
  DecoderConfig cfg_;
  int grid_ = 0;
  ad::Param<T> pos_embed_;
  std::vector<nn::TransformerBlock<T>> blocks_;
  nn::LayerNorm<T> norm_;
  nn::Linear<T> head_;
  std::shared_ptr<const std::vector<Eigen::Index>> unpatch_index_;
};

extern template class Decoder<float>;
extern template class Decoder<double>;

}  // namespace qfae::decoder
