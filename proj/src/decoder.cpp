#include "qfae/decoder.hpp"

#include "qfae/errors.hpp"

namespace qfae::decoder {

void DecoderConfig::validate() const {
  if (width <= 0) throw ValidationError("decoder: width must be positive");
  if (depth < 0) throw ValidationError("decoder: depth must be >= 0");
  if (depth > 0 && (heads <= 0 || width % heads != 0)) throw ValidationError("decoder: heads must divide width");
  if (patch_size <= 0) throw ValidationError("decoder: patch size must be positive");
  if (channels != 1 && channels != 3) throw ValidationError("decoder: channels must be 1 or 3");
}

template <typename T>
Decoder<T>::Decoder(const DecoderConfig& cfg, int grid) : cfg_(cfg), grid_(grid) {
  cfg.validate();
  if (grid <= 0) throw ValidationError("decoder: grid must be positive");
  const int m = grid * grid;
  pos_embed_ = nn::make_param<T>("decoder.pos_embed", m, cfg.width, true);
  for (int k = 0; k < cfg.depth; ++k) {
    blocks_.emplace_back("decoder.block." + std::to_string(k), cfg.width, cfg.heads, cfg.mlp_ratio, true);
  }
  norm_ = nn::LayerNorm<T>("decoder.norm", cfg.width, true);
  head_ = nn::Linear<T>("decoder.head", cfg.width, cfg.patch_size * cfg.patch_size * cfg.channels, true);
  unpatch_index_ = imaging::unpatchify_index(output_grid());
}

template <typename T>
void Decoder<T>::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  nn::init_normal(pos_embed_, 0.02, rng);
  for (auto& b : blocks_) b.init(rng);
  head_.init(rng);
}

template <typename T>
Var Decoder<T>::decode(Tape<T>& t, Var z) const {
  const int m = grid_ * grid_;
  if (t.rows(z) != m) {
    throw ValidationError("decoder: latent has " + std::to_string(t.rows(z)) + " tokens, grid needs " +
                          std::to_string(m));
  }
  if (t.cols(z) != cfg_.width) throw ValidationError("decoder: latent width does not match decoder width");
  if (blocks_.empty()) return head_(t, z);
  Var x = t.add(z, t.param(pos_embed_));
  for (const auto& b : blocks_) x = b(t, x);
  return head_(t, norm_(t, x));
}

template <typename T>
Var Decoder<T>::reconstruct(Tape<T>& t, Var z) const {
  Var tokens = decode(t, z);
  const int s = side();
  return t.gather(tokens, unpatch_index_, static_cast<Eigen::Index>(cfg_.channels) * s, s);
}

template <typename T>
nn::ParamList<T> Decoder<T>::parameters() {
  nn::ParamList<T> out;
  if (!blocks_.empty()) {
    out.push_back(&pos_embed_);
    for (auto& b : blocks_) b.collect(out);
    norm_.collect(out);
  }
  head_.collect(out);
  return out;
}

template class Decoder<float>;
template class Decoder<double>;

}  // namespace qfae::decoder
