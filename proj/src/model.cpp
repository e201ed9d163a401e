#include "qfae/model.hpp"

#include <cstdlib>

#include "qfae/checksum.hpp"
#include "qfae/errors.hpp"

namespace qfae {

encoder::FrozenBackbone BackboneSource::load(const std::filesystem::path& archive_dir) const {
  if (toy_seed >= 0) return encoder::make_toy_backbone(static_cast<std::uint64_t>(toy_seed), spec, toy_pretrain_grid);
  if (archive.empty()) throw ValidationError("backbone '" + spec.name + "' has neither an archive nor a toy seed");
  std::filesystem::path dir = archive_dir;
  if (dir.empty()) {
    if (const char* env = std::getenv("QFAE_ARCHIVE_DIR")) dir = env;
  }
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return (path.is_relative() && !dir.empty()) ? dir / path : path;
  };
  const TensorArchive ar = TensorArchive::read(resolve(archive));
  std::map<std::string, std::string> roles;
  if (!manifest.empty()) roles = encoder::FrozenBackbone::read_manifest(resolve(manifest));
  return encoder::FrozenBackbone::load(ar, spec, roles);
}

ModelConfig ModelConfig::defaults() {
  ModelConfig c;
  c.side = 224;
  EncoderEntry e;
  e.source.spec = encoder::BackboneSpec::dinov2_vitl14_reg();
  e.source.archive = "dinov2_vitl14_reg.qfa";
  e.proj_out = 768;
  c.encoders = {e};
  c.qformer = qformer::QFormerConfig{768, 8, 4.0, 1};
  c.decoder = decoder::DecoderConfig{768, 6, 12, 4.0, 8, 3};
  c.perceptual_model.spec = encoder::BackboneSpec::mae_vitl16();
  c.perceptual_model.spec.tap_layers.clear();  // layers come from the perceptual scale sets
  c.perceptual_model.archive = "mae_vitl16.qfa";
  return c;
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.side = 64;
  EncoderEntry e;
  e.source.spec.name = "toy_vit";
  e.source.spec.depth = 4;
  e.source.spec.width = 64;
  e.source.spec.heads = 4;
  e.source.spec.patch_size = 8;
  e.source.spec.special_tokens = 1;
  e.source.spec.tap_layers = {1, 3};
  e.source.toy_seed = 1;
  e.source.toy_pretrain_grid = 8;
  e.proj_out = 64;
  c.encoders = {e};
  c.qformer = qformer::QFormerConfig{64, 8, 4.0, 1};
  c.decoder = decoder::DecoderConfig{64, 2, 4, 4.0, 8, 3};
  c.perceptual_model.spec.name = "toy_perceptual";
  c.perceptual_model.spec.depth = 4;
  c.perceptual_model.spec.width = 64;
  c.perceptual_model.spec.heads = 4;
  c.perceptual_model.spec.patch_size = 8;
  c.perceptual_model.spec.special_tokens = 1;
  c.perceptual_model.toy_seed = 2;
  c.perceptual_model.toy_pretrain_grid = 8;
  c.perceptual.train = {{1, 3}, {8, 16}};
  c.perceptual.eval = {{1, 2, 3}, {8, 16}};
  return c;
}

void ModelConfig::validate() const {
  if (side <= 0) throw ValidationError("side must be positive");
  if (encoders.empty()) throw ValidationError("at least one encoder is required");
  for (const auto& e : encoders) {
    e.source.spec.validate(side);
    if (e.source.spec.tap_layers.empty()) throw ValidationError("encoder '" + e.source.spec.name + "' has no tap layers");
    if (e.proj_out != qformer.width) {
      throw ValidationError("encoder '" + e.source.spec.name + "' projects to " + std::to_string(e.proj_out) +
                            " but the Q-Former width is " + std::to_string(qformer.width));
    }
  }
  qformer.validate();
  decoder.validate();
  if (decoder.width != qformer.width) throw ValidationError("decoder width must equal the Q-Former width");
  (void)num_queries();
  perceptual_model.spec.validate();
  perceptual.validate(side, perceptual_model.spec.depth);
}

namespace {

std::vector<int> all_patch_sizes(const perceptual::PerceptualConfig& p) {
  std::vector<int> out = p.train.patch_sizes;
  out.insert(out.end(), p.eval.patch_sizes.begin(), p.eval.patch_sizes.end());
  return out;
}

}  // namespace

QfaeModel::QfaeModel(const ModelConfig& cfg, std::vector<encoder::FrozenBackbone> encoders,
                     encoder::FrozenBackbone perceptual_backbone)
    : cfg_(cfg),
      frozen_encoders_(std::move(encoders)),
      frozen_perceptual_(std::move(perceptual_backbone)),
      perceptual_(frozen_perceptual_, cfg.side, all_patch_sizes(cfg.perceptual)),
      qformer_(cfg.qformer, cfg.num_queries()),
      decoder_(cfg.decoder, cfg.side / cfg.decoder.patch_size) {
  cfg.validate();
  if (frozen_encoders_.size() != cfg.encoders.size()) throw ValidationError("encoder count does not match config");
  for (std::size_t e = 0; e < frozen_encoders_.size(); ++e) {
    encoders_.emplace_back(frozen_encoders_[e], cfg.side);
    projections_.emplace_back(static_cast<int>(e), frozen_encoders_[e].spec().width, cfg.encoders[e].proj_out);
  }
}

QfaeModel QfaeModel::from_config(const ModelConfig& cfg, const std::filesystem::path& archive_dir) {
  cfg.validate();
  std::vector<encoder::FrozenBackbone> encs;
  for (const auto& e : cfg.encoders) encs.push_back(e.source.load(archive_dir));
  return QfaeModel(cfg, std::move(encs), cfg.perceptual_model.load(archive_dir));
}

void QfaeModel::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : projections_) p.linear.init(rng);
  qformer_.init(rng());
  decoder_.init(rng());
}

QfaeModel::Features QfaeModel::encode(const imaging::ImageTensor& x) const {
  if (!x.normalized) throw ValidationError("encode expects a normalized image");
  Features out;
  for (std::size_t e = 0; e < encoders_.size(); ++e) {
    out.push_back(encoders_[e].hidden_states(x, cfg_.encoders[e].source.spec.tap_layers));
  }
  return out;
}

ad::Var QfaeModel::context(ad::Tape<float>& t, const Features& hidden) const {
  std::vector<std::vector<ad::Var>> feats;
  for (const auto& per_encoder : hidden) {
    std::vector<ad::Var> vs;
    for (const auto& h : per_encoder) vs.push_back(t.constant(h));
    feats.push_back(std::move(vs));
  }
  return encoder::project_concat(t, feats, projections_);
}

ad::Var QfaeModel::reconstruct(ad::Tape<float>& t, const Features& hidden) const {
  ad::Var z = qformer_.forward(t, context(t, hidden));
  return decoder_.reconstruct(t, z);
}

imaging::ImageTensor QfaeModel::reconstruct(const imaging::ImageTensor& x) const {
  ad::Tape<float> t;
  const ad::Var v = reconstruct(t, encode(x));
  const auto& m = t.value(v);
  imaging::ImageTensor out(cfg_.decoder.channels, cfg_.side, cfg_.side);
  std::copy(m.data(), m.data() + m.size(), out.data.begin());
  out.normalized = true;
  return out;
}

perceptual::AnomalyMapStack QfaeModel::anomaly_maps(const imaging::ImageTensor& x,
                                                    const perceptual::ScaleSet& scales) const {
  const auto rec = reconstruct(x);
  return perceptual::anomaly_maps(perceptual_.features(x, scales), perceptual_.features(rec, scales));
}

nn::ParamList<float> QfaeModel::trainable_parameters() {
  nn::ParamList<float> out;
  for (auto& p : projections_) p.linear.collect(out);
  for (auto* p : qformer_.parameters()) out.push_back(p);
  for (auto* p : decoder_.parameters()) out.push_back(p);
  return out;
}

NamedTensors QfaeModel::export_trainable() {
  NamedTensors out;
  nn::export_params(trainable_parameters(), out);
  return out;
}

void QfaeModel::import_trainable(const NamedTensors& tensors) { nn::import_params(trainable_parameters(), tensors); }

std::uint64_t QfaeModel::encoder_checksum() const {
  Fnv1a64 h;
  for (const auto& e : encoders_) {
    const std::uint64_t c = e.checksum();
    h.update(std::as_bytes(std::span<const std::uint64_t>(&c, 1)));
  }
  for (const auto& f : frozen_encoders_) {
    const std::uint64_t c = f.recompute_checksum();
    h.update(std::as_bytes(std::span<const std::uint64_t>(&c, 1)));
  }
  return h.digest();
}

std::uint64_t QfaeModel::perceptual_checksum() const {
  Fnv1a64 h;
  const std::uint64_t a = perceptual_.checksum();
  const std::uint64_t b = frozen_perceptual_.recompute_checksum();
  h.update(std::as_bytes(std::span<const std::uint64_t>(&a, 1)));
  h.update(std::as_bytes(std::span<const std::uint64_t>(&b, 1)));
  return h.digest();
}

}  // namespace qfae
