#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qfae/decoder.hpp"
#include "qfae/encoder.hpp"
#include "qfae/imaging.hpp"
#include "qfae/perceptual.hpp"
#include "qfae/qformer.hpp"

namespace qfae {

/// Where a frozen backbone comes from: an archive (+ optional role manifest)
/// or, when toy_seed >= 0, a seeded random toy model.
struct BackboneSource {
  encoder::BackboneSpec spec;
  std::string archive;
  std::string manifest;
  std::int64_t toy_seed = -1;
  int toy_pretrain_grid = 0;

  /// Relative archive paths resolve against archive_dir (or $QFAE_ARCHIVE_DIR).
  encoder::FrozenBackbone load(const std::filesystem::path& archive_dir = {}) const;
  bool operator==(const BackboneSource&) const = default;
};

struct EncoderEntry {
  BackboneSource source;
  int proj_out = 768;
  bool operator==(const EncoderEntry&) const = default;
};

struct ModelConfig {
  int side = 224;
  std::vector<EncoderEntry> encoders;
  qformer::QFormerConfig qformer;
  decoder::DecoderConfig decoder;
  BackboneSource perceptual_model;
  perceptual::PerceptualConfig perceptual;

  /// The full-size configuration: DINOv2 ViT-L/14 (registers) encoder,
  /// 784 queries, 6-layer decoder with 8x8 output patches, MAE ViT-L/16
  /// perceptual model.
  static ModelConfig defaults();
  /// Desk-scale configuration on 64x64 inputs with toy backbones.
  static ModelConfig toy();

  void validate() const;
  int num_queries() const { return qformer::query_count(side, decoder.patch_size); }
  bool operator==(const ModelConfig&) const = default;
};

/// Frozen encoders and perceptual model plus the trainable projection,
/// query bank, Q-Former and decoder.
class QfaeModel {
 public:
  using Features = std::vector<std::vector<ad::Matrix<float>>>;  // [encoder][tap]

  QfaeModel(const ModelConfig& cfg, std::vector<encoder::FrozenBackbone> encoders,
            encoder::FrozenBackbone perceptual_backbone);
  /// Loads (or synthesizes) every frozen backbone named by the config.
  static QfaeModel from_config(const ModelConfig& cfg, const std::filesystem::path& archive_dir = {});

  QfaeModel(const QfaeModel&) = delete;
  QfaeModel& operator=(const QfaeModel&) = delete;
  QfaeModel(QfaeModel&&) noexcept = default;

  /// Seeds every trainable tensor.
  void init(std::uint64_t seed);

  /// Frozen hidden states of a normalized image, per encoder and tap.
  Features encode(const imaging::ImageTensor& x) const;
  /// Context tokens E for cached hidden states (projection is on the tape).
  ad::Var context(ad::Tape<float>& t, const Features& hidden) const;
  /// x~ as a (C*side) x side variable.
  ad::Var reconstruct(ad::Tape<float>& t, const Features& hidden) const;
  imaging::ImageTensor reconstruct(const imaging::ImageTensor& x) const;

  /// Raw maps between x and its reconstruction for the given scales.
  perceptual::AnomalyMapStack anomaly_maps(const imaging::ImageTensor& x, const perceptual::ScaleSet& scales) const;

  nn::ParamList<float> trainable_parameters();
  NamedTensors export_trainable();
  void import_trainable(const NamedTensors& tensors);

  /// Runtime checksums of the frozen parts.
  std::uint64_t encoder_checksum() const;
  std::uint64_t perceptual_checksum() const;

  const ModelConfig& config() const { return cfg_; }
  const std::vector<encoder::VisionTransformer<float>>& encoders() const { return encoders_; }
  const perceptual::PerceptualModel<float>& perceptual_model() const { return perceptual_; }
  const std::vector<encoder::FrozenBackbone>& frozen_encoders() const { return frozen_encoders_; }
  const encoder::FrozenBackbone& frozen_perceptual() const { return frozen_perceptual_; }

  std::vector<encoder::Projection<float>>& projections() { return projections_; }
  qformer::QFormer<float>& qformer() { return qformer_; }
  decoder::Decoder<float>& decoder() { return decoder_; }

 private:
  ModelConfig cfg_;
  std::vector<encoder::FrozenBackbone> frozen_encoders_;
  encoder::FrozenBackbone frozen_perceptual_;
  std::vector<encoder::VisionTransformer<float>> encoders_;
  perceptual::PerceptualModel<float> perceptual_;
  std::vector<encoder::Projection<float>> projections_;
  qformer::QFormer<float> qformer_;
  decoder::Decoder<float> decoder_;
};

}  // namespace qfae
