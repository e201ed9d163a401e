#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "qfae/evaluation.hpp"
#include "qfae/model.hpp"
#include "qfae/tensor_archive.hpp"
#include "qfae/training.hpp"

namespace qfae {

/// Everything a CLI run needs. Model-side perceptual settings live in
/// model.perceptual; the evaluation profile adds preprocessing on top.
struct RunConfig {
  ModelConfig model = ModelConfig::defaults();
  training::TrainConfig train;
  std::string eval_profile = "brats";
  bool eval_liver_roi = false;
  bool eval_bilateral = false;
  imaging::BilateralParams bilateral;
  std::uint64_t seed = 42;
  std::string out = "runs";
  std::string archive_dir;

  /// Desk-scale configuration: toy backbones on 64x64 synthetic textures.
  static RunConfig toy();

  evaluation::EvalProfile profile() const;
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

/// Config text: one `key = value` per line, values in JSON syntax (bare words
/// are read as strings), `[section]` headers prefix the keys that follow, `#`
/// starts a comment. Setting eval.profile first applies that profile's
/// defaults; explicit keys override them. Unknown keys are an error.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config(const std::filesystem::path& path);
std::string serialize_config(const RunConfig& cfg);

/// Applies one `key = value` override (same rules as a config line).
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);

struct Checkpoint {
  RunConfig config;
  TensorArchive archive;
};

Checkpoint read_checkpoint(const std::filesystem::path& path);
/// Builds the model from the embedded config and loads the trained tensors.
QfaeModel load_model(const Checkpoint& ckpt, const std::filesystem::path& archive_dir = {});

}  // namespace qfae
