#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qfae/imaging.hpp"
#include "qfae/model.hpp"
#include "qfae/tensor_archive.hpp"

namespace qfae::training {

enum class LossMode { Perceptual, Mae, MaePerceptual };

std::string to_string(LossMode m);
LossMode parse_loss_mode(const std::string& s);

struct OneCycle {
  long total_steps = 1;
  double max_lr = 8e-5;
  double pct_start = 0.3;
  double div_factor = 25.0;
  double final_div_factor = 1e4;

  /// Cosine warm-up from max_lr/div_factor to max_lr over the first
  /// pct_start of the steps, then cosine decay to max_lr/final_div_factor.
  double operator()(long step) const;
  void validate() const;
};

double onecycle_lr(long step, long total_steps, double max_lr);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  bool operator==(const AdamConfig&) const = default;
};

class Adam {
 public:
  Adam(nn::ParamList<float> params, AdamConfig cfg);

  /// grads[i] belongs to params[i].
  void step(const std::vector<ad::Matrix<float>>& grads, double lr);
  long steps() const { return t_; }

 private:
  nn::ParamList<float> params_;
  AdamConfig cfg_;
  std::vector<ad::Matrix<double>> m_;
  std::vector<ad::Matrix<double>> v_;
  long t_ = 0;
};

struct TrainConfig {
  int epochs = 300;
  int batch = 64;
  double max_lr = 8e-5;
  AdamConfig adam;
  double pct_start = 0.3;
  double div_factor = 25.0;
  double final_div_factor = 1e4;
  std::vector<std::uint64_t> seeds{42, 7, 13, 65, 91};
  LossMode loss = LossMode::Perceptual;
  bool augment = true;
  imaging::AugmentConfig augmentation;
  long max_steps = 0;  // 0: epochs * ceil(N / batch)
  int workers = 1;

  void validate() const;
  long total_steps(std::size_t corpus_size) const;
  bool operator==(const TrainConfig&) const = default;
};

struct LogRecord {
  long step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double wall_ms = 0.0;
};

std::string to_jsonl(const LogRecord& r);

struct TrainResult {
  std::vector<LogRecord> log;
  double final_loss = 0.0;
  std::uint64_t encoder_checksum_before = 0;
  std::uint64_t encoder_checksum_after = 0;
  std::uint64_t perceptual_checksum_before = 0;
  std::uint64_t perceptual_checksum_after = 0;

  bool frozen_intact() const {
    return encoder_checksum_before == encoder_checksum_after &&
           perceptual_checksum_before == perceptual_checksum_after;
  }
};

/// Normal training images at the model side, RGB in [0,1], not normalized.
using Corpus = std::vector<imaging::ImageTensor>;

/// Per-sample loss on one tape. x is the normalized target image.
ad::Var sample_loss(ad::Tape<float>& t, const QfaeModel& model, const QfaeModel::Features& hidden,
                    const imaging::ImageTensor& x, const perceptual::FeaturePyramid<float>* target, LossMode mode);

using StepCallback = std::function<void(const LogRecord&)>;

/// Optimizes the trainable parts of an initialized model in place.
TrainResult train(const TrainConfig& cfg, std::uint64_t seed, const Corpus& corpus, QfaeModel& model,
                  const StepCallback& on_step = {});

/// Trainable tensors plus metadata: the config text, final loss and frozen
/// checksums (hex).
TensorArchive make_checkpoint(QfaeModel& model, const TrainResult& result, const std::string& config_text);

}  // namespace qfae::training
