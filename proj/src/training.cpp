#include "qfae/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <thread>
#include <unordered_map>

#include "json.hpp"

#include "qfae/errors.hpp"

namespace qfae::training {

std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::Perceptual: return "perceptual";
    case LossMode::Mae: return "mae";
    case LossMode::MaePerceptual: return "mae+perceptual";
  }
  return "perceptual";
}

LossMode parse_loss_mode(const std::string& s) {
  if (s == "perceptual") return LossMode::Perceptual;
  if (s == "mae") return LossMode::Mae;
  if (s == "mae+perceptual") return LossMode::MaePerceptual;
  throw ValidationError("unknown loss mode '" + s + "' (expected perceptual, mae or mae+perceptual)");
}

// ------------------------------------------------------------------ schedule

namespace {

double cos_anneal(double start, double end, double pct) {
  if (pct <= 0.0) return start;
  if (pct >= 1.0) return end;
  return end + (start - end) / 2.0 * (1.0 + std::cos(std::numbers::pi * pct));
}

}  // namespace

void OneCycle::validate() const {
  if (total_steps < 1) throw ValidationError("onecycle: total_steps must be >= 1");
  if (!(max_lr > 0.0)) throw ValidationError("onecycle: max_lr must be positive");
  if (!(pct_start > 0.0 && pct_start < 1.0)) throw ValidationError("onecycle: pct_start must lie in (0,1)");
  if (!(div_factor > 0.0) || !(final_div_factor > 0.0)) throw ValidationError("onecycle: div factors must be positive");
}

double OneCycle::operator()(long step) const {
  validate();
  if (step < 0 || step >= total_steps) {
    throw ValidationError("onecycle: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + ")");
  }
  const double initial = max_lr / div_factor;
  const double min_lr = initial / final_div_factor;
  const double s = static_cast<double>(step);
  const double peak = pct_start * static_cast<double>(total_steps);
  const double last = static_cast<double>(total_steps - 1);
  if (s <= peak) {
    return peak > 0.0 ? cos_anneal(initial, max_lr, s / peak) : max_lr;
  }
  if (last <= peak) return max_lr;
  return cos_anneal(max_lr, min_lr, (s - peak) / (last - peak));
}

double onecycle_lr(long step, long total_steps, double max_lr) {
  OneCycle sched;
  sched.total_steps = total_steps;
  sched.max_lr = max_lr;
  return sched(step);
}

// ---------------------------------------------------------------------- adam

Adam::Adam(nn::ParamList<float> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto* p : params_) {
    m_.push_back(ad::Matrix<double>::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(ad::Matrix<double>::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step(const std::vector<ad::Matrix<float>>& grads, double lr) {
  if (grads.size() != params_.size()) throw ValidationError("adam: gradient count does not match parameters");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& w = params_[i]->value;
    auto& m = m_[i];
    auto& v = v_[i];
    const auto& g = grads[i];
    for (Eigen::Index k = 0; k < w.size(); ++k) {
      double gk = static_cast<double>(g.data()[k]);
      if (cfg_.weight_decay != 0.0) gk += cfg_.weight_decay * static_cast<double>(w.data()[k]);
      m.data()[k] = cfg_.beta1 * m.data()[k] + (1.0 - cfg_.beta1) * gk;
      v.data()[k] = cfg_.beta2 * v.data()[k] + (1.0 - cfg_.beta2) * gk * gk;
      const double mh = m.data()[k] / bc1;
      const double vh = v.data()[k] / bc2;
      w.data()[k] = static_cast<float>(static_cast<double>(w.data()[k]) - lr * mh / (std::sqrt(vh) + cfg_.eps));
    }
  }
}

// -------------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (epochs < 1) throw ValidationError("train.epochs must be >= 1");
  if (batch < 1) throw ValidationError("train.batch must be >= 1");
  if (!(max_lr > 0.0) || !std::isfinite(max_lr)) throw ValidationError("optimizer.max_lr must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ValidationError("optimizer betas must lie in [0,1)");
  }
  if (!(adam.eps > 0.0)) throw ValidationError("optimizer.eps must be positive");
  if (adam.weight_decay < 0.0) throw ValidationError("optimizer.weight_decay must be >= 0");
  if (seeds.empty()) throw ValidationError("train.seeds must not be empty");
  if (max_steps < 0) throw ValidationError("train.max_steps must be >= 0");
  if (workers < 1) throw ValidationError("train.workers must be >= 1");
  OneCycle{1, max_lr, pct_start, div_factor, final_div_factor}.validate();
  augmentation.validate();
}

long TrainConfig::total_steps(std::size_t corpus_size) const {
  if (max_steps > 0) return max_steps;
  const long per_epoch = static_cast<long>((corpus_size + static_cast<std::size_t>(batch) - 1) / static_cast<std::size_t>(batch));
  return per_epoch * epochs;
}

std::string to_jsonl(const LogRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["lr"] = r.lr;
  j["loss"] = r.loss;
  j["wall_ms"] = r.wall_ms;
  return j.dump();
}

// --------------------------------------------------------------------- train

ad::Var sample_loss(ad::Tape<float>& t, const QfaeModel& model, const QfaeModel::Features& hidden,
                    const imaging::ImageTensor& x, const perceptual::FeaturePyramid<float>* target, LossMode mode) {
  const ad::Var rec = model.reconstruct(t, hidden);
  const auto& pc = model.config().perceptual;
  ad::Var mae, perc;
  if (mode != LossMode::Perceptual) mae = t.mean_abs_diff(rec, t.constant(encoder::image_matrix<float>(x)));
  if (mode != LossMode::Mae) {
    if (target == nullptr) throw ValidationError("sample_loss: perceptual loss needs target features");
    perc = perceptual::perceptual_loss(t, model.perceptual_model(), *target, rec, pc.train, pc.loss_form);
  }
  if (mode == LossMode::Mae) return mae;
  if (mode == LossMode::Perceptual) return perc;
  return t.add(mae, perc);
}

namespace {

struct Sample {
  imaging::ImageTensor x;
  QfaeModel::Features hidden;
  perceptual::FeaturePyramid<float> target;
};

Sample make_sample(const QfaeModel& model, const TrainConfig& cfg, const imaging::ImageTensor& raw, bool augment,
                   std::mt19937_64* rng) {
  Sample s;
  const int side = model.config().side;
  if (augment) {
    s.x = imaging::augment(raw, cfg.augmentation, side, *rng);
  } else {
    s.x = imaging::normalize(imaging::prepare(raw, side), cfg.augmentation.norm_mean, cfg.augmentation.norm_std);
  }
  s.hidden = model.encode(s.x);
  if (cfg.loss != LossMode::Mae) s.target = model.perceptual_model().features(s.x, model.config().perceptual.train);
  return s;
}

struct Accumulator {
  std::vector<ad::Matrix<float>> grads;
  double loss = 0.0;
  bool finite = true;
};

}  // namespace

TrainResult train(const TrainConfig& cfg, std::uint64_t seed, const Corpus& corpus, QfaeModel& model,
                  const StepCallback& on_step) {
  cfg.validate();
  if (corpus.empty()) throw ValidationError("train: corpus is empty");
  model.config().validate();

  TrainResult result;
  result.encoder_checksum_before = model.encoder_checksum();
  result.perceptual_checksum_before = model.perceptual_checksum();

  const nn::ParamList<float> params = model.trainable_parameters();
  std::unordered_map<const ad::Param<float>*, std::size_t> slot;
  for (std::size_t i = 0; i < params.size(); ++i) slot[params[i]] = i;
  Adam adam(params, cfg.adam);

  const long total = cfg.total_steps(corpus.size());
  const OneCycle sched{total, cfg.max_lr, cfg.pct_start, cfg.div_factor, cfg.final_div_factor};

  std::vector<Sample> cache;
  if (!cfg.augment) {
    cache.reserve(corpus.size());
    for (const auto& img : corpus) cache.push_back(make_sample(model, cfg, img, false, nullptr));
  }

  std::mt19937_64 order_rng(seed);
  std::vector<std::size_t> order(corpus.size());
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t nworkers = static_cast<std::size_t>(cfg.workers);

  long step = 0;
  long epoch = 0;
  while (step < total) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), order_rng);

    for (std::size_t begin = 0; begin < order.size() && step < total; begin += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch));
      const std::size_t n = end - begin;

      std::vector<Accumulator> acc(std::min(nworkers, n));
      auto work = [&](std::size_t w) {
        Accumulator& a = acc[w];
        for (const auto* p : params) a.grads.push_back(ad::Matrix<float>::Zero(p->value.rows(), p->value.cols()));
        for (std::size_t k = begin + w; k < end; k += acc.size()) {
          const std::size_t idx = order[k];
          Sample local;
          const Sample* s;
          if (cfg.augment) {
            std::seed_seq ss{seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(idx)};
            std::mt19937_64 rng(ss);
            local = make_sample(model, cfg, corpus[idx], true, &rng);
            s = &local;
          } else {
            s = &cache[idx];
          }
          ad::Tape<float> tape;
          const ad::Var loss = sample_loss(tape, model, s->hidden, s->x, &s->target, cfg.loss);
          const double lv = static_cast<double>(tape.value(loss)(0, 0));
          if (!std::isfinite(lv)) {
            a.finite = false;
            return;
          }
          a.loss += lv;
          tape.backward(loss);
          for (const auto& [p, g] : tape.param_grads()) {
            auto it = slot.find(p);
            if (it != slot.end()) a.grads[it->second] += g;
          }
        }
      };
      if (acc.size() == 1) {
        work(0);
      } else {
        std::vector<std::thread> threads;
        for (std::size_t w = 0; w < acc.size(); ++w) threads.emplace_back(work, w);
        for (auto& th : threads) th.join();
      }

      double loss = 0.0;
      std::vector<ad::Matrix<float>> grads = std::move(acc[0].grads);
      for (std::size_t w = 0; w < acc.size(); ++w) {
        if (!acc[w].finite) throw NumericalError(step, "non-finite loss at step " + std::to_string(step));
        loss += acc[w].loss;
        if (w > 0) {
          for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += acc[w].grads[i];
        }
      }
      loss /= static_cast<double>(n);
      const float inv = 1.0f / static_cast<float>(n);
      for (auto& g : grads) {
        g *= inv;
        if (!g.allFinite()) throw NumericalError(step, "non-finite gradient at step " + std::to_string(step));
      }

      const double lr = sched(step);
      adam.step(grads, lr);

      LogRecord rec;
      rec.step = step;
      rec.lr = lr;
      rec.loss = loss;
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      result.log.push_back(rec);
      if (on_step) on_step(rec);
      ++step;
    }
    ++epoch;
  }

  result.final_loss = result.log.empty() ? 0.0 : result.log.back().loss;
  result.encoder_checksum_after = model.encoder_checksum();
  result.perceptual_checksum_after = model.perceptual_checksum();
  if (!result.frozen_intact()) throw std::runtime_error("frozen backbone weights changed during training");
  return result;
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

TensorArchive make_checkpoint(QfaeModel& model, const TrainResult& result, const std::string& config_text) {
  TensorArchive ar;
  ar.tensors = model.export_trainable();
  ar.metadata["format"] = "qfae-checkpoint";
  ar.metadata["config"] = config_text;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", result.final_loss);
  ar.metadata["final_loss"] = buf;
  ar.metadata["steps"] = std::to_string(result.log.size());
  ar.metadata["encoder_checksum"] = hex64(result.encoder_checksum_after);
  ar.metadata["perceptual_checksum"] = hex64(result.perceptual_checksum_after);
  return ar;
}

}  // namespace qfae::training
