#include "qfae/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "qfae/errors.hpp"

namespace qfae::synthetic {

imaging::ImageTensor smooth_texture(int side, int waves, std::mt19937_64& rng) {
  if (side <= 0 || waves < 1) throw ValidationError("smooth_texture: side and waves must be positive");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  imaging::ImageTensor img(3, side, side);
  img.colorspace = imaging::ColorSpace::Rgb;

  struct Wave {
    double kx, ky, phase, amp[3];
  };
  std::vector<Wave> ws;
  for (int k = 0; k < waves; ++k) {
    const double freq = 0.5 + 2.0 * u(rng);  // cycles per image
    const double theta = 2.0 * std::numbers::pi * u(rng);
    Wave w;
    w.kx = 2.0 * std::numbers::pi * freq * std::cos(theta) / side;
    w.ky = 2.0 * std::numbers::pi * freq * std::sin(theta) / side;
    w.phase = 2.0 * std::numbers::pi * u(rng);
    for (double& a : w.amp) a = 0.5 + 0.5 * u(rng);
    ws.push_back(w);
  }
  double base[3];
  for (double& b : base) b = 0.35 + 0.3 * u(rng);

  const double norm = 0.35 / static_cast<double>(waves);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        double v = base[c];
        for (const auto& w : ws) v += norm * w.amp[c] * std::sin(w.kx * x + w.ky * y + w.phase);
        img.at(c, y, x) = static_cast<float>(std::clamp(v, 0.15, 0.85));
      }
    }
  }
  return img;
}

std::pair<int, int> insert_square(imaging::ImageTensor& img, int size, std::mt19937_64& rng) {
  if (size <= 0 || size > img.height || size > img.width) throw ValidationError("insert_square: bad square size");
  std::uniform_int_distribution<int> py(0, img.height - size);
  std::uniform_int_distribution<int> px(0, img.width - size);
  const int y0 = py(rng);
  const int x0 = px(rng);
  for (int c = 0; c < img.channels; ++c) {
    double mean = 0.0;
    for (int y = y0; y < y0 + size; ++y)
      for (int x = x0; x < x0 + size; ++x) mean += img.at(c, y, x);
    mean /= static_cast<double>(size * size);
    const float fill = mean > 0.5 ? 0.0f : 1.0f;
    for (int y = y0; y < y0 + size; ++y)
      for (int x = x0; x < x0 + size; ++x) img.at(c, y, x) = fill;
  }
  return {y0, x0};
}

SyntheticCorpus make_corpus(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.n_train < 1 || spec.n_test_normal < 1 || spec.n_test_anomalous < 1) {
    throw ValidationError("synthetic corpus: counts must be positive");
  }
  std::mt19937_64 rng(seed);
  SyntheticCorpus out;
  for (int i = 0; i < spec.n_train; ++i) out.train.push_back(smooth_texture(spec.side, spec.waves, rng));
  char id[64];
  for (int i = 0; i < spec.n_test_normal; ++i) {
    std::snprintf(id, sizeof id, "test/good/%04d.png", i);
    out.test.push_back({id, smooth_texture(spec.side, spec.waves, rng), 0});
    out.masks.emplace_back(1, spec.side, spec.side);
  }
  for (int i = 0; i < spec.n_test_anomalous; ++i) {
    auto img = smooth_texture(spec.side, spec.waves, rng);
    const auto [y0, x0] = insert_square(img, spec.square, rng);
    imaging::ImageTensor mask(1, spec.side, spec.side);
    for (int y = y0; y < y0 + spec.square; ++y)
      for (int x = x0; x < x0 + spec.square; ++x) mask.at(0, y, x) = 1.0f;
    std::snprintf(id, sizeof id, "test/ungood/%04d.png", i);
    out.test.push_back({id, std::move(img), 1});
    out.masks.push_back(std::move(mask));
  }
  return out;
}

void write_dataset(const std::filesystem::path& root, const SyntheticCorpus& corpus) {
  namespace fs = std::filesystem;
  for (const char* d : {"train/good", "test/good", "test/ungood", "test/masks"}) fs::create_directories(root / d);
  evaluation::DatasetIndex idx;
  char name[64];
  for (std::size_t i = 0; i < corpus.train.size(); ++i) {
    std::snprintf(name, sizeof name, "train/good/%04zu.png", i);
    imaging::save_image(root / name, corpus.train[i]);
    idx.train.push_back({name, 0, ""});
  }
  for (std::size_t i = 0; i < corpus.test.size(); ++i) {
    const auto& t = corpus.test[i];
    imaging::save_image(root / t.id, t.image);
    evaluation::DatasetEntry e{t.id, t.label, ""};
    if (t.label == 1) {
      e.mask = "test/masks/" + fs::path(t.id).filename().string();
      imaging::save_image(root / e.mask, corpus.masks[i]);
    }
    idx.test.push_back(std::move(e));
  }
  evaluation::write_index(root, idx);
}

}  // namespace qfae::synthetic
