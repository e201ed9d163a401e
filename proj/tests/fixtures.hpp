#pragma once

#include <random>

#include "qfae/imaging.hpp"
#include "qfae/model.hpp"

namespace fixture {

// Smaller than the toy preset so unit tests stay fast: 16x16 inputs.
inline qfae::ModelConfig micro_config() {
  auto c = qfae::ModelConfig::toy();
  c.side = 16;
  auto& e = c.encoders[0];
  e.source.spec.depth = 2;
  e.source.spec.width = 16;
  e.source.spec.heads = 2;
  e.source.spec.patch_size = 4;
  e.source.spec.tap_layers = {0, 1};
  e.source.toy_pretrain_grid = 4;
  e.proj_out = 16;
  c.qformer = {16, 2, 2.0, 1};
  c.decoder = {16, 1, 2, 2.0, 4, 3};
  c.perceptual_model.spec.depth = 2;
  c.perceptual_model.spec.width = 16;
  c.perceptual_model.spec.heads = 2;
  c.perceptual_model.spec.patch_size = 4;
  c.perceptual_model.toy_pretrain_grid = 4;
  c.perceptual.train = {{0, 1}, {4, 8}};
  c.perceptual.eval = {{0, 1}, {4, 8}};
  return c;
}

inline qfae::imaging::ImageTensor smooth_image(int side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double fy = 0.5 + 2 * u(rng), fx = 0.5 + 2 * u(rng), ph = 6.28 * u(rng);
  qfae::imaging::ImageTensor img(3, side, side);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x)
        img.at(c, y, x) = static_cast<float>(0.5 + 0.3 * std::sin(6.28 * (fy * y + fx * x) / side + ph + c));
  return img;
}

inline std::vector<qfae::imaging::ImageTensor> smooth_corpus(int n, int side, std::uint64_t seed) {
  std::vector<qfae::imaging::ImageTensor> out;
  for (int i = 0; i < n; ++i) out.push_back(smooth_image(side, seed * 1000 + static_cast<std::uint64_t>(i)));
  return out;
}

}  // namespace fixture
