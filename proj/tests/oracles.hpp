#pragma once

// Slow reference implementations, written independently of the library.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

namespace oracle {

// Half-pixel bilinear sample with clamped borders (upsampling or same size).
inline double bilerp(const Eigen::MatrixXd& m, int out_h, int out_w, int y, int x) {
  auto coord = [](int i, int in, int out) {
    double s = (i + 0.5) * static_cast<double>(in) / out - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  const double sy = coord(y, static_cast<int>(m.rows()), out_h);
  const double sx = coord(x, static_cast<int>(m.cols()), out_w);
  const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
  const int y1 = std::min(y0 + 1, static_cast<int>(m.rows()) - 1);
  const int x1 = std::min(x0 + 1, static_cast<int>(m.cols()) - 1);
  const double ty = sy - y0, tx = sx - x0;
  return (1 - ty) * ((1 - tx) * m(y0, x0) + tx * m(y0, x1)) + ty * ((1 - tx) * m(y1, x0) + tx * m(y1, x1));
}

inline double score_max_then_mean(const std::vector<Eigen::MatrixXd>& maps) {
  double s = 0;
  for (const auto& m : maps) {
    double best = m(0, 0);
    for (int i = 0; i < m.rows(); ++i)
      for (int j = 0; j < m.cols(); ++j) best = std::max(best, m(i, j));
    s += best;
  }
  return s / maps.size();
}

inline double score_mean_then_max(const std::vector<Eigen::MatrixXd>& maps) {
  double best = -1e300;
  for (const auto& m : maps) {
    double s = 0;
    for (int i = 0; i < m.rows(); ++i)
      for (int j = 0; j < m.cols(); ++j) s += m(i, j);
    best = std::max(best, s / (m.rows() * m.cols()));
  }
  return best;
}

// Per-pixel mean or max after upsampling every map to h x w.
inline Eigen::MatrixXd pixel(const std::vector<Eigen::MatrixXd>& maps, int h, int w, bool use_max) {
  Eigen::MatrixXd out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = use_max ? -1e300 : 0.0;
      for (const auto& m : maps) {
        const double v = bilerp(m, h, w, y, x);
        acc = use_max ? std::max(acc, v) : acc + v;
      }
      out(y, x) = use_max ? acc : acc / maps.size();
    }
  }
  return out;
}

// maps[layer][patch]; every map upsampled to the finest grid, multiplied,
// averaged over pixels, then over layers.
inline double hierarchical(const std::vector<std::vector<Eigen::MatrixXd>>& maps) {
  int fh = 0, fw = 0;
  for (const auto& layer : maps)
    for (const auto& m : layer) {
      fh = std::max<int>(fh, m.rows());
      fw = std::max<int>(fw, m.cols());
    }
  double total = 0;
  for (const auto& layer : maps) {
    double s = 0;
    for (int y = 0; y < fh; ++y)
      for (int x = 0; x < fw; ++x) {
        double prod = 1;
        for (const auto& m : layer) prod *= bilerp(m, fh, fw, y, x);
        s += prod;
      }
    total += s / (fh * fw);
  }
  return total / maps.size();
}

// O(n^2) pair counting.
inline double auroc(const std::vector<double>& s, const std::vector<int>& l) {
  double wins = 0, pairs = 0;
  for (size_t i = 0; i < s.size(); ++i)
    for (size_t j = 0; j < s.size(); ++j)
      if (l[i] == 1 && l[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

struct Box {
  int y0, x0, y1, x1;
};

inline std::optional<Box> nonzero_box(const std::vector<float>& img, int h, int w) {
  int y0 = h, x0 = w, y1 = -1, x1 = -1;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (img[y * w + x] != 0.0f) {
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
  if (y1 < 0) return std::nullopt;
  return Box{y0, x0, y1, x1};
}

// Direct 2D Gaussian convolution renormalized over in-bounds taps, radius ceil(3 sigma).
inline std::vector<double> gaussian_blur(const std::vector<double>& img, int h, int w, double sigma) {
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> out(img.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double num = 0, den = 0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          const double k = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
          num += k * img[yy * w + xx];
          den += k;
        }
      out[y * w + x] = num / den;
    }
  return out;
}

inline std::vector<double> bilateral(const std::vector<double>& img, int h, int w, double ss, double rs) {
  const int r = static_cast<int>(std::ceil(3 * ss));
  std::vector<double> out(img.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double num = 0, den = 0;
      const double c = img[y * w + x];
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          const double v = img[yy * w + xx];
          const double k = std::exp(-(dx * dx + dy * dy) / (2 * ss * ss)) * std::exp(-(v - c) * (v - c) / (2 * rs * rs));
          num += k * v;
          den += k;
        }
      out[y * w + x] = num / den;
    }
  return out;
}

}  // namespace oracle
