#include "qfae/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "qfae/errors.hpp"

namespace qfae::imaging {

ImageTensor::ImageTensor(int c, int h, int w, float fill)
    : channels(c),
      height(h),
      width(w),
      data(static_cast<std::size_t>(c) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill),
      colorspace(c == 3 ? ColorSpace::Rgb : ColorSpace::Gray) {}

void ImageTensor::validate() const {
  if (height <= 0 || width <= 0) throw ValidationError("image has zero area");
  if (channels != 1 && channels != 3) throw ValidationError("image must have 1 or 3 channels");
  if (data.size() != static_cast<std::size_t>(channels) * height * width) {
    throw ValidationError("image data size does not match its shape");
  }
  if (!normalized) {
    for (float v : data) {
      if (!(v >= 0.0f && v <= 1.0f)) throw ValidationError("unnormalized image has values outside [0,1]");
    }
  }
}

void AugmentConfig::validate() const {
  if (!(crop_scale_min > 0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0)) {
    throw ValidationError("augment: crop_scale must be a nonempty range within (0,1]");
  }
  if (!(crop_aspect_min > 0 && crop_aspect_min <= crop_aspect_max)) {
    throw ValidationError("augment: crop_aspect must be a nonempty positive range");
  }
  if (rotation_deg < 0) throw ValidationError("augment: rotation_deg must be >= 0");
  if (!(vflip_prob >= 0 && vflip_prob <= 1)) throw ValidationError("augment: vflip_prob must be in [0,1]");
  if (!(brightness >= 0 && brightness < 1) || !(contrast >= 0 && contrast < 1)) {
    throw ValidationError("augment: jitter factors must be in [0,1)");
  }
  if (!(norm_std > 0)) throw ValidationError("augment: norm_std must be positive");
}

AugmentConfig AugmentConfig::identity() {
  AugmentConfig c;
  c.crop_scale_min = c.crop_scale_max = 1.0;
  c.crop_aspect_min = c.crop_aspect_max = 1.0;
  c.rotation_deg = 0.0;
  c.vflip_prob = 0.0;
  c.brightness = 0.0;
  c.contrast = 0.0;
  return c;
}

// ----------------------------------------------------------------- resampling

Eigen::MatrixXd bilinear_weights(int in_size, int out_size) {
  if (in_size <= 0 || out_size <= 0) throw ValidationError("resize: sizes must be positive");
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(out_size, in_size);
  const double scale = static_cast<double>(in_size) / out_size;
  const double filterscale = std::max(scale, 1.0);
  const double support = filterscale;
  for (int i = 0; i < out_size; ++i) {
    const double center = (i + 0.5) * scale;
    const int lo = std::max(static_cast<int>(std::floor(center - support + 0.5)), 0);
    const int hi = std::min(static_cast<int>(std::floor(center + support + 0.5)), in_size);
    double total = 0.0;
    for (int j = lo; j < hi; ++j) {
      const double x = std::abs((j + 0.5 - center) / filterscale);
      const double v = x < 1.0 ? 1.0 - x : 0.0;
      w(i, j) = v;
      total += v;
    }
    if (total > 0) w.row(i) /= total;
  }
  return w;
}

Eigen::MatrixXd bicubic_weights(int in_size, int out_size) {
  if (in_size <= 0 || out_size <= 0) throw ValidationError("resize: sizes must be positive");
  constexpr double a = -0.75;
  auto near = [](double x) { return ((a + 2) * x - (a + 3)) * x * x + 1; };       // |x| <= 1
  auto far = [](double x) { return ((a * x - 5 * a) * x + 8 * a) * x - 4 * a; };  // 1 < |x| < 2
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(out_size, in_size);
  const double scale = static_cast<double>(in_size) / out_size;
  for (int i = 0; i < out_size; ++i) {
    const double src = (i + 0.5) * scale - 0.5;
    const int x0 = static_cast<int>(std::floor(src));
    const double t = src - x0;
    const double coeffs[4] = {far(t + 1), near(t), near(1 - t), far(2 - t)};
    for (int k = 0; k < 4; ++k) {
      const int j = std::clamp(x0 - 1 + k, 0, in_size - 1);
      w(i, j) += coeffs[k];
    }
  }
  return w;
}

Eigen::MatrixXd resample_plane(const Eigen::MatrixXd& plane, const Eigen::MatrixXd& row_weights,
                               const Eigen::MatrixXd& col_weights) {
  return row_weights * plane * col_weights.transpose();
}

namespace {

using PlaneD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

PlaneD plane_of(const ImageTensor& img, int c, int y0, int x0, int h, int w) {
  PlaneD p(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) p(y, x) = img.at(c, y0 + y, x0 + x);
  return p;
}

// Resamples the region [y0, y0+h) x [x0, x0+w) to out_h x out_w.
ImageTensor resize_region(const ImageTensor& img, int y0, int x0, int h, int w, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw ValidationError("resize: target size must be positive");
  ImageTensor out(img.channels, out_h, out_w);
  out.colorspace = img.colorspace;
  out.normalized = img.normalized;
  if (h == out_h && w == out_w) {
    for (int c = 0; c < img.channels; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
    return out;
  }
  const Eigen::MatrixXd rw = bilinear_weights(h, out_h);
  const Eigen::MatrixXd cw = bilinear_weights(w, out_w);
  for (int c = 0; c < img.channels; ++c) {
    const PlaneD r = rw * plane_of(img, c, y0, x0, h, w) * cw.transpose();
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x) out.at(c, y, x) = static_cast<float>(r(y, x));
  }
  return out;
}

void clamp_unit(ImageTensor& img) {
  for (float& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
}

ImageTensor rotate(const ImageTensor& img, double degrees) {
  ImageTensor out(img.channels, img.height, img.width, 0.0f);
  out.colorspace = img.colorspace;
  out.normalized = img.normalized;
  const double th = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  const double cy = (img.height - 1) / 2.0, cx = (img.width - 1) / 2.0;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      // inverse map: rotate the destination point back into the source
      const double dx = x - cx, dy = y - cy;
      const double sx = cs * dx + sn * dy + cx;
      const double sy = -sn * dx + cs * dy + cy;
      const int ix = static_cast<int>(std::floor(sx)), iy = static_cast<int>(std::floor(sy));
      const double fx = sx - ix, fy = sy - iy;
      for (int c = 0; c < img.channels; ++c) {
        auto px = [&](int yy, int xx) -> double {
          if (yy < 0 || yy >= img.height || xx < 0 || xx >= img.width) return 0.0;
          return img.at(c, yy, xx);
        };
        const double v = (1 - fy) * ((1 - fx) * px(iy, ix) + fx * px(iy, ix + 1)) +
                         fy * ((1 - fx) * px(iy + 1, ix) + fx * px(iy + 1, ix + 1));
        out.at(c, y, x) = static_cast<float>(v);
      }
    }
  }
  return out;
}

}  // namespace

ImageTensor resize(const ImageTensor& img, int out_h, int out_w) {
  return resize_region(img, 0, 0, img.height, img.width, out_h, out_w);
}

// ---------------------------------------------------------------- operations

ImageTensor to_rgb(const ImageTensor& img) {
  if (img.channels == 3) return img;
  if (img.channels != 1) throw ValidationError("to_rgb: expected 1 or 3 channels");
  ImageTensor out(3, img.height, img.width);
  out.normalized = img.normalized;
  const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
  for (int c = 0; c < 3; ++c) std::copy(img.data.begin(), img.data.end(), out.data.begin() + c * plane);
  return out;
}

ImageTensor prepare(const ImageTensor& img, int side) {
  img.validate();
  if (side <= 0) throw ValidationError("side must be positive");
  return to_rgb(resize(img, side, side));
}

ImageTensor load_and_resize(const std::filesystem::path& path, int side) { return prepare(load_image(path), side); }

ImageTensor normalize(const ImageTensor& img, double mean, double stddev) {
  if (!(stddev > 0)) throw ValidationError("normalize: std must be positive");
  if (img.normalized) throw ValidationError("normalize: image is already normalized");
  ImageTensor out = img;
  for (float& v : out.data) v = static_cast<float>((static_cast<double>(v) - mean) / stddev);
  out.normalized = true;
  return out;
}

ImageTensor denormalize(const ImageTensor& img, double mean, double stddev) {
  ImageTensor out = img;
  for (float& v : out.data) v = static_cast<float>(static_cast<double>(v) * stddev + mean);
  out.normalized = false;
  return out;
}

std::shared_ptr<const std::vector<Eigen::Index>> patchify_index(int channels, int height, int width, int p) {
  if (p <= 0 || height % p != 0 || width % p != 0) {
    throw ValidationError("patch size " + std::to_string(p) + " does not divide " + std::to_string(height) + "x" +
                          std::to_string(width));
  }
  const int gh = height / p, gw = width / p;
  auto idx = std::make_shared<std::vector<Eigen::Index>>();
  idx->reserve(static_cast<std::size_t>(channels) * height * width);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx)
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          for (int c = 0; c < channels; ++c) {
            const int y = gy * p + py, x = gx * p + px;
            idx->push_back((static_cast<Eigen::Index>(c) * height + y) * width + x);
          }
  return idx;
}

std::shared_ptr<const std::vector<Eigen::Index>> unpatchify_index(const PatchGrid& g) {
  const auto fwd = patchify_index(g.channels, g.height(), g.width(), g.patch_size);
  auto inv = std::make_shared<std::vector<Eigen::Index>>(fwd->size());
  for (std::size_t i = 0; i < fwd->size(); ++i) (*inv)[static_cast<std::size_t>((*fwd)[i])] = static_cast<Eigen::Index>(i);
  return inv;
}

std::pair<TokenSequence, PatchGrid> patchify(const ImageTensor& img, int patch_size) {
  const auto idx = patchify_index(img.channels, img.height, img.width, patch_size);
  PatchGrid g{patch_size, img.height / patch_size, img.width / patch_size, img.channels};
  TokenSequence tokens(g.tokens(), g.token_dim());
  float* dst = tokens.data();
  for (std::size_t i = 0; i < idx->size(); ++i) dst[i] = img.data[static_cast<std::size_t>((*idx)[i])];
  return {std::move(tokens), g};
}

ImageTensor unpatchify(const TokenSequence& tokens, const PatchGrid& g) {
  if (g.patch_size <= 0 || g.grid_h <= 0 || g.grid_w <= 0 || (g.channels != 1 && g.channels != 3)) {
    throw ValidationError("unpatchify: invalid grid");
  }
  if (tokens.rows() != g.tokens() || tokens.cols() != g.token_dim()) {
    throw ValidationError("unpatchify: expected " + std::to_string(g.tokens()) + "x" + std::to_string(g.token_dim()) +
                          " tokens, got " + std::to_string(tokens.rows()) + "x" + std::to_string(tokens.cols()));
  }
  const auto idx = patchify_index(g.channels, g.height(), g.width(), g.patch_size);
  ImageTensor out(g.channels, g.height(), g.width());
  const float* src = tokens.data();
  for (std::size_t i = 0; i < idx->size(); ++i) out.data[static_cast<std::size_t>((*idx)[i])] = src[i];
  return out;
}

ImageTensor augment(const ImageTensor& img, const AugmentConfig& cfg, int side, std::mt19937_64& rng) {
  cfg.validate();
  img.validate();
  if (img.normalized) throw ValidationError("augment: expects an unnormalized image");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  // Random resized crop; scale is an area fraction, aspect is relative to the
  // source aspect ratio, sampled log-uniformly.
  const double s = uniform(cfg.crop_scale_min, cfg.crop_scale_max);
  const double r = std::exp(uniform(std::log(cfg.crop_aspect_min), std::log(cfg.crop_aspect_max)));
  const int cw = std::clamp(static_cast<int>(std::lround(img.width * std::sqrt(s * r))), 1, img.width);
  const int ch = std::clamp(static_cast<int>(std::lround(img.height * std::sqrt(s / r))), 1, img.height);
  const int x0 = static_cast<int>(std::floor(unit(rng) * (img.width - cw + 1)));
  const int y0 = static_cast<int>(std::floor(unit(rng) * (img.height - ch + 1)));
  ImageTensor out = to_rgb(resize_region(img, std::min(y0, img.height - ch), std::min(x0, img.width - cw), ch, cw, side, side));

  const double angle = uniform(-cfg.rotation_deg, cfg.rotation_deg);
  if (angle != 0.0) out = rotate(out, angle);

  if (unit(rng) < cfg.vflip_prob) {
    ImageTensor flipped = out;
    for (int c = 0; c < out.channels; ++c)
      for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) flipped.at(c, y, x) = out.at(c, out.height - 1 - y, x);
    out = std::move(flipped);
  }

  const double b = uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness);
  const double k = uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast);
  if (b != 1.0) {
    for (float& v : out.data) v = static_cast<float>(v * b);
    clamp_unit(out);
  }
  if (k != 1.0) {
    double mean = 0.0;
    for (float v : out.data) mean += v;
    mean /= static_cast<double>(out.data.size());
    for (float& v : out.data) v = static_cast<float>(k * v + (1.0 - k) * mean);
    clamp_unit(out);
  }
  return normalize(out, cfg.norm_mean, cfg.norm_std);
}

std::optional<BoundingBox> nonzero_bbox(const ImageTensor& img) {
  std::optional<BoundingBox> box;
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        if (img.at(c, y, x) == 0.0f) continue;
        if (!box) {
          box = BoundingBox{y, x, y, x};
        } else {
          box->y0 = std::min(box->y0, y);
          box->x0 = std::min(box->x0, x);
          box->y1 = std::max(box->y1, y);
          box->x1 = std::max(box->x1, x);
        }
      }
  return box;
}

RoiResult liver_roi_preprocess(const ImageTensor& img, int side,
                               const std::function<ImageTensor(const ImageTensor&)>& crop_hook) {
  img.validate();
  if (img.channels != 1) throw ValidationError("liver ROI preprocessing expects a single-channel image");
  if (side <= 0) throw ValidationError("side must be positive");

  RoiResult result;
  result.image = ImageTensor(1, side, side, 0.0f);
  result.bbox = nonzero_bbox(img);
  if (!result.bbox) {
    result.warning = "all-zero slice: returning a black canvas";
    return result;
  }
  const BoundingBox& b = *result.bbox;
  ImageTensor crop = resize_region(img, b.y0, b.x0, b.height(), b.width(), b.height(), b.width());
  if (crop_hook) crop = crop_hook(crop);

  if (crop.height > side || crop.width > side) {
    const double s = std::min(static_cast<double>(side) / crop.height, static_cast<double>(side) / crop.width);
    const int nh = std::clamp(static_cast<int>(std::lround(crop.height * s)), 1, side);
    const int nw = std::clamp(static_cast<int>(std::lround(crop.width * s)), 1, side);
    crop = resize(crop, nh, nw);
    result.scaled = true;
  }
  const int oy = (side - crop.height) / 2, ox = (side - crop.width) / 2;
  for (int y = 0; y < crop.height; ++y)
    for (int x = 0; x < crop.width; ++x) result.image.at(0, oy + y, ox + x) = crop.at(0, y, x);
  return result;
}

ImageTensor bilateral_filter(const ImageTensor& img, double spatial_sigma, double range_sigma) {
  if (!(spatial_sigma > 0) || !(range_sigma > 0)) throw ValidationError("bilateral filter: sigmas must be positive");
  img.validate();
  const int radius = static_cast<int>(std::ceil(3.0 * spatial_sigma));
  std::vector<double> spatial(static_cast<std::size_t>((2 * radius + 1) * (2 * radius + 1)));
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      spatial[static_cast<std::size_t>((dy + radius) * (2 * radius + 1) + dx + radius)] =
          std::exp(-(dx * dx + dy * dy) / (2.0 * spatial_sigma * spatial_sigma));
  const double inv_2r2 = 1.0 / (2.0 * range_sigma * range_sigma);

  ImageTensor out = img;
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const double center = img.at(c, y, x);
        double num = 0.0, den = 0.0;
        for (int dy = -radius; dy <= radius; ++dy) {
          const int yy = y + dy;
          if (yy < 0 || yy >= img.height) continue;
          for (int dx = -radius; dx <= radius; ++dx) {
            const int xx = x + dx;
            if (xx < 0 || xx >= img.width) continue;
            const double v = img.at(c, yy, xx);
            const double d = v - center;
            const double w = spatial[static_cast<std::size_t>((dy + radius) * (2 * radius + 1) + dx + radius)] *
                             std::exp(-d * d * inv_2r2);
            num += w * v;
            den += w;
          }
        }
        out.at(c, y, x) = static_cast<float>(num / den);
      }
  return out;
}

}  // namespace qfae::imaging
