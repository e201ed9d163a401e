#include "qfae/perceptual.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "qfae/checksum.hpp"
#include "qfae/errors.hpp"

namespace qfae::perceptual {

std::string to_string(ScoreMode m) { return m == ScoreMode::MaxThenMean ? "max_then_mean" : "mean_then_max"; }
std::string to_string(MapMode m) { return m == MapMode::Mean ? "mean" : "max"; }
std::string to_string(LossForm f) { return f == LossForm::Hierarchical ? "hierarchical" : "simple"; }

ScoreMode parse_score_mode(const std::string& s) {
  if (s == "max_then_mean") return ScoreMode::MaxThenMean;
  if (s == "mean_then_max") return ScoreMode::MeanThenMax;
  throw ValidationError("unknown score mode '" + s + "' (expected max_then_mean or mean_then_max)");
}

MapMode parse_map_mode(const std::string& s) {
  if (s == "mean") return MapMode::Mean;
  if (s == "max") return MapMode::Max;
  throw ValidationError("unknown map mode '" + s + "' (expected mean or max)");
}

LossForm parse_loss_form(const std::string& s) {
  if (s == "hierarchical") return LossForm::Hierarchical;
  if (s == "simple") return LossForm::Simple;
  throw ValidationError("unknown loss form '" + s + "' (expected hierarchical or simple)");
}

void ScaleSet::validate(int side, int depth) const {
  if (layers.empty()) throw ValidationError("perceptual: layer set must be nonempty");
  if (patch_sizes.empty()) throw ValidationError("perceptual: patch size set must be nonempty");
  for (int i : layers) {
    if (i < 0 || (depth > 0 && i >= depth)) {
      throw ValidationError("perceptual: layer " + std::to_string(i) + " outside the model depth");
    }
  }
  for (int p : patch_sizes) {
    if (p <= 0 || (side > 0 && side % p != 0)) {
      throw ValidationError("perceptual: patch size " + std::to_string(p) + " does not divide input side " +
                            std::to_string(side));
    }
  }
}

void PerceptualConfig::validate(int side, int depth) const {
  train.validate(side, depth);
  eval.validate(side, depth);
}

std::vector<FeatureKey> scale_keys(const ScaleSet& scales) {
  std::vector<FeatureKey> keys;
  for (int i : scales.layers)
    for (int p : scales.patch_sizes) keys.push_back({i, p});
  return keys;
}

// ------------------------------------------------------------------- model

template <typename T>
PerceptualModel<T>::PerceptualModel(const encoder::FrozenBackbone& backbone, int side,
                                    const std::vector<int>& patch_sizes)
    : side_(side), width_(backbone.spec().width), depth_(backbone.spec().depth) {
  if (patch_sizes.empty()) throw ValidationError("perceptual model needs at least one patch size");
  for (int p : std::set<int>(patch_sizes.begin(), patch_sizes.end())) {
    if (p <= 0 || side % p != 0) {
      throw ValidationError("perceptual: patch size " + std::to_string(p) + " does not divide input side " +
                            std::to_string(side));
    }
    variants_.emplace(std::piecewise_construct, std::forward_as_tuple(p), std::forward_as_tuple(backbone, side, p));
  }
}

template <typename T>
const encoder::VisionTransformer<T>& PerceptualModel<T>::variant(int patch) const {
  auto it = variants_.find(patch);
  if (it == variants_.end()) {
    throw ValidationError("perceptual model has no variant for patch size " + std::to_string(patch));
  }
  return it->second;
}

template <typename T>
std::vector<Var> PerceptualModel<T>::forward(Tape<T>& t, Var image, const ScaleSet& scales) const {
  scales.validate(side_, depth_);
  // per patch size: one pass producing every requested layer
  std::map<int, std::vector<Var>> by_patch;
  for (int p : scales.patch_sizes) {
    if (!by_patch.count(p)) by_patch[p] = variant(p).forward(t, image, scales.layers);
  }
  std::vector<Var> out;
  for (std::size_t li = 0; li < scales.layers.size(); ++li)
    for (int p : scales.patch_sizes) out.push_back(by_patch[p][li]);
  return out;
}

template <typename T>
FeaturePyramid<T> PerceptualModel<T>::features(const imaging::ImageTensor& img, const ScaleSet& scales) const {
  if (img.height != side_ || img.width != side_) {
    throw ValidationError("perceptual model expects " + std::to_string(side_) + "x" + std::to_string(side_) +
                          " input");
  }
  Tape<T> t;
  Var in = t.constant(encoder::image_matrix<T>(img));
  const auto vars = forward(t, in, scales);
  FeaturePyramid<T> out;
  out.keys = scale_keys(scales);
  for (std::size_t n = 0; n < vars.size(); ++n) {
    out.grids.push_back(side_ / out.keys[n].patch);
    out.features.push_back(t.value(vars[n]));
  }
  return out;
}

template <typename T>
std::uint64_t PerceptualModel<T>::checksum() const {
  Fnv1a64 h;
  for (const auto& [p, v] : variants_) {
    const std::uint64_t c = v.checksum();
    h.update(std::as_bytes(std::span<const std::uint64_t>(&c, 1)));
  }
  return h.digest();
}

// ---------------------------------------------------------------- map math

Map layer_anomaly_map(const Eigen::Ref<const Eigen::MatrixXd>& f, const Eigen::Ref<const Eigen::MatrixXd>& g, int h,
                      int w) {
  if (f.rows() != g.rows() || f.cols() != g.cols()) throw ValidationError("anomaly map: feature shapes differ");
  if (f.rows() != static_cast<Eigen::Index>(h) * w) throw ValidationError("anomaly map: grid does not match features");
  Map out(h, w);
  for (Eigen::Index r = 0; r < f.rows(); ++r) {
    double dot = 0, aa = 0, bb = 0;
    for (Eigen::Index j = 0; j < f.cols(); ++j) {
      dot += f(r, j) * g(r, j);
      aa += f(r, j) * f(r, j);
      bb += g(r, j) * g(r, j);
    }
    out(r / w, r % w) = (aa == 0.0 || bb == 0.0) ? 1.0 : 1.0 - dot / std::sqrt(aa * bb);
  }
  return out;
}

Map resize_map(const Map& m, int h, int w) {
  if (m.rows() == h && m.cols() == w) return m;
  const Eigen::MatrixXd rw = imaging::bilinear_weights(static_cast<int>(m.rows()), h);
  const Eigen::MatrixXd cw = imaging::bilinear_weights(static_cast<int>(m.cols()), w);
  return rw * m * cw.transpose();
}

Map combine_across_scales(const std::vector<Map>& maps, int target_h, int target_w) {
  if (maps.empty()) throw ValidationError("combine_across_scales: empty map set");
  Map out = resize_map(maps.front(), target_h, target_w);
  for (std::size_t i = 1; i < maps.size(); ++i) out = out.cwiseProduct(resize_map(maps[i], target_h, target_w));
  return out;
}

double image_score(const AnomalyMapStack& stack, ScoreMode mode) {
  if (stack.empty()) throw ValidationError("image_score: empty map stack");
  if (mode == ScoreMode::MaxThenMean) {
    double total = 0.0;
    for (const Map& m : stack.maps) total += m.maxCoeff();
    return total / static_cast<double>(stack.size());
  }
  double best = -std::numeric_limits<double>::infinity();
  for (const Map& m : stack.maps) best = std::max(best, m.mean());
  return best;
}

Map pixel_map(const AnomalyMapStack& stack, MapMode mode) {
  if (stack.empty()) throw ValidationError("pixel_map: empty map stack");
  Map out = stack.maps.front();
  for (std::size_t i = 1; i < stack.size(); ++i) {
    const Map& m = stack.maps[i];
    if (m.rows() != out.rows() || m.cols() != out.cols()) {
      throw ValidationError("pixel_map: maps must share one resolution (use resize_stack)");
    }
    if (mode == MapMode::Mean) {
      out += m;
    } else {
      out = out.cwiseMax(m);
    }
  }
  if (mode == MapMode::Mean) out /= static_cast<double>(stack.size());
  return out;
}

AnomalyMapStack resize_stack(const AnomalyMapStack& stack, int h, int w) {
  AnomalyMapStack out;
  out.keys = stack.keys;
  for (const Map& m : stack.maps) out.maps.push_back(resize_map(m, h, w));
  return out;
}

double hierarchical_loss(const AnomalyMapStack& stack) {
  if (stack.empty()) throw ValidationError("hierarchical_loss: empty map stack");
  if (stack.keys.size() != stack.size()) throw ValidationError("hierarchical_loss: every map needs a key");
  Eigen::Index finest_h = 0, finest_w = 0;
  for (const Map& m : stack.maps) {
    finest_h = std::max(finest_h, m.rows());
    finest_w = std::max(finest_w, m.cols());
  }
  std::vector<int> layers;
  for (const auto& k : stack.keys) {
    if (std::find(layers.begin(), layers.end(), k.layer) == layers.end()) layers.push_back(k.layer);
  }
  double total = 0.0;
  for (int layer : layers) {
    std::vector<Map> maps;
    for (std::size_t i = 0; i < stack.size(); ++i) {
      if (stack.keys[i].layer == layer) maps.push_back(stack.maps[i]);
    }
    total += combine_across_scales(maps, static_cast<int>(finest_h), static_cast<int>(finest_w)).mean();
  }
  return total / static_cast<double>(layers.size());
}

template <typename T>
AnomalyMapStack anomaly_maps(const FeaturePyramid<T>& x, const FeaturePyramid<T>& x_rec) {
  if (x.keys != x_rec.keys) throw ValidationError("anomaly_maps: feature pyramids were built with different scales");
  AnomalyMapStack out;
  out.keys = x.keys;
  for (std::size_t n = 0; n < x.features.size(); ++n) {
    const int g = x.grids[n];
    out.maps.push_back(layer_anomaly_map(x.features[n].template cast<double>(), x_rec.features[n].template cast<double>(), g, g));
  }
  return out;
}

// -------------------------------------------------------------------- loss

template <typename T>
Var perceptual_loss(Tape<T>& t, const PerceptualModel<T>& model, const FeaturePyramid<T>& target, Var x_rec,
                    const ScaleSet& scales, LossForm form) {
  const auto keys = scale_keys(scales);
  if (target.keys != keys) throw ValidationError("perceptual_loss: target features use different scales");
  const std::size_t np = scales.patch_sizes.size();

  if (form == LossForm::Simple) {
    // single scale: the first patch size of the set
    ScaleSet single{scales.layers, {scales.patch_sizes.front()}};
    const auto rec = model.forward(t, x_rec, single);
    Var total;
    for (std::size_t li = 0; li < scales.layers.size(); ++li) {
      const Matrix<T>& f = target.features[li * np];
      Var tf = t.constant(Eigen::Map<const Matrix<T>>(f.data(), 1, f.size()));
      Var rf = t.reshape(rec[li], 1, f.size());
      Var d = t.cosine_distance_rows(tf, rf);
      total = total.valid() ? t.add(total, d) : d;
    }
    return t.scale(total, T(1) / static_cast<T>(scales.layers.size()));
  }

  const auto rec = model.forward(t, x_rec, scales);
  int finest = 0;
  for (int p : scales.patch_sizes) finest = std::max(finest, model.side() / p);
  Var total;
  for (std::size_t li = 0; li < scales.layers.size(); ++li) {
    Var combined;
    for (std::size_t pi = 0; pi < np; ++pi) {
      const std::size_t n = li * np + pi;
      const int g = target.grids[n];
      Var map = t.reshape(t.cosine_distance_rows(t.constant(target.features[n]), rec[n]), g, g);
      if (g != finest) {
        Matrix<T> rw = imaging::bilinear_weights(g, finest).cast<T>();
        Matrix<T> rwt = rw.transpose();
        map = t.matmul(t.matmul(t.constant(std::move(rw)), map), t.constant(std::move(rwt)));
      }
      combined = combined.valid() ? t.mul(combined, map) : map;
    }
    Var m = t.mean(combined);
    total = total.valid() ? t.add(total, m) : m;
  }
  return t.scale(total, T(1) / static_cast<T>(scales.layers.size()));
}

template <typename T>
T perceptual_loss(const PerceptualModel<T>& model, const imaging::ImageTensor& x, const imaging::ImageTensor& x_rec,
                  const ScaleSet& scales, LossForm form) {
  if (x.height != x_rec.height || x.width != x_rec.width || x.channels != x_rec.channels) {
    throw ValidationError("perceptual_loss: images differ in shape");
  }
  const auto target = model.features(x, scales);
  Tape<T> t;
  Var rec = t.constant(encoder::image_matrix<T>(x_rec));
  return t.value(perceptual_loss(t, model, target, rec, scales, form))(0, 0);
}

template class PerceptualModel<float>;
template class PerceptualModel<double>;
template AnomalyMapStack anomaly_maps<float>(const FeaturePyramid<float>&, const FeaturePyramid<float>&);
template AnomalyMapStack anomaly_maps<double>(const FeaturePyramid<double>&, const FeaturePyramid<double>&);
template Var perceptual_loss<float>(Tape<float>&, const PerceptualModel<float>&, const FeaturePyramid<float>&, Var,
                                    const ScaleSet&, LossForm);
template Var perceptual_loss<double>(Tape<double>&, const PerceptualModel<double>&, const FeaturePyramid<double>&, Var,
                                     const ScaleSet&, LossForm);
template float perceptual_loss<float>(const PerceptualModel<float>&, const imaging::ImageTensor&,
                                      const imaging::ImageTensor&, const ScaleSet&, LossForm);
template double perceptual_loss<double>(const PerceptualModel<double>&, const imaging::ImageTensor&,
                                        const imaging::ImageTensor&, const ScaleSet&, LossForm);

}  // namespace qfae::perceptual
