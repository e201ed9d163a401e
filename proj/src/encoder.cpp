#include "qfae/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include "json.hpp"
#include <random>

#include "qfae/checksum.hpp"
#include "qfae/errors.hpp"

namespace qfae::encoder {

void BackboneSpec::validate(int side) const {
  if (depth <= 0 || width <= 0 || heads <= 0 || patch_size <= 0) {
    throw ValidationError("backbone '" + name + "': depth, width, heads and patch_size must be positive");
  }
  if (width % heads != 0) throw ValidationError("backbone '" + name + "': heads must divide width");
  if (special_tokens < 0) throw ValidationError("backbone '" + name + "': special_tokens must be >= 0");
  if (in_channels != 3 && in_channels != 1) throw ValidationError("backbone '" + name + "': in_channels must be 1 or 3");
  if (!(mlp_ratio > 0)) throw ValidationError("backbone '" + name + "': mlp_ratio must be positive");
  for (int k : tap_layers) {
    if (k < 0 || k >= depth) {
      throw ValidationError("backbone '" + name + "': tap layer " + std::to_string(k) + " outside [0, " +
                            std::to_string(depth) + ")");
    }
  }
  if (side > 0 && side % patch_size != 0) {
    throw ValidationError("backbone '" + name + "': patch size " + std::to_string(patch_size) +
                          " does not divide input side " + std::to_string(side));
  }
}

std::map<std::string, std::vector<std::int64_t>> BackboneSpec::layout(int pretrain_grid) const {
  const std::int64_t d = width;
  const auto hidden = static_cast<std::int64_t>(static_cast<double>(width) * mlp_ratio);
  std::map<std::string, std::vector<std::int64_t>> roles;
  roles["patch_embed.weight"] = {d, in_channels, patch_size, patch_size};
  roles["patch_embed.bias"] = {d};
  if (special_tokens >= 1) roles["cls_token"] = {1, d};
  if (special_tokens >= 2) roles["register_tokens"] = {special_tokens - 1, d};
  roles["pos_embed"] = {static_cast<std::int64_t>(pretrain_grid) * pretrain_grid + (special_tokens >= 1 ? 1 : 0), d};
  for (int k = 0; k < depth; ++k) {
    const std::string b = "block." + std::to_string(k) + ".";
    roles[b + "norm1.weight"] = {d};
    roles[b + "norm1.bias"] = {d};
    roles[b + "attn.qkv.weight"] = {3 * d, d};
    roles[b + "attn.qkv.bias"] = {3 * d};
    roles[b + "attn.proj.weight"] = {d, d};
    roles[b + "attn.proj.bias"] = {d};
    roles[b + "norm2.weight"] = {d};
    roles[b + "norm2.bias"] = {d};
    roles[b + "mlp.fc1.weight"] = {hidden, d};
    roles[b + "mlp.fc1.bias"] = {hidden};
    roles[b + "mlp.fc2.weight"] = {d, hidden};
    roles[b + "mlp.fc2.bias"] = {d};
  }
  return roles;
}

BackboneSpec BackboneSpec::dinov2_vitl14_reg() {
  BackboneSpec s;
  s.name = "dinov2_vitl14_reg";
  s.depth = 24;
  s.width = 1024;
  s.heads = 16;
  s.patch_size = 14;
  s.special_tokens = 5;
  s.tap_layers = last_block_taps(24);
  return s;
}

BackboneSpec BackboneSpec::dino_vitb8() {
  BackboneSpec s;
  s.name = "dino_vitb8";
  s.depth = 12;
  s.width = 768;
  s.heads = 12;
  s.patch_size = 8;
  s.special_tokens = 1;
  s.tap_layers = last_block_taps(12);
  return s;
}

BackboneSpec BackboneSpec::mae_vitl16() {
  BackboneSpec s;
  s.name = "mae_vitl16";
  s.depth = 24;
  s.width = 1024;
  s.heads = 16;
  s.patch_size = 16;
  s.special_tokens = 1;
  s.tap_layers = {16, 20};
  return s;
}

namespace {

int infer_grid(const BackboneSpec& spec, const HostTensor& pos) {
  if (pos.shape.size() != 2 || pos.shape[1] != spec.width) {
    throw ManifestError("pos_embed", "pos_embed must have shape [tokens, " + std::to_string(spec.width) + "]");
  }
  const std::int64_t spatial = pos.shape[0] - (spec.special_tokens >= 1 ? 1 : 0);
  const auto g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(spatial))));
  if (g <= 0 || static_cast<std::int64_t>(g) * g != spatial) {
    throw ManifestError("pos_embed", "pos_embed spatial token count is not a square grid");
  }
  return g;
}

}  // namespace

FrozenBackbone FrozenBackbone::load(const TensorArchive& archive, const BackboneSpec& spec,
                                    const std::map<std::string, std::string>& manifest) {
  spec.validate();
  auto resolve = [&](const std::string& role) {
    auto it = manifest.find(role);
    return it == manifest.end() ? role : it->second;
  };
  const std::string pos_name = resolve("pos_embed");
  if (!archive.contains(pos_name)) throw ManifestError(pos_name, "missing tensor: " + pos_name + " (role pos_embed)");
  const int grid = infer_grid(spec, archive.at(pos_name));

  FrozenBackbone b;
  b.spec_ = spec;
  b.pretrain_grid_ = grid;
  for (const auto& [role, shape] : spec.layout(grid)) {
    const std::string name = resolve(role);
    auto it = archive.tensors.find(name);
    if (it == archive.tensors.end()) throw ManifestError(name, "missing tensor: " + name + " (role " + role + ")");
    if (it->second.shape != shape) {
      throw ManifestError(name, "tensor " + name + " (role " + role + ") has the wrong shape");
    }
    b.weights_[role] = it->second;
  }
  b.checksum_ = tensors_checksum(b.weights_);
  return b;
}

std::map<std::string, std::string> FrozenBackbone::read_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open manifest: " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("manifest is not valid JSON: " + path.string());
  }
  // Either a flat role -> name object or an exporter manifest with a "roles" block.
  const nlohmann::json& roles = j.contains("roles") ? j.at("roles") : j;
  std::map<std::string, std::string> out;
  for (const auto& [role, v] : roles.items()) {
    if (v.is_string()) {
      out[role] = v.get<std::string>();
    } else if (v.is_object() && v.contains("name")) {
      out[role] = v.at("name").get<std::string>();
    }
  }
  return out;
}

TensorArchive FrozenBackbone::to_archive() const {
  TensorArchive ar;
  ar.tensors = weights_;
  ar.metadata["backbone"] = spec_.name;
  return ar;
}

FrozenBackbone make_toy_backbone(std::uint64_t seed, const BackboneSpec& spec, int pretrain_grid) {
  spec.validate();
  if (pretrain_grid <= 0) pretrain_grid = 4;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> small(0.0, 0.02);
  FrozenBackbone b;
  b.spec_ = spec;
  b.pretrain_grid_ = pretrain_grid;
  for (const auto& [role, shape] : spec.layout(pretrain_grid)) {
    HostTensor t;
    t.shape = shape;
    t.data.resize(static_cast<std::size_t>(t.numel()));
    b.weights_[role] = std::move(t);
  }
  // std::map iteration is name-ordered, which fixes the draw order.
  for (auto& [role, t] : b.weights_) {
    const bool is_norm = role.find("norm") != std::string::npos;
    const bool is_weight = role.size() > 7 && role.compare(role.size() - 7, 7, ".weight") == 0;
    if (is_norm) {
      std::fill(t.data.begin(), t.data.end(), is_weight ? 1.0f : 0.0f);
    } else if (is_weight) {
      std::int64_t fan_in = 1;
      for (std::size_t i = 1; i < t.shape.size(); ++i) fan_in *= t.shape[i];
      std::uniform_real_distribution<double> u(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
      for (float& v : t.data) v = static_cast<float>(u(rng));
    } else {
      for (float& v : t.data) v = static_cast<float>(small(rng));
    }
  }
  b.checksum_ = tensors_checksum(b.weights_);
  return b;
}

// ------------------------------------------------------------ runtime ViT

template <typename T>
VisionTransformer<T>::VisionTransformer(const FrozenBackbone& backbone, int side, int patch_size)
    : spec_(backbone.spec()), side_(side), patch_(patch_size > 0 ? patch_size : backbone.spec().patch_size) {
  BackboneSpec runtime = spec_;
  runtime.patch_size = patch_;
  runtime.validate(side);
  const NamedTensors& w = backbone.weights();
  const int d = spec_.width;
  const int c = spec_.in_channels;
  const int p0 = spec_.patch_size;

  // Patch kernel [D, C, p0, p0] -> D x (p*p*C) in token order (row, col, channel).
  patch_embed_ = nn::Linear<T>("patch_embed", static_cast<Eigen::Index>(patch_) * patch_ * c, d, false);
  {
    const HostTensor& k = w.at("patch_embed.weight");
    const Eigen::MatrixXd rw = imaging::bicubic_weights(p0, patch_);
    const double area = static_cast<double>(p0 * p0) / static_cast<double>(patch_ * patch_);
    for (int o = 0; o < d; ++o) {
      for (int ch = 0; ch < c; ++ch) {
        Eigen::MatrixXd plane(p0, p0);
        for (int y = 0; y < p0; ++y)
          for (int x = 0; x < p0; ++x)
            plane(y, x) = k.data[((static_cast<std::size_t>(o) * c + ch) * p0 + y) * p0 + x];
        Eigen::MatrixXd r = patch_ == p0 ? plane : Eigen::MatrixXd(rw * plane * rw.transpose() * area);
        for (int y = 0; y < patch_; ++y)
          for (int x = 0; x < patch_; ++x) patch_embed_.weight.value(o, (y * patch_ + x) * c + ch) = static_cast<T>(r(y, x));
      }
    }
    nn::assign(patch_embed_.bias, w.at("patch_embed.bias"));
  }

  const HostTensor& pos = w.at("pos_embed");
  const int has_cls = spec_.special_tokens >= 1 ? 1 : 0;
  special_ = nn::make_param<T>("special_tokens", spec_.special_tokens, d, false);
  if (has_cls) {
    const HostTensor& cls = w.at("cls_token");
    for (int j = 0; j < d; ++j) special_.value(0, j) = static_cast<T>(cls.data[static_cast<std::size_t>(j)] + pos.data[static_cast<std::size_t>(j)]);
  }
  if (spec_.special_tokens >= 2) {
    const HostTensor& reg = w.at("register_tokens");
    for (int r = 0; r < spec_.special_tokens - 1; ++r)
      for (int j = 0; j < d; ++j) special_.value(r + 1, j) = static_cast<T>(reg.data[static_cast<std::size_t>(r) * d + j]);
  }

  const int g0 = backbone.pretrain_grid();
  const int g = side_ / patch_;
  pos_ = nn::make_param<T>("pos_embed", static_cast<Eigen::Index>(g) * g, d, false);
  {
    const Eigen::MatrixXd rw = imaging::bicubic_weights(g0, g);
    for (int j = 0; j < d; ++j) {
      Eigen::MatrixXd plane(g0, g0);
      for (int y = 0; y < g0; ++y)
        for (int x = 0; x < g0; ++x)
          plane(y, x) = pos.data[(static_cast<std::size_t>(has_cls) + static_cast<std::size_t>(y) * g0 + x) * d + j];
      Eigen::MatrixXd r = g == g0 ? plane : Eigen::MatrixXd(rw * plane * rw.transpose());
      for (int y = 0; y < g; ++y)
        for (int x = 0; x < g; ++x) pos_.value(y * g + x, j) = static_cast<T>(r(y, x));
    }
  }

  blocks_.reserve(static_cast<std::size_t>(spec_.depth));
  for (int k = 0; k < spec_.depth; ++k) {
    const std::string prefix = "block." + std::to_string(k);
    blocks_.emplace_back(prefix, d, spec_.heads, spec_.mlp_ratio, false);
    nn::ParamList<T> params;
    blocks_.back().collect(params);
    nn::import_params(params, w);
  }
  patch_index_ = imaging::patchify_index(c, side_, side_, patch_);
}

template <typename T>
std::vector<Var> VisionTransformer<T>::forward(Tape<T>& t, Var image, std::span<const int> taps) const {
  if (t.rows(image) != static_cast<Eigen::Index>(spec_.in_channels) * side_ || t.cols(image) != side_) {
    throw ValidationError("backbone '" + spec_.name + "' expects a " + std::to_string(side_) + "x" +
                          std::to_string(side_) + " input with " + std::to_string(spec_.in_channels) + " channels");
  }
  int last = -1;
  for (int k : taps) {
    if (k < 0 || k >= spec_.depth) throw ValidationError("tap layer " + std::to_string(k) + " out of range");
    last = std::max(last, k);
  }
  const int g = grid();
  const int s = spec_.special_tokens;
  Var tokens = t.gather(image, patch_index_, static_cast<Eigen::Index>(g) * g,
                        static_cast<Eigen::Index>(patch_) * patch_ * spec_.in_channels);
  Var x = t.add(patch_embed_(t, tokens), t.param(pos_));
  if (s > 0) {
    const Var parts[2] = {t.param(special_), x};
    x = t.concat_rows(parts);
  }
  std::vector<Var> hidden(static_cast<std::size_t>(last + 1));
  for (int k = 0; k <= last; ++k) {
    x = blocks_[static_cast<std::size_t>(k)](t, x);
    hidden[static_cast<std::size_t>(k)] = x;
  }
  std::vector<Var> out;
  out.reserve(taps.size());
  for (int k : taps) {
    Var h = hidden[static_cast<std::size_t>(k)];
    out.push_back(s > 0 ? t.slice_rows(h, s, static_cast<Eigen::Index>(g) * g) : h);
  }
  return out;
}

template <typename T>
std::vector<Matrix<T>> VisionTransformer<T>::hidden_states(const imaging::ImageTensor& img,
                                                           std::span<const int> taps) const {
  if (img.height != side_ || img.width != side_ || img.channels != spec_.in_channels) {
    throw ValidationError("backbone '" + spec_.name + "' expects " + std::to_string(side_) + "x" +
                          std::to_string(side_) + " input, got " + std::to_string(img.height) + "x" +
                          std::to_string(img.width));
  }
  Tape<T> t;
  Var in = t.constant(image_matrix<T>(img));
  std::vector<Matrix<T>> out;
  for (Var v : forward(t, in, taps)) out.push_back(t.value(v));
  return out;
}

template <typename T>
std::uint64_t VisionTransformer<T>::checksum() const {
  Fnv1a64 h;
  auto fold = [&h](const ad::Param<T>& p) {
    std::vector<float> buf(static_cast<std::size_t>(p.value.size()));
    for (Eigen::Index i = 0; i < p.value.size(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(p.value.data()[i]);
    h.update(p.name);
    h.update(std::span<const float>(buf));
  };
  fold(patch_embed_.weight);
  fold(patch_embed_.bias);
  fold(special_);
  fold(pos_);
  for (const auto& b : blocks_) {
    auto& mut = const_cast<nn::TransformerBlock<T>&>(b);
    nn::ParamList<T> params;
    mut.collect(params);
    for (const auto* p : params) fold(*p);
  }
  return h.digest();
}

template <typename T>
Matrix<T> image_matrix(const imaging::ImageTensor& img) {
  Matrix<T> m(static_cast<Eigen::Index>(img.channels) * img.height, img.width);
  for (std::size_t i = 0; i < img.data.size(); ++i) m.data()[i] = static_cast<T>(img.data[i]);
  return m;
}

std::vector<Matrix<float>> extract_hidden_states(const VisionTransformer<float>& backbone,
                                                 const imaging::ImageTensor& img) {
  if (!img.normalized) throw ValidationError("extract_hidden_states expects a normalized image");
  return backbone.hidden_states(img, backbone.spec().tap_layers);
}

template <typename T>
Var project_concat(Tape<T>& t, const std::vector<std::vector<Var>>& features,
                   const std::vector<Projection<T>>& projections, ContextLayout* layout) {
  if (features.size() != projections.size()) {
    throw ValidationError("project_concat: " + std::to_string(features.size()) + " encoders but " +
                          std::to_string(projections.size()) + " projections");
  }
  if (features.empty()) throw ValidationError("project_concat: no encoder features");
  const int width = projections.front().out_width();
  std::vector<Var> parts;
  ContextLayout lay;
  lay.width = width;
  for (std::size_t e = 0; e < features.size(); ++e) {
    const Projection<T>& proj = projections[e];
    if (proj.out_width() != width) throw ValidationError("project_concat: projections disagree on output width");
    for (std::size_t k = 0; k < features[e].size(); ++k) {
      Var f = features[e][k];
      if (t.cols(f) != proj.in_width()) {
        throw ValidationError("project_concat: encoder " + std::to_string(e) + " features have width " +
                              std::to_string(t.cols(f)) + " but its projection expects " +
                              std::to_string(proj.in_width()));
      }
      parts.push_back(proj.linear(t, f));
      lay.segments.push_back({static_cast<int>(e), static_cast<int>(k), lay.total, static_cast<int>(t.rows(f))});
      lay.total += static_cast<int>(t.rows(f));
    }
  }
  if (layout) *layout = lay;
  return t.concat_rows(parts);
}

template class VisionTransformer<float>;
template class VisionTransformer<double>;
template Matrix<float> image_matrix<float>(const imaging::ImageTensor&);
template Matrix<double> image_matrix<double>(const imaging::ImageTensor&);
template Var project_concat<float>(Tape<float>&, const std::vector<std::vector<Var>>&,
                                   const std::vector<Projection<float>>&, ContextLayout*);
template Var project_concat<double>(Tape<double>&, const std::vector<std::vector<Var>>&,
                                    const std::vector<Projection<double>>&, ContextLayout*);

}  // namespace qfae::encoder
