#include "qfae/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <thread>

#include "json.hpp"

#include "qfae/errors.hpp"

namespace qfae::evaluation {

using nlohmann::ordered_json;

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ValidationError("auroc: scores and labels differ in length");
  std::size_t npos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw ValidationError("auroc: labels must be 0 or 1");
    npos += static_cast<std::size_t>(l);
  }
  const std::size_t nneg = labels.size() - npos;
  if (npos == 0 || nneg == 0) throw ValidationError("auroc: both classes must be present");
  for (double s : scores) {
    if (std::isnan(s)) throw ValidationError("auroc: NaN score");
  }

  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Midranks, 1-based.
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double mid = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[idx[k]] == 1) rank_sum += mid;
    }
    i = j + 1;
  }
  const double np = static_cast<double>(npos);
  const double u = rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(nneg));
}

// ------------------------------------------------------------------ profiles

EvalProfile EvalProfile::named(const std::string& name) {
  EvalProfile p;
  p.name = name;
  if (name == "brats" || name == "resc" || name == "custom") return p;
  if (name == "rsna") {
    p.score_mode = perceptual::ScoreMode::MeanThenMax;
    return p;
  }
  if (name == "liver") {
    p.scales.patch_sizes = {8, 16};
    p.liver_roi = true;
    p.bilateral = true;
    return p;
  }
  throw ValidationError("unknown evaluation profile '" + name + "' (expected brats, resc, rsna, liver or custom)");
}

bool EvalProfile::is_known(const std::string& name) {
  return name == "brats" || name == "resc" || name == "rsna" || name == "liver" || name == "custom";
}

imaging::ImageTensor preprocess(const imaging::ImageTensor& raw, const EvalProfile& profile, int side,
                                std::vector<std::string>* warnings) {
  if (!profile.liver_roi) {
    if (profile.bilateral) {
      const auto& bp = profile.bilateral_params;
      return imaging::prepare(imaging::bilateral_filter(raw, bp.spatial_sigma, bp.range_sigma), side);
    }
    return imaging::prepare(raw, side);
  }
  imaging::ImageTensor gray = raw;
  if (raw.channels == 3) {
    gray = imaging::ImageTensor(1, raw.height, raw.width);
    for (int y = 0; y < raw.height; ++y)
      for (int x = 0; x < raw.width; ++x)
        gray.at(0, y, x) = (raw.at(0, y, x) + raw.at(1, y, x) + raw.at(2, y, x)) / 3.0f;
  }
  std::function<imaging::ImageTensor(const imaging::ImageTensor&)> hook;
  if (profile.bilateral) {
    const auto bp = profile.bilateral_params;
    hook = [bp](const imaging::ImageTensor& crop) {
      return imaging::bilateral_filter(crop, bp.spatial_sigma, bp.range_sigma);
    };
  }
  auto roi = imaging::liver_roi_preprocess(gray, side, hook);
  if (roi.warning && warnings) warnings->push_back(*roi.warning);
  return imaging::to_rgb(roi.image);
}

// ------------------------------------------------------------------- scoring

ScoredImage score_image(const QfaeModel& model, const imaging::ImageTensor& image, const EvalProfile& profile) {
  const int side = model.config().side;
  if (image.height != side || image.width != side) {
    throw ValidationError("evaluation: image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                          " but the model expects " + std::to_string(side) + "x" + std::to_string(side));
  }
  profile.scales.validate(side, model.perceptual_model().depth());
  const auto x = imaging::normalize(image, profile.norm_mean, profile.norm_std);
  const auto stack = model.anomaly_maps(x, profile.scales);
  ScoredImage out;
  out.score = perceptual::image_score(stack, profile.score_mode);
  out.pixel_map = perceptual::pixel_map(perceptual::resize_stack(stack, side, side), profile.map_mode);
  return out;
}

RunResult evaluate(const QfaeModel& model, const std::vector<TestItem>& test, const EvalProfile& profile,
                   std::uint64_t seed, const MapSink& sink, int workers) {
  if (test.empty()) throw ValidationError("evaluate: test corpus is empty");
  for (int p : profile.scales.patch_sizes) (void)model.perceptual_model().variant(p);

  std::vector<ScoredImage> scored(test.size());
  const std::size_t nw = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(workers), test.size()));
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < test.size(); i += nw) scored[i] = score_image(model, test[i].image, profile);
  };
  if (nw == 1) {
    work(0);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < nw; ++w) threads.emplace_back(work, w);
    for (auto& t : threads) t.join();
  }

  RunResult run;
  run.seed = seed;
  std::vector<double> scores;
  std::vector<int> labels;
  for (std::size_t i = 0; i < test.size(); ++i) {
    run.images.push_back({test[i].id, test[i].label, scored[i].score});
    scores.push_back(scored[i].score);
    labels.push_back(test[i].label);
    if (sink) sink(test[i], scored[i].pixel_map);
  }
  run.auroc = auroc(scores, labels);
  return run;
}

Report aggregate(const std::string& profile, std::vector<RunResult> runs) {
  if (runs.empty()) throw ValidationError("aggregate: no runs");
  Report r;
  r.profile = profile;
  r.n_images = runs.front().images.size();
  double sum = 0.0;
  for (const auto& run : runs) sum += run.auroc;
  r.mean = sum / static_cast<double>(runs.size());
  double ss = 0.0;
  for (const auto& run : runs) ss += (run.auroc - r.mean) * (run.auroc - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(runs.size()));
  r.auroc = r.mean;
  r.per_seed = std::move(runs);
  return r;
}

std::string Report::to_json(bool include_scores) const {
  ordered_json j;
  j["profile"] = profile;
  j["n_images"] = n_images;
  j["auroc"] = auroc;
  ordered_json seeds = ordered_json::array();
  for (const auto& run : per_seed) {
    ordered_json s;
    s["seed"] = run.seed;
    s["auroc"] = run.auroc;
    if (include_scores) {
      ordered_json imgs = ordered_json::array();
      for (const auto& im : run.images) imgs.push_back({{"id", im.id}, {"label", im.label}, {"score", im.score}});
      s["scores"] = std::move(imgs);
    }
    seeds.push_back(std::move(s));
  }
  j["per_seed"] = std::move(seeds);
  j["mean"] = mean;
  j["std"] = std;
  j["std_kind"] = "population";
  return j.dump(2);
}

// ---------------------------------------------------------------- map export

void write_map_png(const std::filesystem::path& path, const perceptual::Map& map) {
  if (map.size() == 0) throw ValidationError("write_map_png: empty map");
  const double lo = map.minCoeff();
  const double hi = map.maxCoeff();
  imaging::ImageTensor img(1, static_cast<int>(map.rows()), static_cast<int>(map.cols()));
  for (Eigen::Index y = 0; y < map.rows(); ++y)
    for (Eigen::Index x = 0; x < map.cols(); ++x)
      img.at(0, static_cast<int>(y), static_cast<int>(x)) =
          hi > lo ? static_cast<float>((map(y, x) - lo) / (hi - lo)) : 0.0f;
  imaging::save_image(path, img, 8);
}

namespace {

void put_u32(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_map_raw(const std::filesystem::path& path, const perceptual::Map& map) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  put_u32(f, static_cast<std::uint32_t>(map.rows()));
  put_u32(f, static_cast<std::uint32_t>(map.cols()));
  for (Eigen::Index y = 0; y < map.rows(); ++y) {
    for (Eigen::Index x = 0; x < map.cols(); ++x) {
      const float v = static_cast<float>(map(y, x));
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(f, bits);
    }
  }
  if (!f) throw IoError("write failed: " + path.string());
}

perceptual::Map read_map_raw(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw IoError("truncated map file: " + path.string());
  const std::uint32_t h = get_u32(bytes.data());
  const std::uint32_t w = get_u32(bytes.data() + 4);
  if (bytes.size() != 8 + 4 * static_cast<std::size_t>(h) * w) throw IoError("map file size mismatch: " + path.string());
  perceptual::Map m(h, w);
  for (std::uint32_t y = 0; y < h; ++y) {
    for (std::uint32_t x = 0; x < w; ++x) {
      const std::uint32_t bits = get_u32(bytes.data() + 8 + 4 * (static_cast<std::size_t>(y) * w + x));
      float v;
      std::memcpy(&v, &bits, 4);
      m(y, x) = v;
    }
  }
  return m;
}

// ------------------------------------------------------------------- dataset

namespace {

bool is_image(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".tif" || ext == ".tiff" ||
         ext == ".pgm" || ext == ".ppm";
}

std::vector<std::string> scan(const std::filesystem::path& root, const std::string& sub) {
  std::vector<std::string> out;
  const auto dir = root / sub;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image(e.path())) out.push_back(std::filesystem::relative(e.path(), root).generic_string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

DatasetIndex load_index(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw IoError("dataset root not found: " + root.string());
  DatasetIndex idx;
  const auto index_path = root / "index.json";
  if (std::filesystem::exists(index_path)) {
    std::ifstream f(index_path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(f);
      for (const auto& e : j.value("train", nlohmann::json::array())) idx.train.push_back({e.at("path").get<std::string>(), 0, ""});
      for (const auto& e : j.value("test", nlohmann::json::array())) {
        DatasetEntry d{e.at("path").get<std::string>(), e.at("label").get<int>(), e.value("mask", std::string())};
        if (d.label != 0 && d.label != 1) throw ValidationError("index.json: label must be 0 or 1 for " + d.path);
        idx.test.push_back(std::move(d));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("malformed index.json: " + std::string(e.what()));
    }
    return idx;
  }
  for (auto& p : scan(root, "train/good")) idx.train.push_back({p, 0, ""});
  for (auto& p : scan(root, "test/good")) idx.test.push_back({p, 0, ""});
  for (auto& p : scan(root, "test/ungood")) {
    DatasetEntry d{p, 1, ""};
    const auto mask = root / "test/masks" / std::filesystem::path(p).filename();
    if (std::filesystem::exists(mask)) d.mask = std::filesystem::relative(mask, root).generic_string();
    idx.test.push_back(std::move(d));
  }
  return idx;
}

void write_index(const std::filesystem::path& root, const DatasetIndex& index) {
  ordered_json j;
  j["train"] = ordered_json::array();
  for (const auto& e : index.train) j["train"].push_back({{"path", e.path}});
  j["test"] = ordered_json::array();
  for (const auto& e : index.test) {
    ordered_json t{{"path", e.path}, {"label", e.label}};
    if (!e.mask.empty()) t["mask"] = e.mask;
    j["test"].push_back(std::move(t));
  }
  std::ofstream f(root / "index.json");
  if (!f) throw IoError("cannot write " + (root / "index.json").string());
  f << j.dump(2) << "\n";
}

std::vector<imaging::ImageTensor> load_train(const std::filesystem::path& root, const DatasetIndex& index,
                                             const EvalProfile& profile, int side) {
  std::vector<imaging::ImageTensor> out;
  for (const auto& e : index.train) out.push_back(preprocess(imaging::load_image(root / e.path), profile, side));
  return out;
}

std::vector<TestItem> load_test(const std::filesystem::path& root, const DatasetIndex& index,
                                const EvalProfile& profile, int side) {
  std::vector<TestItem> out;
  for (const auto& e : index.test) {
    out.push_back({e.path, preprocess(imaging::load_image(root / e.path), profile, side), e.label});
  }
  return out;
}

}  // namespace qfae::evaluation
