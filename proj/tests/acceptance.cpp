// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "oracles.hpp"
#include "qfae/config.hpp"
#include "qfae/evaluation.hpp"
#include "qfae/gradcheck.hpp"
#include "qfae/imaging.hpp"
#include "qfae/perceptual.hpp"
#include "qfae/qformer.hpp"
#include "qfae/synthetic.hpp"
#include "qfae/training.hpp"

using namespace qfae;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ------------------------------------------------------------------ 1

Verdict structural_invariance() {
  const qformer::QFormerConfig cfg{32, 4, 2.0, 1};
  std::mt19937_64 rng(1);
  std::normal_distribution<float> g;
  int checked = 0;
  for (int m : {4, 49, 784}) {
    qformer::QFormer<float> qf(cfg, m);
    qf.init(static_cast<std::uint64_t>(m));
    for (int n : {1, 50, 261, 512, 2080}) {
      ad::Matrix<float> e(n, cfg.width);
      for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = g(rng);
      ad::Tape<float> t;
      const auto z = qf.forward(t, t.constant(e));
      if (t.rows(z) != m || t.cols(z) != cfg.width) {
        return {false, "|E|=" + std::to_string(n) + " m=" + std::to_string(m) + " gave " + std::to_string(t.rows(z))};
      }
      ++checked;
    }
  }
  return {true, std::to_string(checked) + " (|E|, m) pairs"};
}

// ------------------------------------------------------------------ 2

Verdict roundtrip() {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto [side, p] : {std::pair{224, 8}, {224, 16}, {224, 32}, {64, 8}}) {
    imaging::ImageTensor img(3, side, side);
    for (float& v : img.data) v = u(rng);
    auto [tokens, grid] = imaging::patchify(img, p);
    const auto back = imaging::unpatchify(tokens, grid);
    if (back.data != img.data) return {false, "mismatch at " + std::to_string(side) + "/" + std::to_string(p)};
  }
  return {true, "4 (side, patch) pairs bitwise"};
}

// ------------------------------------------------------------------ 3

Verdict gradient_checks() {
  const auto results = gradcheck::run_all();
  std::ostringstream d;
  for (const auto& r : results) d << r.name << "=" << fmt("%.2e", r.rel_error) << " ";
  const double m = gradcheck::max_error(results);
  d << "max=" << fmt("%.2e", m) << " (tol 1e-4)";
  return {m < 1e-4, d.str()};
}

// ------------------------------------------------------------------ 4

Verdict aggregation_oracle() {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> count(1, 3), grid(1, 8), side(8, 24);
  std::uniform_real_distribution<double> val(0.0, 2.0);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int nl = count(rng), np = count(rng);
    std::vector<int> grids;
    for (int p = 0; p < np; ++p) grids.push_back(grid(rng));
    perceptual::AnomalyMapStack stack;
    std::vector<std::vector<Eigen::MatrixXd>> nested(static_cast<std::size_t>(nl));
    std::vector<Eigen::MatrixXd> flat;
    for (int l = 0; l < nl; ++l) {
      for (int p = 0; p < np; ++p) {
        const int gsz = grids[static_cast<std::size_t>(p)];
        perceptual::Map m(gsz, gsz);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = val(rng);
        stack.maps.push_back(m);
        stack.keys.push_back({l, p});
        nested[static_cast<std::size_t>(l)].push_back(m);
        flat.push_back(m);
      }
    }
    const int s = side(rng);
    auto diff = [&](double a, double b) { worst = std::max(worst, std::abs(a - b)); };
    diff(perceptual::image_score(stack, perceptual::ScoreMode::MaxThenMean), oracle::score_max_then_mean(flat));
    diff(perceptual::image_score(stack, perceptual::ScoreMode::MeanThenMax), oracle::score_mean_then_max(flat));
    diff(perceptual::hierarchical_loss(stack), oracle::hierarchical(nested));
    const auto resized = perceptual::resize_stack(stack, s, s);
    for (bool use_max : {false, true}) {
      const auto got = perceptual::pixel_map(resized, use_max ? perceptual::MapMode::Max : perceptual::MapMode::Mean);
      const auto want = oracle::pixel(flat, s, s, use_max);
      worst = std::max(worst, (got - want).cwiseAbs().maxCoeff());
    }
  }
  return {worst < 1e-6, "1000 stacks, max abs diff " + fmt("%.2e", worst) + " (tol 1e-6)"};
}

// ------------------------------------------------------------------ 5

Verdict cosine_bounds() {
  auto cfg = ModelConfig::toy();
  const auto bb = cfg.perceptual_model.load();
  const perceptual::PerceptualModel<float> model(bb, cfg.side, cfg.perceptual.eval.patch_sizes);
  const auto& scales = cfg.perceptual.eval;
  synthetic::SyntheticSpec spec;
  spec.n_train = 4;
  spec.n_test_normal = 2;
  spec.n_test_anomalous = 2;
  const auto corpus = synthetic::make_corpus(spec, 5);
  auto norm = [](const imaging::ImageTensor& i) { return imaging::normalize(i, 0.449, 0.226); };

  // bounds on unrelated pairs
  double lo = 1e9, hi = -1e9;
  for (std::size_t i = 0; i + 1 < corpus.test.size(); ++i) {
    const auto a = model.features(norm(corpus.test[i].image), scales);
    const auto b = model.features(norm(corpus.test[i + 1].image), scales);
    for (const auto& m : perceptual::anomaly_maps(a, b).maps) {
      lo = std::min(lo, m.minCoeff());
      hi = std::max(hi, m.maxCoeff());
    }
  }
  if (lo < 0.0 || hi > 2.0) return {false, "map range [" + fmt("%.3g", lo) + ", " + fmt("%.3g", hi) + "]"};

  // x~ = x
  const auto x = norm(corpus.train[0]);
  const float loss_h = perceptual::perceptual_loss(model, x, x, cfg.perceptual.train, perceptual::LossForm::Hierarchical);
  const float loss_s = perceptual::perceptual_loss(model, x, x, cfg.perceptual.train, perceptual::LossForm::Simple);
  if (loss_h != 0.0f || loss_s != 0.0f) return {false, "self loss " + fmt("%.3g", loss_h)};
  const auto fx = model.features(x, scales);
  for (const auto& m : perceptual::anomaly_maps(fx, fx).maps) {
    if ((m.array() != 0.0).any()) return {false, "self map not all zero"};
  }

  // anti-parallel toy features
  for (const auto& f : fx.features) {
    const Eigen::MatrixXd fd = f.cast<double>();
    const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(fd.rows()))));
    const auto m = perceptual::layer_anomaly_map(fd, -fd, g, g);
    if ((m.array() != 2.0).any()) return {false, "anti-parallel map not all 2"};
  }
  return {true, "range [" + fmt("%.3f", lo) + ", " + fmt("%.3f", hi) + "], self loss 0, self maps 0, anti-parallel 2"};
}

// ------------------------------------------------------------------ 6

Verdict auroc_suite() {
  using evaluation::auroc;
  const std::vector<int> l01{0, 1};
  if (auroc(std::vector<double>{0.1, 0.9}, l01) != 1.0) return {false, "perfect ranking"};
  if (auroc(std::vector<double>{0.9, 0.1}, l01) != 0.0) return {false, "inverted ranking"};
  if (auroc(std::vector<double>{0.5, 0.5}, l01) != 0.5) return {false, "tie"};

  std::mt19937_64 rng(6);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> coef(0.1, 3.0);
  std::uniform_int_distribution<int> kind(0, 3);
  std::vector<int> labels(128);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i < 64 ? 0 : 1;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(labels.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = g(rng) + 0.7 * labels[i];
    const double a = coef(rng), b = coef(rng);
    const int k = kind(rng);
    std::vector<double> t(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      switch (k) {
        case 0: t[i] = a * s[i] + b; break;
        case 1: t[i] = std::exp(a * s[i]); break;
        case 2: t[i] = std::atan(a * s[i]) + b * s[i]; break;
        default: t[i] = s[i] * s[i] * s[i] + a * s[i]; break;
      }
    }
    const double base = auroc(s, labels);
    if (auroc(t, labels) != base) return {false, "monotone map " + std::to_string(trial) + " changed AUROC"};
    if (std::abs(base - oracle::auroc(s, labels)) > 1e-12) return {false, "pair-counting oracle disagrees"};
  }
  return {true, "3 hand cases, 100 monotone maps"};
}

// ------------------------------------------------------------------ 7

Verdict frozen_contract() {
  auto cfg = RunConfig::toy();
  auto model = QfaeModel::from_config(cfg.model);
  model.init(42);
  synthetic::SyntheticSpec spec;
  spec.n_train = 32;
  spec.n_test_normal = 1;
  spec.n_test_anomalous = 1;
  const auto corpus = synthetic::make_corpus(spec, 7);
  auto tc = cfg.train;
  tc.batch = 8;
  tc.max_steps = 50;
  tc.augment = true;
  const auto enc = model.encoder_checksum();
  const auto perc = model.perceptual_checksum();
  std::uint64_t enc_file = 0;
  for (const auto& f : model.frozen_encoders()) enc_file ^= f.recompute_checksum();
  const auto perc_file = model.frozen_perceptual().recompute_checksum();

  const auto res = training::train(tc, 42, corpus.train, model);
  std::uint64_t enc_file_after = 0;
  for (const auto& f : model.frozen_encoders()) enc_file_after ^= f.recompute_checksum();
  const bool ok = res.log.size() == 50 && model.encoder_checksum() == enc && model.perceptual_checksum() == perc &&
                  enc_file_after == enc_file && model.frozen_perceptual().recompute_checksum() == perc_file;
  char buf[96];
  std::snprintf(buf, sizeof buf, "%zu steps, encoder %016llx, perceptual %016llx", res.log.size(),
                static_cast<unsigned long long>(enc), static_cast<unsigned long long>(perc));
  return {ok, buf};
}

// ------------------------------------------------------------------ 8, 9

struct E2eRun {
  training::TrainResult train;
  evaluation::RunResult eval;
  double train_seconds = 0.0;
};

E2eRun e2e_run(const RunConfig& cfg, const synthetic::SyntheticCorpus& corpus, std::uint64_t seed,
               const fs::path& dir) {
  fs::create_directories(dir);
  auto model = QfaeModel::from_config(cfg.model);
  model.init(seed);
  E2eRun r;
  const auto t0 = Clock::now();
  r.train = training::train(cfg.train, seed, corpus.train, model);
  r.train_seconds = seconds_since(t0);
  r.eval = evaluation::evaluate(model, corpus.test, cfg.profile(), seed);
  std::ofstream log(dir / "train_log.jsonl");
  for (const auto& rec : r.train.log) log << training::to_jsonl(rec) << "\n";
  std::ofstream(dir / "report.json") << evaluation::aggregate(cfg.eval_profile, {r.eval}).to_json() << "\n";
  return r;
}

struct E2eState {
  RunConfig cfg = RunConfig::toy();
  synthetic::SyntheticCorpus corpus;
  std::vector<E2eRun> runs;
  bool ready = false;
};

Verdict desk_e2e(E2eState& st, const fs::path& work) {
  synthetic::SyntheticSpec spec;  // 64x64, 256 train, 64 + 64 test, 12x12 squares
  st.corpus = synthetic::make_corpus(spec, 1234);
  std::ostringstream d;
  bool ok = st.cfg.profile().score_mode == perceptual::ScoreMode::MaxThenMean;
  for (auto seed : st.cfg.train.seeds) {
    st.runs.push_back(e2e_run(st.cfg, st.corpus, seed, work / ("e2e_seed_" + std::to_string(seed))));
    const auto& r = st.runs.back();
    ok = ok && r.train_seconds <= 300.0 && r.eval.auroc >= 0.85;
    d << "seed " << seed << " auroc " << fmt("%.4f", r.eval.auroc) << " train " << fmt("%.1f", r.train_seconds)
      << " s; ";
  }
  std::vector<evaluation::RunResult> evals;
  for (const auto& r : st.runs) evals.push_back(r.eval);
  const auto rep = evaluation::aggregate(st.cfg.eval_profile, evals);
  std::ofstream(work / "e2e_report.json") << rep.to_json() << "\n";
  d << "mean " << fmt("%.4f", rep.mean) << " (need every seed >= 0.85, train <= 300 s)";
  st.ready = true;
  return {ok, d.str()};
}

Verdict determinism(E2eState& st, const fs::path& work) {
  if (!st.ready) {
    synthetic::SyntheticSpec spec;
    st.corpus = synthetic::make_corpus(spec, 1234);
    st.runs.push_back(e2e_run(st.cfg, st.corpus, 42, work / "e2e_seed_42"));
    st.ready = true;
  }
  const E2eRun* first = nullptr;
  for (const auto& r : st.runs) {
    if (r.eval.seed == 42) first = &r;
  }
  if (!first) return {false, "seed 42 is not among the configured seeds"};
  const auto again = e2e_run(st.cfg, st.corpus, 42, work / "determinism_seed_42");
  if (again.train.log.size() != first->train.log.size()) return {false, "log lengths differ"};
  for (std::size_t i = 0; i < again.train.log.size(); ++i) {
    const auto& a = again.train.log[i];
    const auto& b = first->train.log[i];
    if (a.step != b.step || a.lr != b.lr || a.loss != b.loss) {
      return {false, "loss logs diverge at step " + std::to_string(i)};
    }
  }
  const auto ra = evaluation::aggregate(st.cfg.eval_profile, {first->eval}).to_json();
  const auto rb = evaluation::aggregate(st.cfg.eval_profile, {again.eval}).to_json();
  if (ra != rb) return {false, "reports differ"};
  return {true, std::to_string(again.train.log.size()) + " identical log records, identical reports"};
}

// ------------------------------------------------------------------ 10

Verdict liver_roi() {
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<int> shape(0, 9), coord(0, 511), extent(1, 400), blobs(1, 4);
  std::uniform_real_distribution<float> val(0.01f, 1.0f);
  int scaled = 0, empty = 0;
  for (int trial = 0; trial < 50; ++trial) {
    imaging::ImageTensor img(1, 512, 512, 0.0f);
    const int k = shape(rng);
    if (k == 0) {
      // all zero
    } else if (k <= 2) {
      for (int i = 0, n = blobs(rng) * 3; i < n; ++i) img.at(0, coord(rng), coord(rng)) = val(rng);
    } else {
      for (int b = 0, n = blobs(rng); b < n; ++b) {
        const int y0 = coord(rng), x0 = coord(rng);
        const int y1 = std::min(511, y0 + extent(rng)), x1 = std::min(511, x0 + extent(rng));
        for (int y = y0; y <= y1; ++y)
          for (int x = x0; x <= x1; ++x)
            if ((x + y) % 5 != 0 || k > 5) img.at(0, y, x) = val(rng);
      }
    }
    const auto want = oracle::nonzero_box(img.data, 512, 512);
    const auto r = imaging::liver_roi_preprocess(img, 224);
    if (r.image.height != 224 || r.image.width != 224 || r.image.channels != 1) {
      return {false, "mask " + std::to_string(trial) + ": output is not 224x224"};
    }
    if (want.has_value() != r.bbox.has_value()) return {false, "mask " + std::to_string(trial) + ": emptiness differs"};
    if (!want) {
      ++empty;
      if (!r.warning) return {false, "all-zero mask without warning"};
      continue;
    }
    const imaging::BoundingBox b{want->y0, want->x0, want->y1, want->x1};
    if (!(b == *r.bbox)) return {false, "mask " + std::to_string(trial) + ": bounding box differs"};
    const bool fits = b.height() <= 224 && b.width() <= 224;
    if (fits == r.scaled) return {false, "mask " + std::to_string(trial) + ": scaling decision wrong"};
    if (fits) {
      const int oy = (224 - b.height()) / 2, ox = (224 - b.width()) / 2;
      for (int y = 0; y < b.height(); ++y)
        for (int x = 0; x < b.width(); ++x)
          if (r.image.at(0, oy + y, ox + x) != img.at(0, b.y0 + y, b.x0 + x)) {
            return {false, "mask " + std::to_string(trial) + ": crop not centered unscaled"};
          }
    } else {
      ++scaled;
    }
  }
  return {true, "50 masks (" + std::to_string(scaled) + " scaled, " + std::to_string(empty) + " empty), boxes exact"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"QFAE acceptance suite"};
  std::string work = "acceptance_runs";
  std::vector<int> only;
  app.add_option("--work", work, "Directory for end-to-end run artifacts");
  app.add_option("--only", only, "Run only these criterion numbers");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);
  const std::set<int> selected(only.begin(), only.end());

  E2eState e2e;
  struct Criterion {
    int id;
    std::string name;
    double time_limit;  // seconds, 0 = none
    std::function<Verdict()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "structural_invariance", 10.0, structural_invariance},
      {2, "patchify_roundtrip", 5.0, roundtrip},
      {3, "gradient_checks", 60.0, gradient_checks},
      {4, "aggregation_oracle", 30.0, aggregation_oracle},
      {5, "cosine_bounds_fixed_points", 0.0, cosine_bounds},
      {6, "auroc_suite", 5.0, auroc_suite},
      {7, "frozen_contract", 0.0, frozen_contract},
      {8, "desk_e2e", 0.0, [&] { return desk_e2e(e2e, work); }},
      {9, "determinism", 0.0, [&] { return determinism(e2e, work); }},
      {10, "liver_roi", 0.0, liver_roi},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    if (c.time_limit > 0 && secs > c.time_limit) {
      v.pass = false;
      v.detail += "; over time limit " + fmt("%.0f", c.time_limit) + " s";
    }
    failures += v.pass ? 0 : 1;
    std::cout << (v.pass ? "PASS " : "FAIL ") << c.id << " " << c.name << ": " << v.detail << " ("
              << fmt("%.2f", secs) << " s)" << std::endl;
  }
  std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
