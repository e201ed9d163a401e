#include "qfae/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>

#include "CLI11.hpp"

#include "qfae/config.hpp"
#include "qfae/errors.hpp"
#include "qfae/evaluation.hpp"
#include "qfae/gradcheck.hpp"
#include "qfae/synthetic.hpp"
#include "qfae/training.hpp"

namespace qfae::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string config;
  std::vector<std::string> overrides;
  std::string archive_dir;
  bool toy = false;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = !c.config.empty() ? parse_config(c.config) : (c.toy ? RunConfig::toy() : RunConfig{});
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + kv + "'");
    apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out = c.out;
  if (!c.archive_dir.empty()) cfg.archive_dir = c.archive_dir;
  cfg.validate();
  return cfg;
}

std::string one_line(std::string s) {
  for (char& ch : s) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  return s;
}

std::string safe_name(const std::string& id) {
  std::string s = fs::path(id).replace_extension().generic_string();
  for (char& ch : s) {
    if (ch == '/' || ch == '\\') ch = '_';
  }
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
}

struct TrainedRun {
  fs::path checkpoint;
  training::TrainResult result;
};

TrainedRun train_one(const RunConfig& cfg, std::uint64_t seed, const training::Corpus& corpus, const fs::path& dir,
                     std::ostream& out) {
  fs::create_directories(dir);
  RunConfig run_cfg = cfg;
  run_cfg.seed = seed;
  auto model = QfaeModel::from_config(cfg.model, cfg.archive_dir);
  model.init(seed);
  std::ofstream log(dir / "train_log.jsonl");
  if (!log) throw IoError("cannot write " + (dir / "train_log.jsonl").string());
  auto res = training::train(cfg.train, seed, corpus, model,
                             [&](const training::LogRecord& r) { log << training::to_jsonl(r) << "\n"; });
  const fs::path ckpt = dir / "checkpoint.qfae";
  training::make_checkpoint(model, res, serialize_config(run_cfg)).write(ckpt);
  out << "seed " << seed << ": " << res.log.size() << " steps, final loss " << std::setprecision(6) << res.final_loss
      << ", checkpoint " << ckpt.string() << "\n";
  return {ckpt, std::move(res)};
}

// ---------------------------------------------------------------- commands

int cmd_preprocess_liver(const Common&, const std::string& in_dir, const std::string& out_dir, int side,
                         bool bilateral, double ss, double rs, std::ostream& out, std::ostream& err) {
  if (!fs::is_directory(in_dir)) throw IoError("input directory not found: " + in_dir);
  evaluation::EvalProfile p = evaluation::EvalProfile::named("liver");
  p.bilateral = bilateral;
  p.bilateral_params = {ss, rs};
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(in_dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".png" || ext == ".PNG" || ext == ".tif" || ext == ".tiff" || ext == ".bmp")) {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    std::vector<std::string> warnings;
    const auto raw = imaging::load_image(f);
    auto img = evaluation::preprocess(raw, p, side, &warnings);
    for (const auto& w : warnings) err << "qfae: warning: " << f.string() << ": " << w << "\n";
    imaging::ImageTensor gray(1, img.height, img.width);
    std::copy(img.data.begin(), img.data.begin() + static_cast<std::ptrdiff_t>(gray.size()), gray.data.begin());
    const fs::path dst = fs::path(out_dir) / fs::relative(f, in_dir);
    fs::create_directories(dst.parent_path());
    imaging::save_image(dst, gray, 8);
  }
  out << "preprocessed " << files.size() << " images into " << out_dir << "\n";
  return kOk;
}

int cmd_train(const Common& common, const std::string& data, std::optional<int> epochs, std::optional<long> max_steps,
              std::ostream& out) {
  RunConfig cfg = resolve(common);
  if (epochs) cfg.train.epochs = *epochs;
  if (max_steps) cfg.train.max_steps = *max_steps;
  cfg.validate();
  const auto idx = evaluation::load_index(data);
  const auto corpus = evaluation::load_train(data, idx, cfg.profile(), cfg.model.side);
  const std::vector<std::uint64_t> seeds = common.seed ? std::vector<std::uint64_t>{*common.seed} : cfg.train.seeds;
  for (auto s : seeds) train_one(cfg, s, corpus, fs::path(cfg.out) / ("seed_" + std::to_string(s)), out);
  return kOk;
}

evaluation::EvalProfile profile_for(const Common& common, const Checkpoint& ckpt, const std::string& profile_name) {
  RunConfig cfg = (!common.config.empty() || !common.overrides.empty()) ? resolve(common) : ckpt.config;
  if (!profile_name.empty()) apply_override(cfg, "eval.profile", "\"" + profile_name + "\"");
  if (cfg.model.side != ckpt.config.model.side) {
    throw ValidationError("profile side " + std::to_string(cfg.model.side) + " does not match checkpoint side " +
                          std::to_string(ckpt.config.model.side));
  }
  return cfg.profile();
}

int cmd_evaluate(const Common& common, const std::string& data, const std::vector<std::string>& checkpoints,
                 const std::string& profile_name, bool export_maps, std::ostream& out) {
  if (checkpoints.empty()) throw ValidationError("evaluate needs at least one --checkpoint");
  const fs::path out_dir = common.out.empty() ? fs::path("runs") : fs::path(common.out);
  fs::create_directories(out_dir);
  const auto idx = evaluation::load_index(data);
  std::vector<evaluation::RunResult> runs;
  std::string pname;
  std::optional<std::vector<evaluation::TestItem>> test;
  for (const auto& c : checkpoints) {
    const auto ckpt = read_checkpoint(c);
    const auto profile = profile_for(common, ckpt, profile_name);
    pname = profile.name;
    if (!test) test = evaluation::load_test(data, idx, profile, ckpt.config.model.side);
    const auto model = load_model(ckpt, common.archive_dir);
    evaluation::MapSink sink;
    const fs::path maps = out_dir / ("maps_seed_" + std::to_string(ckpt.config.seed));
    if (export_maps) {
      fs::create_directories(maps);
      sink = [&](const evaluation::TestItem& item, const perceptual::Map& m) {
        evaluation::write_map_png(maps / (safe_name(item.id) + ".png"), m);
        evaluation::write_map_raw(maps / (safe_name(item.id) + ".f32"), m);
      };
    }
    runs.push_back(evaluation::evaluate(model, *test, profile, ckpt.config.seed, sink, ckpt.config.train.workers));
  }
  const auto report = evaluation::aggregate(pname, std::move(runs));
  const auto json = report.to_json();
  write_text(out_dir / "report.json", json + "\n");
  out << json << "\n";
  return kOk;
}

int cmd_score(const Common& common, const std::string& image, const std::string& checkpoint,
              const std::string& profile_name, std::ostream& out) {
  const auto ckpt = read_checkpoint(checkpoint);
  const auto profile = profile_for(common, ckpt, profile_name);
  const auto model = load_model(ckpt, common.archive_dir);
  const auto img = evaluation::preprocess(imaging::load_image(image), profile, ckpt.config.model.side);
  const auto scored = evaluation::score_image(model, img, profile);
  const fs::path out_dir = common.out.empty() ? fs::path(".") : fs::path(common.out);
  fs::create_directories(out_dir);
  const std::string stem = fs::path(image).stem().string();
  evaluation::write_map_png(out_dir / (stem + "_map.png"), scored.pixel_map);
  evaluation::write_map_raw(out_dir / (stem + "_map.f32"), scored.pixel_map);
  out << std::setprecision(9) << "score " << scored.score << "\n";
  out << "map " << (out_dir / (stem + "_map.png")).string() << "\n";
  return kOk;
}

int cmd_export_maps(const Common& common, const std::string& data, const std::string& checkpoint,
                    const std::string& profile_name, std::ostream& out) {
  const auto ckpt = read_checkpoint(checkpoint);
  const auto profile = profile_for(common, ckpt, profile_name);
  const auto model = load_model(ckpt, common.archive_dir);
  const auto idx = evaluation::load_index(data);
  const auto test = evaluation::load_test(data, idx, profile, ckpt.config.model.side);
  const fs::path dir = (common.out.empty() ? fs::path("runs") : fs::path(common.out)) / "maps";
  fs::create_directories(dir);
  std::size_t n = 0;
  for (const auto& item : test) {
    const auto scored = evaluation::score_image(model, item.image, profile);
    evaluation::write_map_png(dir / (safe_name(item.id) + ".png"), scored.pixel_map);
    evaluation::write_map_raw(dir / (safe_name(item.id) + ".f32"), scored.pixel_map);
    out << item.id << " " << std::setprecision(9) << scored.score << "\n";
    ++n;
  }
  out << "wrote " << n << " maps to " << dir.string() << "\n";
  return kOk;
}

int cmd_gradcheck(const Common& common, int coords, std::ostream& out, std::ostream& err) {
  gradcheck::Options opt;
  if (common.seed) opt.seed = *common.seed;
  opt.max_coords_per_tensor = coords;
  const auto results = gradcheck::run_all(opt);
  for (const auto& r : results) {
    out << std::setw(34) << std::left << r.name << " rel_error " << std::scientific << std::setprecision(3)
        << r.rel_error << " (" << r.coords << " coords)\n";
  }
  const double m = gradcheck::max_error(results);
  out << "max_rel_error " << std::scientific << std::setprecision(6) << m << "\n";
  if (m < 1e-4) return kOk;
  err << "qfae: error[gradcheck]: max relative error " << m << " exceeds 1e-4\n";
  return kRuntime;
}

int cmd_synthetic_bench(Common common, std::optional<int> epochs, const std::string& write_data, std::uint64_t data_seed,
                        std::ostream& out) {
  if (common.config.empty()) common.toy = true;
  RunConfig cfg = resolve(common);
  if (epochs) cfg.train.epochs = *epochs;
  cfg.validate();
  synthetic::SyntheticSpec spec;
  spec.side = cfg.model.side;
  const auto corpus = synthetic::make_corpus(spec, data_seed);
  if (!write_data.empty()) synthetic::write_dataset(write_data, corpus);

  const std::vector<std::uint64_t> seeds = common.seed ? std::vector<std::uint64_t>{*common.seed} : cfg.train.seeds;
  const auto profile = cfg.profile();
  std::vector<evaluation::RunResult> runs;
  for (auto s : seeds) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto run = train_one(cfg, s, corpus.train, fs::path(cfg.out) / ("seed_" + std::to_string(s)), out);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    auto model = load_model(read_checkpoint(run.checkpoint), cfg.archive_dir);
    runs.push_back(evaluation::evaluate(model, corpus.test, profile, s, {}, cfg.train.workers));
    out << "seed " << s << ": train " << std::fixed << std::setprecision(1) << secs << " s, auroc "
        << std::setprecision(4) << runs.back().auroc << "\n";
    out.unsetf(std::ios::floatfield);
  }
  const auto report = evaluation::aggregate(profile.name, std::move(runs));
  write_text(fs::path(cfg.out) / "report.json", report.to_json() + "\n");
  out << std::fixed << std::setprecision(4) << "mean auroc " << report.mean << " (population std " << report.std
      << ")\n";
  return kOk;
}

}  // namespace

int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Q-Former autoencoder anomaly detection", "qfae"};
  app.require_subcommand(1);
  app.fallthrough();

  Common common;
  app.add_option("--seed", common.seed, "Run seed");
  app.add_option("--out", common.out, "Output directory");
  app.add_option("--config", common.config, "Config file (key = value lines)")->check(CLI::ExistingFile);
  app.add_option("--set", common.overrides, "Config override key=value (repeatable)");
  app.add_option("--archive-dir", common.archive_dir, "Backbone archive directory (default: $QFAE_ARCHIVE_DIR)");
  app.add_flag("--toy", common.toy, "Start from the desk-scale toy configuration");

  std::string in_dir, out_dir_liver, data, image, checkpoint, profile, write_data;
  std::vector<std::string> checkpoints;
  int side = 224;
  bool no_bilateral = false, export_maps = false;
  double spatial_sigma = 3.0, range_sigma = 0.1;
  std::optional<int> epochs;
  std::optional<long> max_steps;
  int coords = 0;
  std::uint64_t data_seed = 1234;

  auto* liver = app.add_subcommand("preprocess-liver", "Liver ROI crop + bilateral filter to side x side");
  liver->add_option("--in", in_dir, "Input directory")->required();
  liver->add_option("--out", out_dir_liver, "Output directory")->required();
  liver->add_option("--side", side, "Output side")->check(CLI::PositiveNumber);
  liver->add_flag("--no-bilateral", no_bilateral, "Skip the bilateral filter");
  liver->add_option("--spatial-sigma", spatial_sigma, "Bilateral spatial sigma (px)");
  liver->add_option("--range-sigma", range_sigma, "Bilateral range sigma");

  auto* train = app.add_subcommand("train", "Train on data/train/good (one run per seed)");
  train->add_option("--data", data, "Dataset root")->required();
  train->add_option("--epochs", epochs, "Override train.epochs");
  train->add_option("--max-steps", max_steps, "Override train.max_steps");

  auto* evaluate = app.add_subcommand("evaluate", "Score the test split and report AUROC");
  evaluate->add_option("--data", data, "Dataset root")->required();
  evaluate->add_option("--checkpoint", checkpoints, "Checkpoint(s); several give mean and std")->required();
  evaluate->add_option("--profile", profile, "brats | resc | rsna | liver | custom");
  evaluate->add_flag("--export-maps", export_maps, "Also write pixel maps");

  auto* score = app.add_subcommand("score", "Score one image and write its anomaly map");
  score->add_option("--image", image, "Input image")->required();
  score->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
  score->add_option("--profile", profile, "Evaluation profile");

  auto* maps = app.add_subcommand("export-maps", "Write anomaly maps for every test image");
  maps->add_option("--data", data, "Dataset root")->required();
  maps->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
  maps->add_option("--profile", profile, "Evaluation profile");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks in double precision");
  gc->add_option("--coords", coords, "Sampled coordinates per tensor (0 = all)");

  auto* bench = app.add_subcommand("synthetic-bench", "Toy end-to-end run on synthetic textures");
  bench->add_option("--epochs", epochs, "Override train.epochs");
  bench->add_option("--write-data", write_data, "Also write the synthetic dataset here");
  bench->add_option("--data-seed", data_seed, "Seed of the synthetic corpus");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    std::string msg = one_line(e.what());
    for (int i = 1; i < argc; ++i) {
      const std::string a = argv[i];
      if (a.empty() || a[0] == '-') continue;
      bool known = false;
      for (const auto* sub : app.get_subcommands({})) known = known || sub->get_name() == a;
      if (!known && (i == 1 || std::string(argv[i - 1]).rfind("--", 0) != 0)) msg = "unknown subcommand '" + a + "'";
      break;
    }
    err << "qfae: error[usage]: " << msg << "\n" << app.help();
    return kUsage;
  }

  try {
    if (*liver) {
      return cmd_preprocess_liver(common, in_dir, out_dir_liver, side, !no_bilateral, spatial_sigma, range_sigma, out,
                                  err);
    }
    if (*train) return cmd_train(common, data, epochs, max_steps, out);
    if (*evaluate) return cmd_evaluate(common, data, checkpoints, profile, export_maps, out);
    if (*score) return cmd_score(common, image, checkpoint, profile, out);
    if (*maps) return cmd_export_maps(common, data, checkpoint, profile, out);
    if (*gc) return cmd_gradcheck(common, coords, out, err);
    if (*bench) return cmd_synthetic_bench(common, epochs, write_data, data_seed, out);
  } catch (const ValidationError& e) {
    err << "qfae: error[validation]: " << one_line(e.what()) << "\n";
    return kValidation;
  } catch (const ManifestError& e) {
    err << "qfae: error[manifest]: " << one_line(e.what()) << "\n";
    return kRuntime;
  } catch (const NumericalError& e) {
    err << "qfae: error[numerical]: step " << e.step() << ": " << one_line(e.what()) << "\n";
    return kRuntime;
  } catch (const IoError& e) {
    err << "qfae: error[io]: " << one_line(e.what()) << "\n";
    return kRuntime;
  } catch (const std::exception& e) {
    err << "qfae: error[runtime]: " << one_line(e.what()) << "\n";
    return kRuntime;
  }
  err << "qfae: error[usage]: no subcommand\n" << app.help();
  return kUsage;
}

}  // namespace qfae::cli
