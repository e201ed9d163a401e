#include "qfae/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

#include "qfae/errors.hpp"

namespace qfae {

using nlohmann::ordered_json;

namespace {

// -------------------------------------------------------------- to JSON tree

ordered_json spec_json(const BackboneSource& s) {
  ordered_json j;
  j["name"] = s.spec.name;
  j["depth"] = s.spec.depth;
  j["width"] = s.spec.width;
  j["heads"] = s.spec.heads;
  j["patch_size"] = s.spec.patch_size;
  j["special_tokens"] = s.spec.special_tokens;
  j["mlp_ratio"] = s.spec.mlp_ratio;
  j["in_channels"] = s.spec.in_channels;
  j["archive"] = s.archive;
  j["manifest"] = s.manifest;
  j["toy_seed"] = s.toy_seed;
  j["toy_pretrain_grid"] = s.toy_pretrain_grid;
  return j;
}

ordered_json encoder_json(const EncoderEntry& e) {
  ordered_json j = spec_json(e.source);
  j["tap_layers"] = e.source.spec.tap_layers;
  j["proj_out"] = e.proj_out;
  return j;
}

ordered_json to_tree(const RunConfig& c) {
  ordered_json j;
  j["side"] = c.model.side;
  j["seed"] = c.seed;
  j["out"] = c.out;
  j["archive_dir"] = c.archive_dir;
  j["encoders"] = ordered_json::array();
  for (const auto& e : c.model.encoders) j["encoders"].push_back(encoder_json(e));

  auto& q = j["qformer"];
  q["width"] = c.model.qformer.width;
  q["heads"] = c.model.qformer.heads;
  q["mlp_ratio"] = c.model.qformer.mlp_ratio;
  q["blocks"] = c.model.qformer.blocks;

  auto& d = j["decoder"];
  d["width"] = c.model.decoder.width;
  d["depth"] = c.model.decoder.depth;
  d["heads"] = c.model.decoder.heads;
  d["mlp_ratio"] = c.model.decoder.mlp_ratio;
  d["patch_size"] = c.model.decoder.patch_size;
  d["channels"] = c.model.decoder.channels;

  j["perceptual_model"] = spec_json(c.model.perceptual_model);

  const auto& pc = c.model.perceptual;
  auto& p = j["perceptual"];
  p["train_layers"] = pc.train.layers;
  p["train_patch_sizes"] = pc.train.patch_sizes;
  p["layers"] = pc.eval.layers;
  p["patch_sizes"] = pc.eval.patch_sizes;
  p["score_mode"] = perceptual::to_string(pc.score_mode);
  p["map_mode"] = perceptual::to_string(pc.map_mode);
  p["loss_form"] = perceptual::to_string(pc.loss_form);

  const auto& t = c.train;
  auto& o = j["optimizer"];
  o["name"] = "adam";
  o["max_lr"] = t.max_lr;
  o["beta1"] = t.adam.beta1;
  o["beta2"] = t.adam.beta2;
  o["eps"] = t.adam.eps;
  o["weight_decay"] = t.adam.weight_decay;

  auto& s = j["schedule"];
  s["name"] = "onecycle";
  s["pct_start"] = t.pct_start;
  s["div_factor"] = t.div_factor;
  s["final_div_factor"] = t.final_div_factor;

  auto& tr = j["train"];
  tr["epochs"] = t.epochs;
  tr["batch"] = t.batch;
  tr["seeds"] = t.seeds;
  tr["loss"] = training::to_string(t.loss);
  tr["augment"] = t.augment;
  tr["max_steps"] = t.max_steps;
  tr["workers"] = t.workers;

  const auto& a = t.augmentation;
  auto& ag = j["augment"];
  ag["crop_scale_min"] = a.crop_scale_min;
  ag["crop_scale_max"] = a.crop_scale_max;
  ag["crop_aspect_min"] = a.crop_aspect_min;
  ag["crop_aspect_max"] = a.crop_aspect_max;
  ag["rotation_deg"] = a.rotation_deg;
  ag["vflip_prob"] = a.vflip_prob;
  ag["brightness"] = a.brightness;
  ag["contrast"] = a.contrast;
  ag["norm_mean"] = a.norm_mean;
  ag["norm_std"] = a.norm_std;

  auto& ev = j["eval"];
  ev["profile"] = c.eval_profile;
  ev["liver_roi"] = c.eval_liver_roi;
  ev["bilateral"] = c.eval_bilateral;
  ev["spatial_sigma"] = c.bilateral.spatial_sigma;
  ev["range_sigma"] = c.bilateral.range_sigma;
  return j;
}

// ------------------------------------------------------------ from JSON tree

template <typename T>
T get(const ordered_json& j, const std::string& key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("config: '" + where + key + "' has the wrong type");
  }
}

encoder::BackboneSpec preset(const std::string& name) {
  if (name == "dinov2_vitl14_reg") return encoder::BackboneSpec::dinov2_vitl14_reg();
  if (name == "dino_vitb8") return encoder::BackboneSpec::dino_vitb8();
  if (name == "mae_vitl16") return encoder::BackboneSpec::mae_vitl16();
  throw ValidationError("config: unknown backbone preset '" + name + "'");
}

void check_keys(const ordered_json& j, const ordered_json& allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError("config: '" + where + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() == "preset") continue;
    if (!allowed.contains(it.key())) throw ValidationError("config: unknown key '" + where + "." + it.key() + "'");
  }
}

BackboneSource source_from(const ordered_json& j, BackboneSource base, const std::string& where) {
  if (j.contains("preset")) {
    const auto name = get<std::string>(j, "preset", where + ".");
    base.spec = preset(name);
  }
  auto& s = base.spec;
  const std::string w = where + ".";
  if (j.contains("name")) s.name = get<std::string>(j, "name", w);
  if (j.contains("depth")) s.depth = get<int>(j, "depth", w);
  if (j.contains("width")) s.width = get<int>(j, "width", w);
  if (j.contains("heads")) s.heads = get<int>(j, "heads", w);
  if (j.contains("patch_size")) s.patch_size = get<int>(j, "patch_size", w);
  if (j.contains("special_tokens")) s.special_tokens = get<int>(j, "special_tokens", w);
  if (j.contains("mlp_ratio")) s.mlp_ratio = get<double>(j, "mlp_ratio", w);
  if (j.contains("in_channels")) s.in_channels = get<int>(j, "in_channels", w);
  if (j.contains("tap_layers")) s.tap_layers = get<std::vector<int>>(j, "tap_layers", w);
  if (j.contains("archive")) base.archive = get<std::string>(j, "archive", w);
  if (j.contains("manifest")) base.manifest = get<std::string>(j, "manifest", w);
  if (j.contains("toy_seed")) base.toy_seed = get<std::int64_t>(j, "toy_seed", w);
  if (j.contains("toy_pretrain_grid")) base.toy_pretrain_grid = get<int>(j, "toy_pretrain_grid", w);
  return base;
}

RunConfig from_tree(const ordered_json& j) {
  RunConfig c;
  c.model.side = get<int>(j, "side", "");
  c.seed = get<std::uint64_t>(j, "seed", "");
  c.out = get<std::string>(j, "out", "");
  c.archive_dir = get<std::string>(j, "archive_dir", "");

  const ordered_json enc_template = encoder_json(EncoderEntry{});
  c.model.encoders.clear();
  const auto& encs = j.at("encoders");
  if (!encs.is_array()) throw ValidationError("config: 'encoders' must be an array");
  for (std::size_t i = 0; i < encs.size(); ++i) {
    const std::string where = "encoders[" + std::to_string(i) + "]";
    check_keys(encs[i], enc_template, where);
    EncoderEntry e;
    e.source = source_from(encs[i], e.source, where);
    if (encs[i].contains("proj_out")) e.proj_out = get<int>(encs[i], "proj_out", where + ".");
    c.model.encoders.push_back(std::move(e));
  }

  const auto& q = j.at("qformer");
  c.model.qformer.width = get<int>(q, "width", "qformer.");
  c.model.qformer.heads = get<int>(q, "heads", "qformer.");
  c.model.qformer.mlp_ratio = get<double>(q, "mlp_ratio", "qformer.");
  c.model.qformer.blocks = get<int>(q, "blocks", "qformer.");

  const auto& d = j.at("decoder");
  c.model.decoder.width = get<int>(d, "width", "decoder.");
  c.model.decoder.depth = get<int>(d, "depth", "decoder.");
  c.model.decoder.heads = get<int>(d, "heads", "decoder.");
  c.model.decoder.mlp_ratio = get<double>(d, "mlp_ratio", "decoder.");
  c.model.decoder.patch_size = get<int>(d, "patch_size", "decoder.");
  c.model.decoder.channels = get<int>(d, "channels", "decoder.");

  const auto& pm = j.at("perceptual_model");
  check_keys(pm, spec_json(BackboneSource{}), "perceptual_model");
  c.model.perceptual_model = source_from(pm, BackboneSource{}, "perceptual_model");

  const auto& p = j.at("perceptual");
  auto& pc = c.model.perceptual;
  pc.train.layers = get<std::vector<int>>(p, "train_layers", "perceptual.");
  pc.train.patch_sizes = get<std::vector<int>>(p, "train_patch_sizes", "perceptual.");
  pc.eval.layers = get<std::vector<int>>(p, "layers", "perceptual.");
  pc.eval.patch_sizes = get<std::vector<int>>(p, "patch_sizes", "perceptual.");
  pc.score_mode = perceptual::parse_score_mode(get<std::string>(p, "score_mode", "perceptual."));
  pc.map_mode = perceptual::parse_map_mode(get<std::string>(p, "map_mode", "perceptual."));
  pc.loss_form = perceptual::parse_loss_form(get<std::string>(p, "loss_form", "perceptual."));

  auto& t = c.train;
  const auto& o = j.at("optimizer");
  if (get<std::string>(o, "name", "optimizer.") != "adam") throw ValidationError("config: only optimizer.name = adam is supported");
  t.max_lr = get<double>(o, "max_lr", "optimizer.");
  t.adam.beta1 = get<double>(o, "beta1", "optimizer.");
  t.adam.beta2 = get<double>(o, "beta2", "optimizer.");
  t.adam.eps = get<double>(o, "eps", "optimizer.");
  t.adam.weight_decay = get<double>(o, "weight_decay", "optimizer.");

  const auto& s = j.at("schedule");
  if (get<std::string>(s, "name", "schedule.") != "onecycle") throw ValidationError("config: only schedule.name = onecycle is supported");
  t.pct_start = get<double>(s, "pct_start", "schedule.");
  t.div_factor = get<double>(s, "div_factor", "schedule.");
  t.final_div_factor = get<double>(s, "final_div_factor", "schedule.");

  const auto& tr = j.at("train");
  t.epochs = get<int>(tr, "epochs", "train.");
  t.batch = get<int>(tr, "batch", "train.");
  t.seeds = get<std::vector<std::uint64_t>>(tr, "seeds", "train.");
  t.loss = training::parse_loss_mode(get<std::string>(tr, "loss", "train."));
  t.augment = get<bool>(tr, "augment", "train.");
  t.max_steps = get<long>(tr, "max_steps", "train.");
  t.workers = get<int>(tr, "workers", "train.");

  const auto& ag = j.at("augment");
  auto& a = t.augmentation;
  a.crop_scale_min = get<double>(ag, "crop_scale_min", "augment.");
  a.crop_scale_max = get<double>(ag, "crop_scale_max", "augment.");
  a.crop_aspect_min = get<double>(ag, "crop_aspect_min", "augment.");
  a.crop_aspect_max = get<double>(ag, "crop_aspect_max", "augment.");
  a.rotation_deg = get<double>(ag, "rotation_deg", "augment.");
  a.vflip_prob = get<double>(ag, "vflip_prob", "augment.");
  a.brightness = get<double>(ag, "brightness", "augment.");
  a.contrast = get<double>(ag, "contrast", "augment.");
  a.norm_mean = get<double>(ag, "norm_mean", "augment.");
  a.norm_std = get<double>(ag, "norm_std", "augment.");

  const auto& ev = j.at("eval");
  c.eval_profile = get<std::string>(ev, "profile", "eval.");
  c.eval_liver_roi = get<bool>(ev, "liver_roi", "eval.");
  c.eval_bilateral = get<bool>(ev, "bilateral", "eval.");
  c.bilateral.spatial_sigma = get<double>(ev, "spatial_sigma", "eval.");
  c.bilateral.range_sigma = get<double>(ev, "range_sigma", "eval.");
  return c;
}

// --------------------------------------------------------------- key setting

ordered_json parse_value(const std::string& raw, const std::string& key) {
  try {
    return ordered_json::parse(raw);
  } catch (const nlohmann::json::exception&) {
  }
  const bool bare = !raw.empty() && raw.find_first_of(" \t\"'[]{},:") == std::string::npos;
  if (bare) return raw;
  throw ValidationError("config: value of '" + key + "' is not valid JSON: " + raw);
}

bool compatible(const ordered_json& slot, const ordered_json& v) {
  if (slot.is_boolean()) return v.is_boolean();
  if (slot.is_number_integer()) return v.is_number_integer();
  if (slot.is_number()) return v.is_number();
  if (slot.is_string()) return v.is_string();
  if (slot.is_array()) return v.is_array();
  return slot.type() == v.type();
}

void set_key(ordered_json& tree, const std::string& key, const ordered_json& v) {
  ordered_json* node = &tree;
  std::size_t start = 0;
  std::string path;
  while (true) {
    const std::size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    path += (path.empty() ? "" : ".") + part;
    if (part.empty() || !node->is_object() || !node->contains(part)) {
      throw ValidationError("config: unknown key '" + key + "'");
    }
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ValidationError("config: '" + key + "' is a section, not a key");
  if (!compatible(*node, v)) {
    throw ValidationError("config: type mismatch for '" + key + "' (expected " + std::string(node->type_name()) +
                          ", got " + std::string(v.type_name()) + ")");
  }
  *node = v;
}

void apply_profile(RunConfig& c, const std::string& name) {
  const auto p = evaluation::EvalProfile::named(name);
  c.eval_profile = name;
  c.model.perceptual.eval = p.scales;
  c.model.perceptual.score_mode = p.score_mode;
  c.model.perceptual.map_mode = p.map_mode;
  c.eval_liver_roi = p.liver_roi;
  c.eval_bilateral = p.bilateral;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_string = !in_string;
    if (line[i] == '#' && !in_string) return line.substr(0, i);
  }
  return line;
}

}  // namespace

// --------------------------------------------------------------- public API

RunConfig RunConfig::toy() {
  RunConfig c;
  c.model = ModelConfig::toy();
  c.train.epochs = 20;
  c.train.batch = 16;
  c.train.max_lr = 1e-3;
  c.train.seeds = {42, 7, 13};
  c.train.augment = false;
  c.eval_profile = "custom";
  c.out = "runs/toy";
  return c;
}

evaluation::EvalProfile RunConfig::profile() const {
  evaluation::EvalProfile p;
  p.name = eval_profile;
  p.scales = model.perceptual.eval;
  p.score_mode = model.perceptual.score_mode;
  p.map_mode = model.perceptual.map_mode;
  p.liver_roi = eval_liver_roi;
  p.bilateral = eval_bilateral;
  p.bilateral_params = bilateral;
  p.norm_mean = train.augmentation.norm_mean;
  p.norm_std = train.augmentation.norm_std;
  return p;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (!evaluation::EvalProfile::is_known(eval_profile)) {
    throw ValidationError("config: unknown eval.profile '" + eval_profile + "'");
  }
  if (!(bilateral.spatial_sigma > 0.0) || !(bilateral.range_sigma > 0.0)) {
    throw ValidationError("config: bilateral sigmas must be positive");
  }
}

RunConfig parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ValidationError("config line " + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ValidationError("config line " + std::to_string(lineno) + ": empty key");
    if (!section.empty()) key = section + "." + key;
    entries.emplace_back(key, trim(line.substr(eq + 1)));
  }

  RunConfig cfg;
  for (const auto& [k, v] : entries) {
    if (k == "eval.profile") {
      const auto val = parse_value(v, k);
      if (!val.is_string()) throw ValidationError("config: type mismatch for 'eval.profile'");
      apply_profile(cfg, val.get<std::string>());
    }
  }
  ordered_json tree = to_tree(cfg);
  for (const auto& [k, v] : entries) set_key(tree, k, parse_value(v, k));
  cfg = from_tree(tree);
  cfg.validate();
  return cfg;
}

RunConfig parse_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file: " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

std::string serialize_config(const RunConfig& cfg) {
  const ordered_json tree = to_tree(cfg);
  std::ostringstream out;
  for (auto it = tree.begin(); it != tree.end(); ++it) {
    if (!it.value().is_object()) out << it.key() << " = " << it.value().dump() << "\n";
  }
  for (auto it = tree.begin(); it != tree.end(); ++it) {
    if (!it.value().is_object()) continue;
    out << "\n[" << it.key() << "]\n";
    for (auto kv = it.value().begin(); kv != it.value().end(); ++kv) out << kv.key() << " = " << kv.value().dump() << "\n";
  }
  return out.str();
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "eval.profile") {
    const auto val = parse_value(value, key);
    if (!val.is_string()) throw ValidationError("config: type mismatch for 'eval.profile'");
    apply_profile(cfg, val.get<std::string>());
  }
  ordered_json tree = to_tree(cfg);
  set_key(tree, key, parse_value(value, key));
  RunConfig next = from_tree(tree);
  next.validate();
  cfg = std::move(next);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  Checkpoint c;
  c.archive = TensorArchive::read(path);
  auto it = c.archive.metadata.find("config");
  if (it == c.archive.metadata.end()) throw ValidationError("checkpoint has no embedded config: " + path.string());
  c.config = parse_config_text(it->second);
  return c;
}

QfaeModel load_model(const Checkpoint& ckpt, const std::filesystem::path& archive_dir) {
  const std::filesystem::path dir = archive_dir.empty() ? std::filesystem::path(ckpt.config.archive_dir) : archive_dir;
  auto model = QfaeModel::from_config(ckpt.config.model, dir);
  model.import_trainable(ckpt.archive.tensors);
  return model;
}

}  // namespace qfae
