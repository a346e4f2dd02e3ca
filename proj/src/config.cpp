#include "volt/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "volt/error.hpp"
#include "volt/rng.hpp"

namespace volt {

namespace {

struct Entry {
  std::string key;
  std::string value;
  std::size_t line;
};

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<Entry> tokenize(std::string_view text) {
  std::vector<Entry> out;
  std::set<std::string> seen;
  std::string section;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": unterminated section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (section.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    std::string key(trim(line.substr(0, eq)));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    if (!section.empty()) key = section + "." + key;
    if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    out.push_back({std::move(key), std::string(trim(line.substr(eq + 1))), line_no});
  }
  return out;
}

[[noreturn]] void bad_value(const Entry& e, std::string_view expected) {
  throw ConfigError("line " + std::to_string(e.line) + ": key '" + e.key + "' expects " + std::string(expected) +
                    ", got '" + e.value + "'");
}

double to_double(const Entry& e, std::string_view s) {
  s = trim(s);
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) bad_value(e, "a number");
  return v;
}

std::uint64_t to_u64(const Entry& e, std::string_view s) {
  s = trim(s);
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) bad_value(e, "a non-negative integer");
  return v;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t pos = 0;
  for (;;) {
    const auto q = s.find(sep, pos);
    parts.push_back(trim(s.substr(pos, q == std::string_view::npos ? std::string_view::npos : q - pos)));
    if (q == std::string_view::npos) break;
    pos = q + 1;
  }
  return parts;
}

bool to_bool(const Entry& e) {
  std::string v = e.value;
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(e, "a boolean");
}

// "lo,hi" or a single value v meaning [v, v].
Range to_range(const Entry& e) {
  const auto parts = split(e.value, ',');
  if (parts.size() == 1) {
    const double v = to_double(e, parts[0]);
    return {v, v};
  }
  if (parts.size() != 2) bad_value(e, "lo,hi");
  return {to_double(e, parts[0]), to_double(e, parts[1])};
}

template <std::size_t N>
std::array<double, N> to_doubles(const Entry& e) {
  const auto parts = split(e.value, ',');
  if (parts.size() != N) bad_value(e, std::to_string(N) + " comma-separated numbers");
  std::array<double, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = to_double(e, parts[i]);
  return out;
}

std::vector<ElasticPass> to_elastic(const Entry& e) {
  std::vector<ElasticPass> out;
  if (e.value == "none" || e.value.empty()) return out;
  for (auto part : split(e.value, ',')) {
    const auto gm = split(part, ':');
    if (gm.size() != 2) bad_value(e, "granularity:magnitude pairs separated by commas, or none");
    out.push_back({to_double(e, gm[0]), to_double(e, gm[1])});
  }
  return out;
}

using Setter = std::function<void(RunConfig&, const Entry&)>;

const std::map<std::string, Setter, std::less<>>& schema() {
  static const std::map<std::string, Setter, std::less<>> table = [] {
    std::map<std::string, Setter, std::less<>> t;
    // model
    t["model.preset"] = [](RunConfig& c, const Entry& e) {
      EncoderConfig::preset(e.value);
      c.model.preset = e.value;
    };
    t["model.depth"] = [](RunConfig& c, const Entry& e) { c.model.depth = to_u64(e, e.value); };
    t["model.width"] = [](RunConfig& c, const Entry& e) { c.model.width = to_u64(e, e.value); };
    t["model.heads"] = [](RunConfig& c, const Entry& e) { c.model.heads = to_u64(e, e.value); };
    t["model.mlp_ratio"] = [](RunConfig& c, const Entry& e) { c.model.mlp_ratio = to_u64(e, e.value); };
    t["model.droppath"] = [](RunConfig& c, const Entry& e) { c.model.droppath = to_double(e, e.value); };
    t["model.qk_norm"] = [](RunConfig& c, const Entry& e) { c.model.qk_norm = to_bool(e); };
    t["model.rope"] = [](RunConfig& c, const Entry& e) {
      if (e.value != "asymmetric" && e.value != "symmetric") bad_value(e, "asymmetric or symmetric");
      c.model.rope_allocation = e.value;
    };
    t["model.rope_pairs"] = [](RunConfig& c, const Entry& e) {
      const auto parts = split(e.value, ',');
      if (parts.size() != 3) bad_value(e, "three pair counts x,y,z");
      std::array<std::size_t, 3> p{};
      for (int a = 0; a < 3; ++a) p[a] = to_u64(e, parts[a]);
      c.model.rope_pairs = p;
    };
    t["model.rope_base"] = [](RunConfig& c, const Entry& e) { c.model.rope_base = to_double(e, e.value); };
    t["model.coordinate_mode"] = [](RunConfig& c, const Entry& e) {
      if (e.value == "metric_index") c.model.coordinate_mode = CoordinateMode::metric_index;
      else if (e.value == "per_scene_normalized") c.model.coordinate_mode = CoordinateMode::per_scene_normalized;
      else bad_value(e, "metric_index or per_scene_normalized");
    };
    t["model.patch_size"] = [](RunConfig& c, const Entry& e) {
      const auto p = to_u64(e, e.value);
      if (p < 1 || p > 64) bad_value(e, "a patch size in [1, 64]");
      c.model.patch_size = static_cast<int>(p);
    };
    t["model.decoder"] = [](RunConfig& c, const Entry& e) {
      try {
        c.model.decoder = parse_decoder_mode(e.value);
      } catch (const Error&) {
        bad_value(e, "none, light or big");
      }
    };
    t["model.decoder_width"] = [](RunConfig& c, const Entry& e) { c.model.decoder_width = to_u64(e, e.value); };
    t["model.voxel_size"] = [](RunConfig& c, const Entry& e) { c.model.voxel_size = to_double(e, e.value); };
    t["model.voxel_sampling"] = [](RunConfig& c, const Entry& e) {
      if (e.value == "deterministic") c.model.sampling = VoxelSampling::deterministic;
      else if (e.value == "stochastic") c.model.sampling = VoxelSampling::stochastic;
      else bad_value(e, "deterministic or stochastic");
    };
    t["model.voxel_feature"] = [](RunConfig& c, const Entry& e) {
      if (e.value == "representative") c.model.feature = VoxelFeature::representative;
      else if (e.value == "mean") c.model.feature = VoxelFeature::mean;
      else bad_value(e, "representative or mean");
    };

    // train
    auto tnum = [&t](const char* key, double TrainSection::*m) {
      t[std::string("train.") + key] = [m](RunConfig& c, const Entry& e) { c.train.*m = to_double(e, e.value); };
    };
    auto tint = [&t](const char* key, std::size_t TrainSection::*m) {
      t[std::string("train.") + key] = [m](RunConfig& c, const Entry& e) { c.train.*m = to_u64(e, e.value); };
    };
    tint("steps", &TrainSection::steps);
    tint("batch_size", &TrainSection::batch_size);
    tint("eval_every", &TrainSection::eval_every);
    tint("log_every", &TrainSection::log_every);
    tnum("max_lr", &TrainSection::max_lr);
    tnum("pct_start", &TrainSection::pct_start);
    tnum("div_factor", &TrainSection::div_factor);
    tnum("final_div_factor", &TrainSection::final_div_factor);
    tnum("weight_decay", &TrainSection::weight_decay);
    tnum("beta1", &TrainSection::beta1);
    tnum("beta2", &TrainSection::beta2);
    tnum("eps", &TrainSection::eps);
    tnum("label_smoothing", &TrainSection::label_smoothing);
    tnum("ce_weight", &TrainSection::ce_weight);
    tnum("lovasz_weight", &TrainSection::lovasz_weight);
    tnum("ema_decay", &TrainSection::ema_decay);
    t["train.seed"] = [](RunConfig& c, const Entry& e) { c.train.seed = to_u64(e, e.value); };
    t["train.deterministic"] = [](RunConfig& c, const Entry& e) { c.train.deterministic = to_bool(e); };

    // distill
    t["distill.enabled"] = [](RunConfig& c, const Entry& e) { c.distill.enabled = to_bool(e); };
    t["distill.teacher"] = [](RunConfig& c, const Entry& e) {
      if (e.value == "pretrained") c.distill.source = TeacherSource::pretrained;
      else if (e.value == "oracle") c.distill.source = TeacherSource::oracle;
      else bad_value(e, "pretrained or oracle");
    };
    t["distill.teacher_path"] = [](RunConfig& c, const Entry& e) { c.distill.teacher_path = e.value; };
    t["distill.teacher_weight"] = [](RunConfig& c, const Entry& e) { c.distill.teacher_weight = to_double(e, e.value); };
    t["distill.teacher_steps"] = [](RunConfig& c, const Entry& e) { c.distill.teacher_steps = to_u64(e, e.value); };
    t["distill.teacher_hidden"] = [](RunConfig& c, const Entry& e) { c.distill.teacher_hidden = to_u64(e, e.value); };
    t["distill.teacher_lr"] = [](RunConfig& c, const Entry& e) { c.distill.teacher_lr = to_double(e, e.value); };

    // augment
    auto arange = [&t](const char* key, Range AugmentConfig::*m) {
      t[std::string("augment.") + key] = [m](RunConfig& c, const Entry& e) { c.augment.*m = to_range(e); };
    };
    auto aprob = [&t](const char* key, double AugmentConfig::*m) {
      t[std::string("augment.") + key] = [m](RunConfig& c, const Entry& e) { c.augment.*m = to_double(e, e.value); };
    };
    auto abool = [&t](const char* key, bool AugmentConfig::*m) {
      t[std::string("augment.") + key] = [m](RunConfig& c, const Entry& e) { c.augment.*m = to_bool(e); };
    };
    aprob("mix_prob", &AugmentConfig::mix_prob);
    aprob("flip_x", &AugmentConfig::flip_x_prob);
    aprob("flip_y", &AugmentConfig::flip_y_prob);
    aprob("brightness", &AugmentConfig::brightness);
    aprob("contrast", &AugmentConfig::contrast);
    abool("instance", &AugmentConfig::instance);
    abool("color_jitter", &AugmentConfig::color_jitter);
    abool("grid_shift", &AugmentConfig::grid_shift);
    arange("instance_rotation", &AugmentConfig::instance_rotation);
    arange("instance_scale", &AugmentConfig::instance_scale);
    arange("rotation_z", &AugmentConfig::rotation_z);
    arange("tilt_x", &AugmentConfig::tilt_x);
    arange("tilt_y", &AugmentConfig::tilt_y);
    arange("scale", &AugmentConfig::scale);
    arange("crop_ratio", &AugmentConfig::crop_ratio);
    arange("dropout", &AugmentConfig::dropout);
    const char* axes[3] = {"x", "y", "z"};
    for (int a = 0; a < 3; ++a) {
      t[std::string("augment.translation_") + axes[a]] = [a](RunConfig& c, const Entry& e) {
        c.augment.translation[a] = to_range(e);
      };
      t[std::string("augment.instance_shift_") + axes[a]] = [a](RunConfig& c, const Entry& e) {
        c.augment.instance_shift[a] = to_range(e);
      };
    }
    t["augment.elastic"] = [](RunConfig& c, const Entry& e) { c.augment.elastic = to_elastic(e); };
    t["augment.crop_min_points"] = [](RunConfig& c, const Entry& e) { c.augment.crop_min_points = to_u64(e, e.value); };
    t["augment.seed"] = [](RunConfig& c, const Entry& e) { c.augment.seed = to_u64(e, e.value); };

    t["output.dir"] = [](RunConfig& c, const Entry& e) { c.output_dir = e.value; };
    return t;
  }();
  return table;
}

void set_scene_key(SceneSpec& spec, std::string_view key, const Entry& e) {
  if (key == "seed") spec.seed = to_u64(e, e.value);
  else if (key == "extent") spec.extent = to_doubles<3>(e);
  else if (key == "min_objects") spec.min_objects = static_cast<int>(to_u64(e, e.value));
  else if (key == "max_objects") spec.max_objects = static_cast<int>(to_u64(e, e.value));
  else if (key == "classes") spec.num_classes = static_cast<int>(to_u64(e, e.value));
  else if (key == "noise") spec.noise = to_double(e, e.value);
  else if (key == "density") spec.density = to_double(e, e.value);
  else throw ConfigError("line " + std::to_string(e.line) + ": unknown key '" + e.key + "'");
}

} // namespace

std::vector<std::size_t> RunConfig::dataset_classes() const {
  std::vector<std::size_t> out;
  for (const auto& d : datasets) out.push_back(d.classes);
  return out;
}

ModelConfig RunConfig::model_config(std::size_t in_channels) const {
  ModelConfig cfg;
  cfg.encoder = EncoderConfig::preset(model.preset);
  if (model.depth) cfg.encoder.depth = *model.depth;
  if (model.width) cfg.encoder.width = *model.width;
  if (model.heads) cfg.encoder.heads = *model.heads;
  if (model.mlp_ratio) cfg.encoder.mlp_ratio = *model.mlp_ratio;
  if (model.droppath) cfg.encoder.droppath_max = *model.droppath;
  cfg.encoder.qk_norm = model.qk_norm;
  const std::size_t hd = cfg.encoder.head_dim();
  cfg.encoder.rope = model.rope_allocation == "symmetric" ? RopeConfig::symmetric(hd) : RopeConfig::asymmetric(hd);
  if (model.rope_pairs) cfg.encoder.rope.pairs = *model.rope_pairs;
  cfg.encoder.rope.theta_base = model.rope_base;
  cfg.encoder.rope.coordinate_mode = model.coordinate_mode;
  cfg.patch_size = model.patch_size;
  cfg.in_channels = in_channels;
  cfg.decoder.mode = model.decoder;
  cfg.decoder.width = model.decoder_width.value_or(cfg.encoder.width);
  cfg.decoder.dataset_classes = dataset_classes();
  cfg.decoder.distill_head = distill.enabled;
  cfg.sync();
  cfg.validate();
  return cfg;
}

void RunConfig::validate() const {
  if (datasets.empty()) throw ConfigError("config declares no [dataset.NAME] section");
  for (const auto& d : datasets) {
    if (d.classes < 2) throw ConfigError("dataset " + d.name + ": classes must be >= 2");
    if (d.path.empty() == (d.synthetic == 0)) {
      throw ConfigError("dataset " + d.name + ": set exactly one of path or synthetic");
    }
    if (d.synthetic) d.scene.validate();
  }
  if (!(model.voxel_size > 0.0)) throw ConfigError("model.voxel_size must be positive");
  if (train.batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  if (train.log_every == 0) throw ConfigError("train.log_every must be >= 1");
  if (!(train.max_lr >= 0.0)) throw ConfigError("train.max_lr must be >= 0");
  if (!(train.pct_start > 0.0 && train.pct_start < 1.0)) throw ConfigError("train.pct_start must be in (0, 1)");
  if (!(train.div_factor > 0.0 && train.final_div_factor > 0.0)) throw ConfigError("train div factors must be positive");
  if (!(train.ema_decay >= 0.0 && train.ema_decay <= 1.0)) throw ConfigError("train.ema_decay must be in [0, 1]");
  if (!(train.label_smoothing >= 0.0 && train.label_smoothing < 1.0)) {
    throw ConfigError("train.label_smoothing must be in [0, 1)");
  }
  if (!(distill.teacher_weight >= 0.0 && distill.teacher_weight <= 1.0)) {
    throw ConfigError("distill.teacher_weight must be in [0, 1]");
  }
  augment.validate();
  (void)model_config();
}

RunConfig parse_run_config(std::string_view text, const std::filesystem::path& base_dir) {
  RunConfig cfg;
  bool augment_seed_set = false;
  bool augment_enabled = true;
  std::map<std::string, std::size_t> dataset_index;
  const auto& table = schema();
  for (const auto& e : tokenize(text)) {
    if (e.key.rfind("dataset.", 0) == 0) {
      const std::string rest = e.key.substr(8);
      const auto dot = rest.find('.');
      if (dot == std::string::npos || dot == 0) {
        throw ConfigError("line " + std::to_string(e.line) + ": dataset keys live under [dataset.NAME]");
      }
      const std::string name = rest.substr(0, dot), key = rest.substr(dot + 1);
      auto [it, inserted] = dataset_index.try_emplace(name, cfg.datasets.size());
      if (inserted) cfg.datasets.push_back(DatasetSection{name, 6, {}, 0, SceneSpec{}});
      auto& d = cfg.datasets[it->second];
      if (key == "classes") {
        d.classes = to_u64(e, e.value);
        d.scene.num_classes = static_cast<int>(d.classes);
      } else if (key == "path") {
        d.path = base_dir / std::filesystem::path(e.value);
      } else if (key == "synthetic") {
        d.synthetic = to_u64(e, e.value);
      } else {
        set_scene_key(d.scene, key, e);
      }
      continue;
    }
    if (e.key == "augment.enabled") {
      augment_enabled = to_bool(e);
      continue;
    }
    auto it = table.find(e.key);
    if (it == table.end()) throw ConfigError("line " + std::to_string(e.line) + ": unknown key '" + e.key + "'");
    it->second(cfg, e);
    if (e.key == "augment.seed") augment_seed_set = true;
  }
  if (!augment_seed_set) cfg.augment.seed = derive_seed(cfg.train.seed, {0xa0});
  if (!augment_enabled) {
    const auto seed = cfg.augment.seed;
    cfg.augment = AugmentConfig::none();
    cfg.augment.seed = seed;
  }
  if (!cfg.distill.teacher_path.empty() && cfg.distill.teacher_path.is_relative()) {
    cfg.distill.teacher_path = base_dir / cfg.distill.teacher_path;
  }
  if (cfg.output_dir.is_relative()) cfg.output_dir = base_dir / cfg.output_dir;
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.parent_path());
}

SceneSpec parse_scene_spec(std::string_view text) {
  SceneSpec spec;
  for (const auto& e : tokenize(text)) set_scene_key(spec, e.key, e);
  spec.validate();
  return spec;
}

} // namespace volt
