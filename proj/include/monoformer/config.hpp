#pragma once

// Run configuration shared by every subcommand.
//
// File format: one `key = value` per line, `#` starts a comment, blank lines
// ignored. Keys are dotted (model.layers, train.steps, ...). Unknown keys and
// malformed values are errors. dump() prints every key with its current value
// and parse() of that text reproduces the configuration.

#include <cerrno>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "monoformer/metrics.hpp"
#include "monoformer/model.hpp"
#include "monoformer/selfsup.hpp"
#include "monoformer/serialize.hpp"
#include "monoformer/synthdata.hpp"
#include "monoformer/textureshift.hpp"

namespace monoformer {

struct DataConfig {
  std::string dir = "data";
  std::size_t scenes = 8;
  std::size_t frames = 3;
  std::size_t planes = 4;
  double min_depth = 2.0, max_depth = 16.0;
  double baseline = 0.3, forward_step = 0.15, focal_ratio = 0.9;
};

// Run defaults that differ from the library structs.
inline TrainConfig default_run_optim() {
  TrainConfig t;
  t.learning_rate = 0.1;
  t.smoothness_weight = 1e-2;
  return t;
}

inline ModelConfig default_run_model() {
  ModelConfig m;
  m.backbone.positional_embedding = false;
  return m;
}

struct TrainOptions {
  std::size_t steps = 2000;
  TrainConfig optim = default_run_optim();
  std::string augment = "dihedral";  // none | hflip | dihedral
  std::size_t log_every = 100;
};

struct EvalConfig {
  std::string checkpoint;
  std::string frames = "heldout";     // heldout | target | all
  std::string predictor = "model";    // model | ground_truth
  std::string style = "none";         // none | watercolor | pencil | shuffle
  bool depth_png = true;
  EvalOptions metrics;
};

struct StylizeConfig {
  std::string input;
  std::string style = "pencil";
};

struct ProbeConfig {
  std::string checkpoint;
  std::string corpus;
  std::string shape_dir, texture_dir;  // empty: generated from the corpus
  double threshold = 0.1;
};

struct GradcheckConfig {
  std::size_t coords = 24;
  double tolerance = 1e-4;
  double warp_tolerance = 1e-3;
  bool corrupt_gradients = false;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out = "out";
  ModelConfig model = default_run_model();
  DataConfig data;
  TrainOptions train;
  EvalConfig eval;
  StylizeConfig stylize;
  StyleParams style;
  ProbeConfig probe;
  GradcheckConfig gradcheck;

  SceneSpec scene_spec() const {
    SceneSpec s;
    s.seed = seed;
    s.height = model.height;
    s.width = model.width;
    s.num_planes = data.planes;
    s.min_depth = data.min_depth;
    s.max_depth = data.max_depth;
    s.frames = data.frames;
    s.baseline = data.baseline;
    s.forward_step = data.forward_step;
    s.focal_ratio = data.focal_ratio;
    return s;
  }

  CameraModel camera() const { return CameraModel::centered(model.height, model.width, data.focal_ratio); }

  StyleParams style_params() const {
    StyleParams p = style;
    p.shuffle.seed = seed;
    return p;
  }

  // Checks every option a command reads, plus the files it needs to exist.
  void validate(const std::string& command) const;
};

namespace detail {

struct ChannelModeRef {
  ChannelAttentionMode* mode;
};
struct U64Ref {
  std::uint64_t* v;
};

using FieldRef = std::variant<std::size_t*, U64Ref, double*, bool*, std::string*, ChannelModeRef>;

struct Field {
  std::string key;
  FieldRef ref;
};

inline std::vector<Field> fields(RunConfig& c) {
  auto& m = c.model;
  return {
      {"seed", U64Ref{&c.seed}},
      {"out", &c.out},
      {"model.height", &m.height},
      {"model.width", &m.width},
      {"model.stem_channels", &m.backbone.stem_channels},
      {"model.res_blocks", &m.backbone.num_res_blocks},
      {"model.patch_size", &m.backbone.patch_size},
      {"model.embed_dim", &m.backbone.embed_dim},
      {"model.positional_embedding", &m.backbone.positional_embedding},
      {"model.layers", &m.transformer.layers},
      {"model.heads", &m.transformer.heads},
      {"model.head_dim", &m.transformer.head_dim},
      {"model.mlp_ratio", &m.transformer.mlp_ratio},
      {"model.pre_ln_attention", &m.transformer.pre_ln_attention},
      {"model.qkv_bias", &m.transformer.qkv_bias},
      {"model.ln_eps", &m.transformer.ln_eps},
      {"model.acm_qk_dim", &m.acm.qk_dim},
      {"model.channel_attention", ChannelModeRef{&m.acm.channel_mode}},
      {"model.fusion_kernel", &m.ffd.fusion_kernel},
      {"model.head_min_channels", &m.ffd.head_min_channels},
      {"model.min_depth", &m.ffd.min_depth},
      {"model.max_depth", &m.ffd.max_depth},
      {"model.init_depth", &m.ffd.init_depth},
      {"model.gate_eps", &m.ffd.gate_eps},
      {"data.dir", &c.data.dir},
      {"data.scenes", &c.data.scenes},
      {"data.frames", &c.data.frames},
      {"data.planes", &c.data.planes},
      {"data.min_depth", &c.data.min_depth},
      {"data.max_depth", &c.data.max_depth},
      {"data.baseline", &c.data.baseline},
      {"data.forward_step", &c.data.forward_step},
      {"data.focal_ratio", &c.data.focal_ratio},
      {"train.steps", &c.train.steps},
      {"train.learning_rate", &c.train.optim.learning_rate},
      {"train.momentum", &c.train.optim.momentum},
      {"train.smoothness_weight", &c.train.optim.smoothness_weight},
      {"train.clip_norm", &c.train.optim.clip_norm},
      {"train.batch_size", &c.train.optim.batch_size},
      {"train.augment", &c.train.augment},
      {"train.log_every", &c.train.log_every},
      {"eval.checkpoint", &c.eval.checkpoint},
      {"eval.frames", &c.eval.frames},
      {"eval.predictor", &c.eval.predictor},
      {"eval.style", &c.eval.style},
      {"eval.depth_png", &c.eval.depth_png},
      {"eval.median_scaling", &c.eval.metrics.median_scaling},
      {"eval.min_depth", &c.eval.metrics.min_depth},
      {"eval.cap", &c.eval.metrics.cap},
      {"stylize.input", &c.stylize.input},
      {"stylize.style", &c.stylize.style},
      {"style.watercolor_iterations", &c.style.watercolor.iterations},
      {"style.spatial_sigma", &c.style.watercolor.spatial_sigma},
      {"style.range_sigma", &c.style.watercolor.range_sigma},
      {"style.blur_sigma", &c.style.sketch.blur_sigma},
      {"style.dodge_eps", &c.style.sketch.dodge_eps},
      {"style.shuffle_patch", &c.style.shuffle.patch},
      {"probe.checkpoint", &c.probe.checkpoint},
      {"probe.corpus", &c.probe.corpus},
      {"probe.shape_dir", &c.probe.shape_dir},
      {"probe.texture_dir", &c.probe.texture_dir},
      {"probe.threshold", &c.probe.threshold},
      {"gradcheck.coords", &c.gradcheck.coords},
      {"gradcheck.tolerance", &c.gradcheck.tolerance},
      {"gradcheck.warp_tolerance", &c.gradcheck.warp_tolerance},
      {"gradcheck.corrupt_gradients", &c.gradcheck.corrupt_gradients},
  };
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::string format_value(const FieldRef& ref) {
  struct {
    std::string operator()(std::size_t* v) const { return std::to_string(*v); }
    std::string operator()(U64Ref r) const { return std::to_string(*r.v); }
    std::string operator()(double* v) const { return fmt17(*v); }
    std::string operator()(bool* v) const { return *v ? "true" : "false"; }
    std::string operator()(std::string* v) const { return *v; }
    std::string operator()(ChannelModeRef r) const {
      return *r.mode == ChannelAttentionMode::token_gram ? "token_gram" : "channel_gram";
    }
  } visit;
  return std::visit(visit, ref);
}

inline void assign_value(const std::string& key, const FieldRef& ref, const std::string& text) {
  auto bad = [&](const char* what) { return ConfigError("config: " + key + " = '" + text + "' is not " + what); };
  auto parse_unsigned = [&]() {
    if (text.empty() || text[0] == '-' || text[0] == '+') throw bad("a non-negative integer");
    errno = 0;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(text.c_str(), &end, 10);
    if (errno || *end) throw bad("a non-negative integer");
    return v;
  };
  struct Visitor {
    const std::string& text;
    decltype(bad)& fail;
    decltype(parse_unsigned)& uint;
    void operator()(std::size_t* v) const { *v = static_cast<std::size_t>(uint()); }
    void operator()(U64Ref r) const { *r.v = static_cast<std::uint64_t>(uint()); }
    void operator()(double* v) const {
      errno = 0;
      char* end = nullptr;
      const double d = std::strtod(text.c_str(), &end);
      if (text.empty() || errno || *end || !std::isfinite(d)) throw fail("a finite number");
      *v = d;
    }
    void operator()(bool* v) const {
      if (text == "true" || text == "1") *v = true;
      else if (text == "false" || text == "0") *v = false;
      else throw fail("a boolean (true/false)");
    }
    void operator()(std::string* v) const { *v = text; }
    void operator()(ChannelModeRef r) const {
      if (text == "token_gram") *r.mode = ChannelAttentionMode::token_gram;
      else if (text == "channel_gram") *r.mode = ChannelAttentionMode::channel_gram;
      else throw fail("one of token_gram, channel_gram");
    }
  };
  std::visit(Visitor{text, bad, parse_unsigned}, ref);
}

inline void require_one_of(const std::string& key, const std::string& value, const std::vector<std::string>& valid) {
  for (const auto& v : valid)
    if (v == value) return;
  std::string list;
  for (const auto& v : valid) list += (list.empty() ? "" : ", ") + v;
  throw ConfigError("config: " + key + " = '" + value + "'; valid values: " + list);
}

inline void require_file(const std::string& key, const std::string& path) {
  if (path.empty()) throw ConfigError("config: " + key + " must be set");
  if (!std::filesystem::is_regular_file(path)) throw ConfigError("config: " + key + ": no such file '" + path + "'");
}

inline void require_dir(const std::string& key, const std::string& path) {
  if (path.empty()) throw ConfigError("config: " + key + " must be set");
  if (!std::filesystem::is_directory(path)) throw ConfigError("config: " + key + ": no such directory '" + path + "'");
}

}  // namespace detail

// Applies `key = value` to the configuration.
inline void set_option(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : detail::fields(cfg))
    if (f.key == key) return detail::assign_value(key, f.ref, value);
  throw ConfigError("config: unknown key '" + key + "'");
}

inline void set_option(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("config: expected key=value, got '" + assignment + "'");
  set_option(cfg, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

inline void parse_config_text(RunConfig& cfg, const std::string& text, const std::string& origin = "config") {
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (detail::trim(line).empty()) continue;
    try {
      set_option(cfg, line);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
  if (!std::filesystem::is_regular_file(path)) throw ConfigError("config file not found: " + path);
  parse_config_text(cfg, detail::read_file(path), path);
}

// include_out = false omits the output directory, so runs into different
// directories record identical configuration text.
inline std::string dump_config(const RunConfig& cfg, bool include_out = true) {
  RunConfig copy = cfg;
  std::string out;
  for (const auto& f : detail::fields(copy)) {
    if (!include_out && f.key == "out") continue;
    out += f.key + " = " + detail::format_value(f.ref) + "\n";
  }
  return out;
}

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"synth", "train", "eval", "stylize", "probe-bias", "gradcheck"};
  return names;
}

inline void RunConfig::validate(const std::string& command) const {
  detail::require_one_of("command", command, command_names());
  model.validate();
  if (!(model.ffd.min_depth > 0)) throw ConfigError("config: model.min_depth must be positive");
  if (out.empty()) throw ConfigError("config: out must be set");
  const SceneSpec spec = scene_spec();
  spec.validate(model.backbone.total_stride());
  if (data.scenes == 0) throw ConfigError("config: data.scenes must be positive");
  if (data.frames < 3) throw ConfigError("config: data.frames must be at least 3");
  if (command == "synth") return;
  if (command == "gradcheck") {
    if (!(gradcheck.tolerance > 0) || !(gradcheck.warp_tolerance > 0))
      throw ConfigError("config: gradcheck tolerances must be positive");
    return;
  }
  if (command == "train") {
    if (!(train.optim.learning_rate >= 0)) throw ConfigError("config: train.learning_rate must be non-negative");
    if (!(train.optim.momentum >= 0 && train.optim.momentum < 1))
      throw ConfigError("config: train.momentum must lie in [0, 1)");
    if (!(train.optim.smoothness_weight >= 0)) throw ConfigError("config: train.smoothness_weight must be non-negative");
    if (!(train.optim.clip_norm >= 0)) throw ConfigError("config: train.clip_norm must be non-negative");
    detail::require_one_of("train.augment", train.augment, {"none", "hflip", "dihedral"});
    detail::require_file("data.dir", (std::filesystem::path(data.dir) / "manifest.txt").string());
    return;
  }
  style.watercolor.validate();
  style.sketch.validate();
  if (style.shuffle.patch == 0) throw ConfigError("config: style.shuffle_patch must be positive");
  if (command == "eval") {
    detail::require_one_of("eval.frames", eval.frames, {"heldout", "target", "all"});
    detail::require_one_of("eval.predictor", eval.predictor, {"model", "ground_truth"});
    std::vector<std::string> styles{"none"};
    for (const auto& s : style_names()) styles.push_back(s);
    detail::require_one_of("eval.style", eval.style, styles);
    eval.metrics.validate();
    if (eval.predictor == "model") detail::require_file("eval.checkpoint", eval.checkpoint);
    detail::require_file("data.dir", (std::filesystem::path(data.dir) / "manifest.txt").string());
    return;
  }
  if (command == "stylize") {
    detail::require_one_of("stylize.style", stylize.style, style_names());
    detail::require_dir("stylize.input", stylize.input);
    return;
  }
  if (command == "probe-bias") {
    if (!(probe.threshold >= -1 && probe.threshold < 1)) throw ConfigError("config: probe.threshold must lie in [-1, 1)");
    detail::require_file("probe.checkpoint", probe.checkpoint);
    detail::require_dir("probe.corpus", probe.corpus);
    if (!probe.shape_dir.empty()) detail::require_dir("probe.shape_dir", probe.shape_dir);
    if (!probe.texture_dir.empty()) detail::require_dir("probe.texture_dir", probe.texture_dir);
    if (probe.shape_dir.empty() != probe.texture_dir.empty())
      throw ConfigError("config: probe.shape_dir and probe.texture_dir must be given together");
  }
}

}  // namespace monoformer
