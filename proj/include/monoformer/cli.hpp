#pragma once

// Subcommand implementations behind tools/monoformer. Each command validates
// its configuration, loads its inputs, and only then creates the output
// directory. Every run leaves <out>/config.txt and <out>/run_manifest.txt
// (sizes and FNV-1a hashes of every file under <out>).

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "monoformer/biasprobe.hpp"
#include "monoformer/blockcheck.hpp"
#include "monoformer/config.hpp"
#include "monoformer/image_io.hpp"

namespace monoformer {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

constexpr double kConsistencyGate = 0.01;

namespace detail {

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Relative paths of every regular file under `root`, sorted.
inline std::vector<std::string> list_files(const std::filesystem::path& root) {
  std::vector<std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(std::filesystem::relative(e.path(), root).generic_string());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<std::string> list_images(const std::filesystem::path& root) {
  std::vector<std::string> out;
  for (const auto& f : list_files(root))
    if (is_image_path(f)) out.push_back(f);
  return out;
}

inline void write_run_files(const RunConfig& cfg, const std::string& command) {
  namespace fs = std::filesystem;
  const fs::path out(cfg.out);
  write_file((out / "config.txt").string(), "# command " + command + "\n" + dump_config(cfg, false));
  std::string m = "monoformer-run 1\ncommand " + command + "\n";
  char buf[64];
  for (const auto& f : list_files(out)) {
    if (f == "run_manifest.txt") continue;
    const std::string bytes = read_file((out / f).string());
    std::snprintf(buf, sizeof buf, " %zu %016llx\n", bytes.size(), static_cast<unsigned long long>(fnv1a(bytes)));
    m += "file " + f + buf;
  }
  write_file((out / "run_manifest.txt").string(), m);
}

inline std::vector<SceneRecord> load_checked_dataset(const RunConfig& cfg) {
  std::vector<SceneRecord> scenes = load_dataset(cfg.data.dir);
  if (scenes.empty()) throw ConfigError("data.dir: dataset has no scenes");
  for (const auto& r : scenes) {
    if (r.scene.spec.height != cfg.model.height || r.scene.spec.width != cfg.model.width)
      throw ConfigError("data.dir: dataset extents " + std::to_string(r.scene.spec.height) + "x" +
                        std::to_string(r.scene.spec.width) + " differ from model " + std::to_string(cfg.model.height) +
                        "x" + std::to_string(cfg.model.width));
    if (r.frames.size() < 3) throw ConfigError("data.dir: scenes need at least 3 frames");
  }
  return scenes;
}

inline MonoFormer load_model(const RunConfig& cfg, const std::string& key, const std::string& path) {
  MonoFormer model(cfg.model, cfg.seed);
  try {
    model.load_state(load_container(path));
  } catch (const FormatError& e) {
    throw ConfigError(key + ": " + e.what());
  }
  return model;
}

inline std::string csv_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string frame_name(std::size_t scene, std::size_t frame) {
  return scene_dir_name(scene) + "_frame_" + std::to_string(frame);
}

}  // namespace detail

// synth: renders the dataset into <out> and checks every training triplet
// against its ground truth.
inline std::vector<double> cmd_synth(const RunConfig& cfg, std::ostream& log) {
  cfg.validate("synth");
  const auto scenes = make_scenes(cfg.scene_spec(), cfg.data.scenes);
  std::vector<double> gate;
  for (std::size_t i = 0; i < scenes.size(); ++i)
    for (const auto& t : triplets(scenes[i])) {
      const double c = consistency_loss(t, scenes[i].scene.camera);
      if (!(c < kConsistencyGate))
        throw DataError("synth: scene " + std::to_string(i) + " fails the consistency gate (" + detail::csv_number(c) +
                        " >= " + detail::csv_number(kConsistencyGate) + ")");
      gate.push_back(c);
    }
  save_dataset(cfg.out, scenes, cfg.seed);
  detail::write_run_files(cfg, "synth");
  log << "synth: " << scenes.size() << " scenes, " << gate.size() << " triplets, max consistency loss "
      << *std::max_element(gate.begin(), gate.end()) << "\n";
  return gate;
}

struct TrainResult {
  std::vector<LossBreakdown> steps;
  LossBreakdown initial, final;  // full dataset, unaugmented
};

inline LossBreakdown dataset_loss(const MonoFormer& model, const std::vector<TrainSample>& data, const CameraModel& cam,
                                  double smoothness_weight) {
  NoGradGuard ng;
  LossBreakdown avg;
  const double w = 1.0 / static_cast<double>(data.size());
  for (const auto& s : data) {
    const LossBreakdown b = sample_loss(model, s, cam, smoothness_weight);
    avg.photometric += w * b.photometric;
    avg.smoothness += w * b.smoothness;
    avg.total += w * b.total;
  }
  return avg;
}

inline TrainResult cmd_train(const RunConfig& cfg, std::ostream& log) {
  cfg.validate("train");
  const auto scenes = detail::load_checked_dataset(cfg);
  const CameraModel cam = scenes[0].scene.camera;
  for (const auto& r : scenes) {
    const auto& c = r.scene.camera;
    if (c.fx != cam.fx || c.fy != cam.fy || c.cx != cam.cx || c.cy != cam.cy)
      throw ConfigError("data.dir: scenes use different intrinsics");
  }
  const bool hflip = cfg.train.augment != "none", dihedral = cfg.train.augment == "dihedral";
  if (hflip && cam.cx != (static_cast<double>(cfg.model.width) - 1) / 2)
    throw ConfigError("train.augment: flips need a horizontally centred principal point");
  if (dihedral && (cam.cy != (static_cast<double>(cfg.model.height) - 1) / 2 ||
                   cfg.model.height != cfg.model.width || cam.fx != cam.fy))
    throw ConfigError("train.augment=dihedral needs a square image, fx = fy and a centred principal point");
  std::vector<TrainSample> data;
  for (const auto& r : scenes)
    for (auto& t : triplets(r)) data.push_back(std::move(t));

  MonoFormer model(cfg.model, cfg.seed);
  SgdMomentum opt(cfg.train.optim.learning_rate, cfg.train.optim.momentum, cfg.train.optim.clip_norm);
  std::mt19937_64 flip_rng(derive_seed(cfg.seed, 0x666c6970));
  const std::size_t bs = cfg.train.optim.batch_size == 0 ? data.size() : cfg.train.optim.batch_size;

  TrainResult res;
  res.initial = dataset_loss(model, data, cam, cfg.train.optim.smoothness_weight);
  std::size_t cursor = 0;
  for (std::size_t step = 0; step < cfg.train.steps; ++step) {
    std::vector<TrainSample> batch;
    for (std::size_t k = 0; k < bs; ++k, ++cursor) {
      const TrainSample& s = data[cursor % data.size()];
      Symmetry g;
      if (hflip) g.flip_x = flip_rng() & 1;
      if (dihedral) {
        g.flip_y = flip_rng() & 1;
        g.transpose = flip_rng() & 1;
      }
      batch.push_back(g.flip_x || g.flip_y || g.transpose ? apply_symmetry(s, g) : s);
    }
    try {
      res.steps.push_back(train_step(model, batch, cam, opt, cfg.train.optim));
    } catch (const NumericError& e) {
      throw NumericError("train: step " + std::to_string(step) + ": " + e.what());
    }
    if (cfg.train.log_every && (step % cfg.train.log_every == 0 || step + 1 == cfg.train.steps))
      log << "train: step " << step << " photometric " << res.steps.back().photometric << " total "
          << res.steps.back().total << "\n";
  }
  res.final = dataset_loss(model, data, cam, cfg.train.optim.smoothness_weight);
  if (!std::isfinite(res.final.total)) throw NumericError("train: non-finite loss after the final step");

  namespace fs = std::filesystem;
  fs::create_directories(cfg.out);
  save_container((fs::path(cfg.out) / "checkpoint.mfc").string(), model.state());
  std::string csv = "step,photometric,smoothness,total\n";
  for (std::size_t i = 0; i < res.steps.size(); ++i)
    csv += std::to_string(i) + "," + detail::csv_number(res.steps[i].photometric) + "," +
           detail::csv_number(res.steps[i].smoothness) + "," + detail::csv_number(res.steps[i].total) + "\n";
  detail::write_file((fs::path(cfg.out) / "loss.csv").string(), csv);
  std::string summary = "when,photometric,smoothness,total\n";
  for (const auto& [name, l] : {std::pair{"initial", res.initial}, std::pair{"final", res.final}})
    summary += std::string(name) + "," + detail::csv_number(l.photometric) + "," + detail::csv_number(l.smoothness) +
               "," + detail::csv_number(l.total) + "\n";
  detail::write_file((fs::path(cfg.out) / "dataset_loss.csv").string(), summary);
  detail::write_run_files(cfg, "train");
  log << "train: dataset photometric " << res.initial.photometric << " -> " << res.final.photometric << "\n";
  return res;
}

struct EvalResult {
  std::vector<std::pair<std::string, MetricsReport>> rows;  // scenes, then "aggregate"
  double min_depth = INFINITY, max_depth = -INFINITY;
  bool finite = true;
};

inline std::vector<std::size_t> eval_frames(const std::string& which, std::size_t frames) {
  std::vector<std::size_t> out;
  for (std::size_t f = 0; f < frames; ++f) {
    const bool target = f > 0 && f + 1 < frames;
    if (which == "all" || (which == "target") == target) out.push_back(f);
  }
  return out;
}

inline EvalResult cmd_eval(const RunConfig& cfg, std::ostream& log) {
  cfg.validate("eval");
  const auto scenes = detail::load_checked_dataset(cfg);
  const bool use_model = cfg.eval.predictor == "model";
  MonoFormer model = use_model ? detail::load_model(cfg, "eval.checkpoint", cfg.eval.checkpoint)
                               : MonoFormer(cfg.model, cfg.seed);
  const StyleParams sp = cfg.style_params();

  namespace fs = std::filesystem;
  const fs::path out(cfg.out), depth_dir = out / "depth";
  fs::create_directories(cfg.eval.depth_png ? depth_dir : out);
  EvalResult res;
  MetricAccumulator total(cfg.eval.metrics);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    MetricAccumulator acc(cfg.eval.metrics);
    for (std::size_t f : eval_frames(cfg.eval.frames, scenes[i].frames.size())) {
      const RenderedFrame& fr = scenes[i].frames[f];
      Tensor pred;
      if (use_model) {
        StyleParams p = sp;
        p.shuffle.seed = derive_seed(cfg.seed, i * 1000 + f);
        const Tensor img = cfg.eval.style == "none" ? fr.image : apply_style(cfg.eval.style, fr.image, p);
        NoGradGuard ng;
        pred = model.forward(img).detach();
      } else {
        pred = fr.depth.detach();
      }
      for (double v : pred.values()) {
        if (!std::isfinite(v)) res.finite = false;
        res.min_depth = std::min(res.min_depth, v);
        res.max_depth = std::max(res.max_depth, v);
      }
      if (!res.finite) throw NumericError("eval: non-finite depth for " + detail::frame_name(i, f));
      acc.add(pred, fr.depth);
      total.add(pred, fr.depth);
      if (cfg.eval.depth_png) {
        const std::string stem = (depth_dir / detail::frame_name(i, f)).string();
        write_depth_png(stem + ".png", pred, cfg.model.ffd.max_depth);
        save_tensor(stem + ".mft", pred);
      }
    }
    res.rows.emplace_back(detail::scene_dir_name(i), acc.report());
  }
  res.rows.emplace_back("aggregate", total.report());
  std::string csv = metrics_csv_header() + "\n";
  for (const auto& [name, r] : res.rows) csv += metrics_csv_row(name, r) + "\n";
  detail::write_file((out / "metrics.csv").string(), csv);
  detail::write_run_files(cfg, "eval");
  const MetricsReport& agg = res.rows.back().second;
  log << "eval: " << agg.pixels << " pixels, Abs Rel " << agg.abs_rel << ", RMSE " << agg.rmse << ", d1 " << agg.delta1
      << "\n";
  return res;
}

// stylize: <out>/<input dir name>_<style>/<relative path> for every image.
inline std::vector<std::string> cmd_stylize(const RunConfig& cfg, std::ostream& log) {
  cfg.validate("stylize");
  namespace fs = std::filesystem;
  const fs::path in(cfg.stylize.input);
  const auto images = detail::list_images(in);
  if (images.empty()) throw ConfigError("stylize.input: no .png or .ppm images under " + in.string());
  std::string base = fs::absolute(in).lexically_normal().filename().string();
  if (base.empty()) base = fs::absolute(in).lexically_normal().parent_path().filename().string();
  const fs::path dst = fs::path(cfg.out) / (base + "_" + cfg.stylize.style);
  std::vector<Tensor> styled;
  const StyleParams sp = cfg.style_params();
  for (std::size_t i = 0; i < images.size(); ++i) {
    StyleParams p = sp;
    p.shuffle.seed = derive_seed(cfg.seed, i);
    styled.push_back(apply_style(cfg.stylize.style, read_image((in / images[i]).string()), p));
  }
  std::vector<std::string> written;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const fs::path p = dst / images[i];
    fs::create_directories(p.parent_path());
    write_image(p.string(), styled[i]);
    written.push_back(p.string());
  }
  detail::write_run_files(cfg, "stylize");
  log << "stylize: " << written.size() << " images -> " << dst.string() << "\n";
  return written;
}

struct ProbeResult {
  std::vector<std::pair<std::string, BiasReport>> taps;  // stem, transformer
};

inline ProbeResult cmd_probe_bias(const RunConfig& cfg, std::ostream& log) {
  cfg.validate("probe-bias");
  namespace fs = std::filesystem;
  const MonoFormer model = detail::load_model(cfg, "probe.checkpoint", cfg.probe.checkpoint);
  const auto names = detail::list_images(cfg.probe.corpus);
  if (names.size() < 2) throw ConfigError("probe.corpus: need at least two images");
  std::vector<Tensor> originals, shapes, textures;
  auto read_checked = [&](const fs::path& p) {
    Tensor t = read_image(p.string());
    if (t.dim(1) != cfg.model.height || t.dim(2) != cfg.model.width)
      throw ConfigError("probe: " + p.string() + " is " + shape_str(t.shape()) + ", model expects " +
                        std::to_string(cfg.model.height) + "x" + std::to_string(cfg.model.width));
    return t;
  };
  for (const auto& n : names) originals.push_back(read_checked(fs::path(cfg.probe.corpus) / n));
  if (!cfg.probe.shape_dir.empty()) {
    for (const auto& [key, dir, dst] : {std::tuple{"probe.shape_dir", cfg.probe.shape_dir, &shapes},
                                        std::tuple{"probe.texture_dir", cfg.probe.texture_dir, &textures}}) {
      if (detail::list_images(dir) != names)
        throw ConfigError(std::string(key) + ": unpaired corpora; file names must match probe.corpus");
      for (const auto& n : names) dst->push_back(read_checked(fs::path(dir) / n));
    }
  } else {
    const StyleParams sp = cfg.style_params();
    for (std::size_t i = 0; i < originals.size(); ++i) {
      shapes.push_back(pencil_sketch(originals[i], sp.sketch));
      textures.push_back(patch_shuffle(originals[i], {sp.shuffle.patch, derive_seed(cfg.seed, i)}));
    }
  }
  ProbeResult res;
  const std::vector<std::pair<std::string, FeatureEncoder>> taps{
      {"stem", [&](const Tensor& x) { return flatten(model.stem_features(x)); }},
      {"transformer", [&](const Tensor& x) { return flatten(model.transformer_features(x)); }}};
  for (const auto& [name, enc] : taps)
    res.taps.emplace_back(name, estimate_dimensionality(encode_pairs(enc, originals, shapes, textures), cfg.probe.threshold));

  fs::create_directories(cfg.out);
  std::string summary = "tap,dimensions,shape_count,texture_count,shape_texture_ratio\n";
  for (const auto& [name, r] : res.taps) {
    detail::write_file((fs::path(cfg.out) / ("bias_" + name + ".csv")).string(), bias_csv(r));
    summary += name + "," + std::to_string(r.dimensions) + "," + std::to_string(r.shape_count) + "," +
               std::to_string(r.texture_count) + "," + detail::csv_number(shape_texture_ratio(r)) + "\n";
    log << "probe-bias: " << name << " shape " << r.shape_count << " texture " << r.texture_count << " of "
        << r.dimensions << "\n";
  }
  detail::write_file((fs::path(cfg.out) / "bias_summary.csv").string(), summary);
  detail::write_run_files(cfg, "probe-bias");
  return res;
}

inline std::vector<BlockCheck> cmd_gradcheck(const RunConfig& cfg, std::ostream& log) {
  cfg.validate("gradcheck");
  BlockCheckOptions opt;
  opt.seed = cfg.seed;
  opt.coords_per_input = cfg.gradcheck.coords;
  opt.tolerance = cfg.gradcheck.tolerance;
  opt.warp_tolerance = cfg.gradcheck.warp_tolerance;
  std::vector<BlockCheck> checks;
  if (cfg.gradcheck.corrupt_gradients) {
    GradientFaultInjection fault;
    checks = check_blocks(cfg.model, opt);
  } else {
    checks = check_blocks(cfg.model, opt);
  }
  std::string report = "block,max_rel_error,tolerance,coords,result\n";
  std::size_t failed = 0;
  for (const auto& c : checks) {
    failed += !c.report.passed;
    report += c.block + "," + detail::csv_number(c.report.max_rel_error) + "," + detail::csv_number(c.tolerance) + "," +
              std::to_string(c.report.coords_checked) + "," + (c.report.passed ? "pass" : "fail") + "\n";
    char line[160];
    std::snprintf(line, sizeof line, "%-18s max rel error %.3e (tol %.0e)  %s\n", c.block.c_str(),
                  c.report.max_rel_error, c.tolerance, c.report.passed ? "PASS" : "FAIL");
    log << line;
  }
  std::filesystem::create_directories(cfg.out);
  detail::write_file((std::filesystem::path(cfg.out) / "gradcheck.csv").string(), report);
  detail::write_run_files(cfg, "gradcheck");
  if (failed) throw NumericError("gradcheck: " + std::to_string(failed) + " of " + std::to_string(checks.size()) +
                                 " blocks failed");
  return checks;
}

inline int exit_code_of(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const DataError*>(&e)) return kExitNumeric;
  return kExitFailure;
}

// Runs one command and maps its exception, if any, to an exit code.
inline int run_command(const std::string& command, const RunConfig& cfg, std::ostream& log, std::ostream& err) {
  try {
    if (command == "synth") cmd_synth(cfg, log);
    else if (command == "train") cmd_train(cfg, log);
    else if (command == "eval") cmd_eval(cfg, log);
    else if (command == "stylize") cmd_stylize(cfg, log);
    else if (command == "probe-bias") cmd_probe_bias(cfg, log);
    else if (command == "gradcheck") cmd_gradcheck(cfg, log);
    else cfg.validate(command);
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_of(e);
  }
}

}  // namespace monoformer
