#pragma once

// Procedural static scenes of textured fronto-parallel planes, rendered with
// an exact z-buffer from a short camera trajectory.
//
// World planes are axis-aligned rectangles at constant world z. Textures are
// evaluated in plane coordinates, so every frame sees the same Lambertian
// surface. Frame poses are world-to-camera; the relative pose from frame a
// to frame b is pose_b * pose_a^-1.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <numbers>
#include <random>
#include <string>

#include "monoformer/image_io.hpp"
#include "monoformer/selfsup.hpp"
#include "monoformer/serialize.hpp"

namespace monoformer {

struct SceneSpec {
  std::uint64_t seed = 1;
  std::size_t height = 64, width = 64;
  std::size_t num_planes = 4;
  double min_depth = 2.0, max_depth = 16.0;
  std::size_t frames = 3;
  double baseline = 0.3;       // lateral camera step between frames
  double forward_step = 0.15;  // max |z| step between frames
  double focal_ratio = 0.9;
  std::vector<Pose> trajectory;  // world-to-camera; generated when empty

  void validate(std::size_t stride = 1) const {
    if (height == 0 || width == 0 || height % stride || width % stride)
      throw ConfigError("scene extents " + std::to_string(height) + "x" + std::to_string(width) +
                        " must be divisible by " + std::to_string(stride));
    if (!(min_depth > 0) || !(max_depth > min_depth)) throw ConfigError("scene: require 0 < min_depth < max_depth");
    if (frames < 1 && trajectory.empty()) throw ConfigError("scene: at least one frame");
    const double margin = forward_step * static_cast<double>(frames) + 0.1;
    if (trajectory.empty() && min_depth + 2 * margin >= 0.95 * max_depth)
      throw ConfigError("scene: depth range too narrow for the trajectory");
  }
};

struct PlaneTexture {
  std::array<double, 3> base{};
  std::array<double, 3> freq{}, angle{}, phase{};
  std::array<std::array<double, 3>, 3> amp{};  // [wave][channel]
  double grid_spacing = 1, line_width = 0.1, line_strength = 0.2;

  std::array<double, 3> color(double X, double Y) const {
    std::array<double, 3> c = base;
    for (std::size_t j = 0; j < 3; ++j) {
      const double s = std::sin(freq[j] * (X * std::cos(angle[j]) + Y * std::sin(angle[j])) + phase[j]);
      for (std::size_t k = 0; k < 3; ++k) c[k] += amp[j][k] * s;
    }
    auto line = [&](double t) {
      const double d = t / grid_spacing - std::round(t / grid_spacing);
      const double dist = d * grid_spacing / line_width;
      return std::exp(-0.5 * dist * dist);
    };
    const double l = std::max(line(X), line(Y));
    for (auto& v : c) v = std::clamp(v - line_strength * l, 0.0, 1.0);
    return c;
  }
};

struct Plane {
  double z = 0;  // world depth
  double x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  PlaneTexture texture;
};

struct Scene {
  SceneSpec spec;
  CameraModel camera;
  std::vector<Plane> planes;   // background first
  std::vector<Pose> poses;     // world-to-camera per frame
};

struct RenderedFrame {
  Tensor image;  // [3, H, W]
  Tensor depth;  // [H, W]
};

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace detail

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  return detail::splitmix64(detail::splitmix64(base) ^ (index * 0xd1b54a32d192ed03ULL + 1));
}

// Texture scales are fixed in world units, so image-space spacing of the
// grid and the waves is inversely proportional to depth.
inline PlaneTexture random_texture(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  constexpr double periods[3] = {1.6, 2.5, 4.0};
  PlaneTexture t;
  for (auto& b : t.base) b = 0.35 + 0.35 * u(rng);
  for (std::size_t j = 0; j < 3; ++j) {
    t.freq[j] = 2 * std::numbers::pi / periods[j];
    t.angle[j] = std::numbers::pi * u(rng);
    t.phase[j] = 2 * std::numbers::pi * u(rng);
    for (auto& a : t.amp[j]) a = 0.1 * (u(rng) - 0.5) + (j == 0 ? 0.08 : 0.0);
  }
  t.grid_spacing = 3.0;
  t.line_width = 0.3;
  t.line_strength = 0.2;
  return t;
}

inline Scene make_scene(const SceneSpec& spec) {
  spec.validate();
  Scene s;
  s.spec = spec;
  s.camera = CameraModel::centered(spec.height, spec.width, spec.focal_ratio);
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  if (!spec.trajectory.empty()) {
    s.poses = spec.trajectory;
  } else {
    const double sign = u(rng) < 0.5 ? -1.0 : 1.0;
    const double bx = sign * spec.baseline * (0.7 + 0.6 * u(rng));
    const double by = spec.baseline * 0.3 * (u(rng) - 0.5);
    const double bz = spec.forward_step * (2 * u(rng) - 1);
    const double mid = (static_cast<double>(spec.frames) - 1) / 2.0;
    for (std::size_t k = 0; k < spec.frames; ++k) {
      const double f = static_cast<double>(k) - mid;
      // Camera centre at f*(bx,by,bz); world-to-camera translation is its negation.
      s.poses.push_back(Pose::from_axis_angle({0, 0, 0}, {-f * bx, -f * by, -f * bz}));
    }
  }
  double max_dz = 0;
  for (const auto& p : s.poses) max_dz = std::max(max_dz, std::abs(p.t[2]));
  const double near = spec.min_depth + max_dz + 0.05, far = 0.95 * spec.max_depth - max_dz;

  const double fx = s.camera.fx;
  Plane bg;
  bg.z = far;
  bg.x0 = bg.y0 = -1e3;
  bg.x1 = bg.y1 = 1e3;
  bg.texture = random_texture(rng);
  s.planes.push_back(bg);
  const double W = static_cast<double>(spec.width), H = static_cast<double>(spec.height);
  for (std::size_t i = 0; i < spec.num_planes; ++i) {
    Plane p;
    p.z = near + (0.85 * far - near) * u(rng);
    const double cu = W * (0.1 + 0.8 * u(rng)), cv = H * (0.1 + 0.8 * u(rng));
    const double hw = W * (0.12 + 0.2 * u(rng)), hh = H * (0.12 + 0.2 * u(rng));
    const double sx = p.z / fx, sy = p.z / s.camera.fy;
    p.x0 = (cu - hw - s.camera.cx) * sx;
    p.x1 = (cu + hw - s.camera.cx) * sx;
    p.y0 = (cv - hh - s.camera.cy) * sy;
    p.y1 = (cv + hh - s.camera.cy) * sy;
    p.texture = random_texture(rng);
    s.planes.push_back(p);
  }
  return s;
}

// z-buffer raster of frame `frame`; depth is camera-frame z.
inline RenderedFrame render(const Scene& scene, std::size_t frame) {
  if (frame >= scene.poses.size())
    throw ContractError("frame " + std::to_string(frame) + " outside trajectory of length " +
                        std::to_string(scene.poses.size()));
  const std::size_t H = scene.spec.height, W = scene.spec.width;
  const CameraModel& cam = scene.camera;
  const Pose cam_to_world = scene.poses[frame].inverse();
  const auto& R = cam_to_world.R;
  const auto& C = cam_to_world.t;
  RenderedFrame out{Tensor({3, H, W}, 0.0), Tensor({H, W}, 0.0)};
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double dc[3] = {(static_cast<double>(x) - cam.cx) / cam.fx, (static_cast<double>(y) - cam.cy) / cam.fy, 1.0};
      const double dw[3] = {R[0] * dc[0] + R[1] * dc[1] + R[2] * dc[2], R[3] * dc[0] + R[4] * dc[1] + R[5] * dc[2],
                            R[6] * dc[0] + R[7] * dc[1] + R[8] * dc[2]};
      double best = INFINITY;
      const Plane* hit = nullptr;
      double hx = 0, hy = 0;
      for (const auto& p : scene.planes) {
        if (std::abs(dw[2]) < 1e-12) continue;
        const double s = (p.z - C[2]) / dw[2];  // camera z along this ray, since dc.z = 1
        if (!(s > 0) || s >= best) continue;
        const double X = C[0] + s * dw[0], Y = C[1] + s * dw[1];
        if (X < p.x0 || X > p.x1 || Y < p.y0 || Y > p.y1) continue;
        best = s;
        hit = &p;
        hx = X;
        hy = Y;
      }
      if (!hit) throw DataError("render: ray misses every plane");
      const auto c = hit->texture.color(hx, hy);
      for (std::size_t k = 0; k < 3; ++k) out.image[(k * H + y) * W + x] = c[k];
      out.depth[y * W + x] = best;
    }
  return out;
}

struct SceneRecord {
  Scene scene;
  std::vector<RenderedFrame> frames;
};

// Relative pose taking points from frame a's camera to frame b's camera.
inline Pose relative_pose(const Scene& s, std::size_t a, std::size_t b) {
  return s.poses[b].compose(s.poses[a].inverse());
}

inline std::vector<TrainSample> triplets(const SceneRecord& rec) {
  std::vector<TrainSample> out;
  for (std::size_t k = 1; k + 1 < rec.frames.size(); ++k) {
    TrainSample t;
    t.target = rec.frames[k].image;
    t.sources = {rec.frames[k - 1].image, rec.frames[k + 1].image};
    t.target_to_source = {relative_pose(rec.scene, k, k - 1), relative_pose(rec.scene, k, k + 1)};
    t.gt_depth = rec.frames[k].depth;
    out.push_back(std::move(t));
  }
  return out;
}

// Image-plane symmetries of a sample: an optional left-right flip, then an
// optional up-down flip, then an optional transpose. A flip of x is exact when
// cx = (W-1)/2 and maps camera points through F = diag(-1, 1, 1), so
// R -> F R F^T and t -> F t; the y flip and the x/y swap work the same way and
// need cy = (H-1)/2, and for the swap H = W and fx = fy.
struct Symmetry {
  bool flip_x = false, flip_y = false, transpose = false;
};

inline Tensor apply_symmetry(const Tensor& t, const Symmetry& g) {
  if (t.rank() < 2) throw DimensionError("apply_symmetry: needs a [.., H, W] tensor");
  const std::size_t W = t.shape()[t.rank() - 1], H = t.shape()[t.rank() - 2], planes = t.numel() / (H * W);
  if (g.transpose && H != W) throw DimensionError("apply_symmetry: transpose needs a square image");
  Tensor out(t.shape());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        std::size_t sy = g.transpose ? x : y, sx = g.transpose ? y : x;
        if (g.flip_y) sy = H - 1 - sy;
        if (g.flip_x) sx = W - 1 - sx;
        out[(p * H + y) * W + x] = t[(p * H + sy) * W + sx];
      }
  return out;
}

inline Pose apply_symmetry(const Pose& p, const Symmetry& g) {
  // G maps source camera coordinates to transformed ones: row i picks axis perm[i] with sign sign[i].
  const double fx = g.flip_x ? -1 : 1, fy = g.flip_y ? -1 : 1;
  const std::size_t perm[3] = {g.transpose ? 1u : 0u, g.transpose ? 0u : 1u, 2u};
  const double sign[3] = {g.transpose ? fy : fx, g.transpose ? fx : fy, 1};
  Pose m = p;
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) m.R[i * 3 + j] = sign[i] * p.R[perm[i] * 3 + perm[j]] * sign[j];
    m.t[i] = sign[i] * p.t[perm[i]];
  }
  return m;
}

inline TrainSample apply_symmetry(const TrainSample& s, const Symmetry& g) {
  TrainSample m;
  m.target = apply_symmetry(s.target, g);
  for (const auto& src : s.sources) m.sources.push_back(apply_symmetry(src, g));
  for (const auto& p : s.target_to_source) m.target_to_source.push_back(apply_symmetry(p, g));
  if (s.gt_depth.defined()) m.gt_depth = apply_symmetry(s.gt_depth, g);
  return m;
}

inline TrainSample mirror(const TrainSample& s) { return apply_symmetry(s, Symmetry{true, false, false}); }

inline SceneSpec scene_spec_for(const SceneSpec& base, std::size_t index) {
  SceneSpec s = base;
  s.seed = derive_seed(base.seed, index);
  return s;
}

inline std::vector<SceneRecord> make_scenes(const SceneSpec& base, std::size_t n_scenes, bool quantize = true) {
  if (n_scenes < 1) throw ConfigError("make_dataset: need at least one scene");
  std::vector<SceneRecord> out;
  for (std::size_t i = 0; i < n_scenes; ++i) {
    SceneRecord r{make_scene(scene_spec_for(base, i)), {}};
    for (std::size_t f = 0; f < r.scene.poses.size(); ++f) {
      RenderedFrame fr = render(r.scene, f);
      if (quantize) fr.image = quantize8(fr.image);
      r.frames.push_back(std::move(fr));
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<TrainSample> make_dataset(const SceneSpec& base, std::size_t n_scenes) {
  std::vector<TrainSample> out;
  for (const auto& r : make_scenes(base, n_scenes))
    for (auto& t : triplets(r)) out.push_back(std::move(t));
  return out;
}

// Photometric loss of the ground-truth reconstruction; small values certify
// that depth, poses and intrinsics agree with the rendered images.
inline double consistency_loss(const TrainSample& s, const CameraModel& cam) {
  NoGradGuard ng;
  std::vector<Tensor> warped, masks;
  for (std::size_t k = 0; k < s.sources.size(); ++k) {
    WarpResult w = warp(s.sources[k], s.gt_depth, s.target_to_source[k], cam);
    warped.push_back(w.image);
    masks.push_back(w.mask);
  }
  return photometric_loss(s.target, warped, masks).item();
}

// Dataset layout:
//   <dir>/manifest.txt                 scene count, extents, seed, scene list
//   <dir>/scene_NNN/frame_K.png        8-bit RGB
//   <dir>/scene_NNN/depth_K.mft        MFT1 depth tensor
//   <dir>/scene_NNN/manifest.txt       intrinsics and one 12-float [R|t] row per frame
namespace detail {
inline std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
inline std::string scene_dir_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%03zu", i);
  return buf;
}
}  // namespace detail

inline void save_dataset(const std::string& dir, const std::vector<SceneRecord>& scenes, std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ostringstream top;
  top << "monoformer-dataset 1\n";
  top << "seed " << seed << "\n";
  top << "scenes " << scenes.size() << "\n";
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& rec = scenes[i];
    const std::string name = detail::scene_dir_name(i);
    const fs::path sd = fs::path(dir) / name;
    fs::create_directories(sd);
    std::ostringstream m;
    const CameraModel& c = rec.scene.camera;
    m << "height " << rec.scene.spec.height << "\nwidth " << rec.scene.spec.width << "\n";
    m << "intrinsics " << detail::fmt17(c.fx) << ' ' << detail::fmt17(c.fy) << ' ' << detail::fmt17(c.cx) << ' '
      << detail::fmt17(c.cy) << "\n";
    m << "frames " << rec.frames.size() << "\n";
    for (std::size_t f = 0; f < rec.frames.size(); ++f) {
      const Pose& p = rec.scene.poses[f];
      m << "pose";
      for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t k = 0; k < 3; ++k) m << ' ' << detail::fmt17(p.R[r * 3 + k]);
        m << ' ' << detail::fmt17(p.t[r]);
      }
      m << "\n";
      write_png((sd / ("frame_" + std::to_string(f) + ".png")).string(), rec.frames[f].image);
      save_tensor((sd / ("depth_" + std::to_string(f) + ".mft")).string(), rec.frames[f].depth);
    }
    detail::write_file((sd / "manifest.txt").string(), m.str());
    top << "scene " << name << "\n";
  }
  detail::write_file((fs::path(dir) / "manifest.txt").string(), top.str());
}

inline std::vector<SceneRecord> load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path top_path = fs::path(dir) / "manifest.txt";
  if (!fs::exists(top_path)) throw DataError("no dataset manifest at " + top_path.string());
  std::istringstream top(detail::read_file(top_path.string()));
  std::string key;
  std::vector<std::string> names;
  while (top >> key) {
    if (key == "scene") {
      std::string n;
      top >> n;
      names.push_back(n);
    } else {
      std::string rest;
      std::getline(top, rest);
    }
  }
  if (names.empty()) throw DataError(top_path.string() + " lists no scenes");
  std::vector<SceneRecord> out;
  for (const auto& name : names) {
    const fs::path sd = fs::path(dir) / name;
    std::istringstream m(detail::read_file((sd / "manifest.txt").string()));
    SceneRecord rec;
    std::size_t frames = 0;
    while (m >> key) {
      if (key == "height") m >> rec.scene.spec.height;
      else if (key == "width") m >> rec.scene.spec.width;
      else if (key == "intrinsics") m >> rec.scene.camera.fx >> rec.scene.camera.fy >> rec.scene.camera.cx >> rec.scene.camera.cy;
      else if (key == "frames") m >> frames;
      else if (key == "pose") {
        Pose p;
        for (std::size_t r = 0; r < 3; ++r) {
          for (std::size_t k = 0; k < 3; ++k) m >> p.R[r * 3 + k];
          m >> p.t[r];
        }
        rec.scene.poses.push_back(p);
      } else {
        throw DataError((sd / "manifest.txt").string() + ": unknown key '" + key + "'");
      }
      if (!m) throw DataError((sd / "manifest.txt").string() + ": malformed value for '" + key + "'");
    }
    if (frames == 0 || rec.scene.poses.size() != frames)
      throw DataError((sd / "manifest.txt").string() + ": pose count does not match frame count");
    for (std::size_t f = 0; f < frames; ++f) {
      RenderedFrame fr{read_png((sd / ("frame_" + std::to_string(f) + ".png")).string()),
                       load_tensor((sd / ("depth_" + std::to_string(f) + ".mft")).string())};
      if (fr.image.dim(1) != rec.scene.spec.height || fr.image.dim(2) != rec.scene.spec.width ||
          fr.depth.shape() != Shape{rec.scene.spec.height, rec.scene.spec.width})
        throw DataError(sd.string() + ": frame " + std::to_string(f) + " extents disagree with the manifest");
      rec.frames.push_back(std::move(fr));
    }
    rec.scene.spec.frames = frames;
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace monoformer
