#pragma once

// Photometric self-supervision: inverse warping of source frames into the
// target view through predicted depth and a known relative pose, L1
// reconstruction with a per-pixel minimum over sources, and an edge-aware
// disparity smoothness term.

#include <array>
#include <map>
#include <string>

#include "monoformer/model.hpp"
#include "monoformer/ops.hpp"

namespace monoformer {

struct CameraModel {
  double fx = 0, fy = 0, cx = 0, cy = 0;

  void validate(std::size_t height, std::size_t width) const {
    if (!(fx > 0) || !(fy > 0)) throw ConfigError("camera focal lengths must be positive");
    if (cx < 0 || cy < 0 || cx > static_cast<double>(width - 1) || cy > static_cast<double>(height - 1))
      throw ConfigError("camera principal point must lie inside the image");
  }

  static CameraModel centered(std::size_t height, std::size_t width, double focal_ratio = 0.9) {
    return {focal_ratio * static_cast<double>(width), focal_ratio * static_cast<double>(width),
            (static_cast<double>(width) - 1) / 2.0, (static_cast<double>(height) - 1) / 2.0};
  }
};

// Rigid transform x' = R x + t, R row-major.
struct Pose {
  std::array<double, 9> R{1, 0, 0, 0, 1, 0, 0, 0, 1};
  std::array<double, 3> t{0, 0, 0};

  static Pose identity() { return {}; }

  static Pose from_axis_angle(std::array<double, 3> axis_angle, std::array<double, 3> translation) {
    Pose p;
    p.t = translation;
    const double th = std::sqrt(axis_angle[0] * axis_angle[0] + axis_angle[1] * axis_angle[1] + axis_angle[2] * axis_angle[2]);
    if (th < 1e-15) return p;
    const double kx = axis_angle[0] / th, ky = axis_angle[1] / th, kz = axis_angle[2] / th;
    const double c = std::cos(th), s = std::sin(th), v = 1 - c;
    p.R = {c + kx * kx * v,      kx * ky * v - kz * s, kx * kz * v + ky * s,
           ky * kx * v + kz * s, c + ky * ky * v,      ky * kz * v - kx * s,
           kz * kx * v - ky * s, kz * ky * v + kx * s, c + kz * kz * v};
    return p;
  }

  std::array<double, 3> apply(const std::array<double, 3>& x) const {
    return {R[0] * x[0] + R[1] * x[1] + R[2] * x[2] + t[0], R[3] * x[0] + R[4] * x[1] + R[5] * x[2] + t[1],
            R[6] * x[0] + R[7] * x[1] + R[8] * x[2] + t[2]};
  }

  Pose inverse() const {
    Pose p;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) p.R[i * 3 + j] = R[j * 3 + i];
    for (int i = 0; i < 3; ++i) p.t[i] = -(p.R[i * 3] * t[0] + p.R[i * 3 + 1] * t[1] + p.R[i * 3 + 2] * t[2]);
    return p;
  }

  // (*this) after `first`.
  Pose compose(const Pose& first) const {
    Pose p;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += R[i * 3 + k] * first.R[k * 3 + j];
        p.R[i * 3 + j] = s;
      }
    const auto moved = apply(first.t);
    p.t = moved;
    return p;
  }

  void validate(double tol = 1e-9) const {
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += R[k * 3 + i] * R[k * 3 + j];
        if (std::abs(s - (i == j ? 1.0 : 0.0)) > tol) throw DataError("pose rotation is not orthonormal");
      }
    const double det = R[0] * (R[4] * R[8] - R[5] * R[7]) - R[1] * (R[3] * R[8] - R[5] * R[6]) +
                       R[2] * (R[3] * R[7] - R[4] * R[6]);
    if (std::abs(det - 1.0) > tol) throw DataError("pose rotation determinant is not 1");
  }
};

struct WarpResult {
  Tensor image;  // [C, H, W] source resampled into the target view
  Tensor mask;   // [H, W], 1 where the reprojection lands inside the source
};

// Pixel coordinates in the source frame for every target pixel.
struct Reprojection {
  Tensor u, v;   // [H, W], differentiable in depth
  Tensor mask;   // [H, W]
};

inline Reprojection reproject(const Tensor& depth, const Pose& target_to_source, const CameraModel& cam) {
  if (depth.rank() != 2) throw DimensionError("depth must be [H,W], got " + shape_str(depth.shape()));
  const std::size_t H = depth.dim(0), W = depth.dim(1);
  Tensor ax({H, W}), ay({H, W}), az({H, W});
  const auto& R = target_to_source.R;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double rx = (static_cast<double>(x) - cam.cx) / cam.fx;
      const double ry = (static_cast<double>(y) - cam.cy) / cam.fy;
      const std::size_t i = y * W + x;
      ax[i] = R[0] * rx + R[1] * ry + R[2];
      ay[i] = R[3] * rx + R[4] * ry + R[5];
      az[i] = R[6] * rx + R[7] * ry + R[8];
    }
  const auto& t = target_to_source.t;
  Tensor xs = depth * ax + t[0];
  Tensor ys = depth * ay + t[1];
  Tensor zs = depth * az + t[2];
  Reprojection r;
  r.u = (xs / zs) * cam.fx + cam.cx;
  r.v = (ys / zs) * cam.fy + cam.cy;
  r.mask = Tensor({H, W});
  constexpr double slack = 1e-9;
  for (std::size_t i = 0; i < H * W; ++i) {
    const double u = r.u[i], v = r.v[i];
    const bool ok = zs[i] > 0 && u >= -slack && v >= -slack && u <= static_cast<double>(W - 1) + slack &&
                    v <= static_cast<double>(H - 1) + slack;
    r.mask[i] = ok ? 1.0 : 0.0;
  }
  return r;
}

inline WarpResult warp(const Tensor& source, const Tensor& depth, const Pose& target_to_source,
                       const CameraModel& cam) {
  if (source.rank() != 3 || source.dim(1) != depth.dim(0) || source.dim(2) != depth.dim(1))
    throw DimensionError("warp: source " + shape_str(source.shape()) + " and depth " + shape_str(depth.shape()) +
                         " extents differ");
  for (double d : depth.values())
    if (!(d > 0)) throw ContractError("warp: depth must be strictly positive");
  Reprojection r = reproject(depth, target_to_source, cam);
  return {grid_sample(source, r.u, r.v), r.mask};
}

// Mean over valid pixels of the per-pixel minimum, over sources, of the
// channel-mean absolute difference. A pixel is valid when at least one source
// covers it.
inline Tensor photometric_loss(const Tensor& target, const std::vector<Tensor>& warped,
                               const std::vector<Tensor>& masks) {
  if (warped.empty() || warped.size() != masks.size())
    throw ContractError("photometric_loss: need one mask per warped source");
  const std::size_t H = target.dim(1), W = target.dim(2);
  constexpr double invalid_cost = 1e6;
  Tensor best;
  Tensor valid({H, W}, 0.0);
  for (std::size_t s = 0; s < warped.size(); ++s) {
    if (warped[s].shape() != target.shape() || masks[s].shape() != Shape{H, W})
      throw DimensionError("photometric_loss: shape mismatch for source " + std::to_string(s));
    Tensor e = mean_axis(abs(target - warped[s]), 0, false);
    Tensor penalty({H, W});
    for (std::size_t i = 0; i < H * W; ++i) {
      penalty[i] = masks[s][i] > 0 ? 0.0 : invalid_cost;
      valid[i] = std::max(valid[i], masks[s][i] > 0 ? 1.0 : 0.0);
    }
    Tensor cost = e * masks[s] + penalty;
    best = best.defined() ? minimum(best, cost) : cost;
  }
  double count = 0;
  for (double m : valid.values()) count += m;
  if (count == 0) throw ContractError("photometric_loss: no valid pixels");
  return sum(best * valid) * (1.0 / count);
}

inline Tensor photometric_loss(const Tensor& target, const Tensor& warped, const Tensor& mask) {
  return photometric_loss(target, std::vector<Tensor>{warped}, std::vector<Tensor>{mask});
}

// Edge-aware smoothness of mean-normalized disparity: mean |d/dx disp| *
// exp(-|d/dx I|) plus the same along y.
inline Tensor smoothness_loss(const Tensor& depth, const Tensor& image) {
  if (depth.rank() != 2 || image.rank() != 3 || image.dim(1) != depth.dim(0) || image.dim(2) != depth.dim(1))
    throw DimensionError("smoothness_loss: depth " + shape_str(depth.shape()) + " vs image " + shape_str(image.shape()));
  const std::size_t H = depth.dim(0), W = depth.dim(1);
  Tensor disp = div(Tensor::ones({H, W}), depth);
  disp = disp / mean(disp);
  Tensor total = Tensor::zeros({1});
  if (W > 1) {
    Tensor dx = abs(slice(disp, 1, 1, W) - slice(disp, 1, 0, W - 1));
    Tensor ix = mean_axis(abs(slice(image, 2, 1, W) - slice(image, 2, 0, W - 1)), 0, false);
    total = total + mean(dx * exp(-ix).detach());
  }
  if (H > 1) {
    Tensor dy = abs(slice(disp, 0, 1, H) - slice(disp, 0, 0, H - 1));
    Tensor iy = mean_axis(abs(slice(image, 1, 1, H) - slice(image, 1, 0, H - 1)), 0, false);
    total = total + mean(dy * exp(-iy).detach());
  }
  return total;
}

struct TrainSample {
  Tensor target;                  // [3, H, W]
  std::vector<Tensor> sources;    // [3, H, W] each
  std::vector<Pose> target_to_source;
  Tensor gt_depth;                // [H, W], evaluation only

  void validate() const {
    if (sources.empty()) throw ContractError("training sample needs at least one source frame");
    if (sources.size() != target_to_source.size()) throw ContractError("one pose per source frame required");
    for (const auto& s : sources)
      if (s.shape() != target.shape()) throw DimensionError("source and target extents differ");
  }
};

struct LossBreakdown {
  double photometric = 0, smoothness = 0, total = 0;
};

struct TrainConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  double smoothness_weight = 1e-3;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
  std::size_t batch_size = 0;  // 0 = every sample each step
};

class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum, double clip_norm = 0.0)
      : lr_(lr), momentum_(momentum), clip_(clip_norm) {}

  void step(const ParameterList& params) {
    double scale = 1.0;
    if (clip_ > 0) {
      double sq = 0;
      for (const auto& p : params)
        if (p.tensor.has_grad())
          for (double g : p.tensor.impl()->grad) sq += g * g;
      const double norm = std::sqrt(sq);
      if (norm > clip_) scale = clip_ / norm;
    }
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      auto& v = velocity_[p.name];
      if (v.empty()) v.assign(p.tensor.numel(), 0.0);
      const auto& g = p.tensor.impl()->grad;
      Tensor t = p.tensor;
      auto data = t.data();
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = momentum_ * v[i] + scale * g[i];
        data[i] -= lr_ * v[i];
      }
    }
  }

  double learning_rate() const { return lr_; }

 private:
  double lr_, momentum_, clip_;
  std::map<std::string, std::vector<double>> velocity_;
};

// Names the first non-finite parameter, else the first graph op producing a
// non-finite value on the way to `result`.
[[noreturn]] inline void throw_non_finite(const MonoFormer& model, const Tensor& result, const std::string& what) {
  for (const auto& p : model.parameters())
    if (!p.tensor.all_finite()) throw NumericError("non-finite " + what + "; first non-finite tensor: parameter " + p.name);
  throw NumericError("non-finite " + what + "; first non-finite tensor: " + Graph::trace(result).first_non_finite());
}

inline LossBreakdown sample_loss(const MonoFormer& model, const TrainSample& s, const CameraModel& cam,
                                 double smoothness_weight, Tensor* total_out = nullptr) {
  s.validate();
  Tensor depth = model.forward(s.target);
  if (!depth.all_finite()) throw_non_finite(model, depth, "depth");
  std::vector<Tensor> warped, masks;
  for (std::size_t k = 0; k < s.sources.size(); ++k) {
    WarpResult w = warp(s.sources[k], depth, s.target_to_source[k], cam);
    warped.push_back(w.image);
    masks.push_back(w.mask);
  }
  Tensor photo = photometric_loss(s.target, warped, masks);
  Tensor smooth = smoothness_loss(depth, s.target);
  Tensor total = photo + smooth * smoothness_weight;
  if (total_out) *total_out = total;
  return {photo.item(), smooth.item(), total.item()};
}

// One optimizer step over `batch`: forward, backward, parameter update.
inline LossBreakdown train_step(MonoFormer& model, const std::vector<TrainSample>& batch, const CameraModel& cam,
                                SgdMomentum& opt, const TrainConfig& cfg) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  const ParameterList params = model.parameters();
  for (auto p : params) p.tensor.zero_grad();
  LossBreakdown avg;
  const double w = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : batch) {
    Tensor total;
    LossBreakdown b = sample_loss(model, s, cam, cfg.smoothness_weight, &total);
    if (!std::isfinite(b.total)) throw_non_finite(model, total, "loss");
    backward(total * w);
    avg.photometric += w * b.photometric;
    avg.smoothness += w * b.smoothness;
    avg.total += w * b.total;
  }
  opt.step(params);
  return avg;
}

}  // namespace monoformer
