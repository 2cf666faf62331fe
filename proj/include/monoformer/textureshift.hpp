#pragma once

// Texture-shift generators on [3,H,W] images in [0,1]:
//   watercolor     iterated bilateral smoothing (range distance over RGB)
//   pencil_sketch  gray -> invert -> Gaussian blur -> colour dodge
//   patch_shuffle  random permutation of non-overlapping square patches
// Neural style transfer is not provided.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "monoformer/tensor.hpp"

namespace monoformer {

struct WatercolorParams {
  std::size_t iterations = 3;
  double spatial_sigma = 2.0;
  double range_sigma = 0.12;

  void validate() const {
    if (iterations == 0) throw ConfigError("watercolor: iterations must be positive");
    if (!(spatial_sigma > 0) || !(range_sigma > 0)) throw ConfigError("watercolor: sigmas must be positive");
  }
};

struct SketchParams {
  double blur_sigma = 2.0;
  double dodge_eps = 1e-3;

  void validate() const {
    if (!(blur_sigma > 0)) throw ConfigError("pencil_sketch: blur_sigma must be positive");
    if (!(dodge_eps > 0)) throw ConfigError("pencil_sketch: dodge_eps must be positive");
  }
};

struct ShuffleParams {
  std::size_t patch = 16;
  std::uint64_t seed = 0;
};

namespace detail {

inline void check_image(const Tensor& img, const char* who) {
  if (img.rank() != 3 || img.dim(0) != 3) throw DimensionError(std::string(who) + " expects [3,H,W], got " + shape_str(img.shape()));
}

inline std::size_t kernel_radius(double sigma) { return static_cast<std::size_t>(std::ceil(2.5 * sigma)); }

// One bilateral pass. Each output is centre + weighted mean offset, so a flat
// neighbourhood is reproduced exactly.
inline Tensor bilateral_pass(const Tensor& img, double ss, double rs) {
  const std::size_t H = img.dim(1), W = img.dim(2), HW = H * W;
  const long r = static_cast<long>(kernel_radius(ss));
  Tensor out({3, H, W});
  const double is2 = 1.0 / (2 * ss * ss), ir2 = 1.0 / (2 * rs * rs);
  for (long y = 0; y < static_cast<long>(H); ++y)
    for (long x = 0; x < static_cast<long>(W); ++x) {
      const std::size_t c0 = static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x);
      double wsum = 0, acc[3] = {0, 0, 0};
      for (long dy = -r; dy <= r; ++dy)
        for (long dx = -r; dx <= r; ++dx) {
          const long yy = y + dy, xx = x + dx;
          if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
          const std::size_t j = static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx);
          double diff[3], d2 = 0;
          for (std::size_t c = 0; c < 3; ++c) {
            diff[c] = img[c * HW + j] - img[c * HW + c0];
            d2 += diff[c] * diff[c];
          }
          const double w = std::exp(-static_cast<double>(dx * dx + dy * dy) * is2 - d2 * ir2);
          wsum += w;
          for (std::size_t c = 0; c < 3; ++c) acc[c] += w * diff[c];
        }
      for (std::size_t c = 0; c < 3; ++c) out[c * HW + c0] = std::clamp(img[c * HW + c0] + acc[c] / wsum, 0.0, 1.0);
    }
  return out;
}

// Separable Gaussian on an [H,W] plane, renormalised at the borders.
inline std::vector<double> gaussian_blur(const std::vector<double>& plane, std::size_t H, std::size_t W, double sigma) {
  const long r = static_cast<long>(kernel_radius(sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  for (long i = -r; i <= r; ++i) k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
  auto pass = [&](const std::vector<double>& in, bool horizontal) {
    std::vector<double> out(in.size());
    for (long y = 0; y < static_cast<long>(H); ++y)
      for (long x = 0; x < static_cast<long>(W); ++x) {
        const double centre = in[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)];
        double wsum = 0, acc = 0;
        for (long i = -r; i <= r; ++i) {
          const long yy = horizontal ? y : y + i, xx = horizontal ? x + i : x;
          if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
          const double w = k[static_cast<std::size_t>(i + r)];
          wsum += w;
          acc += w * (in[static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)] - centre);
        }
        out[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)] = centre + acc / wsum;
      }
    return out;
  };
  return pass(pass(plane, true), false);
}

// Unbiased draw from [0, n) using only the raw 64-bit engine output.
inline std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v;
  do v = rng();
  while (v >= limit);
  return v % n;
}

}  // namespace detail

inline Tensor watercolor(const Tensor& img, const WatercolorParams& p = {}) {
  detail::check_image(img, "watercolor");
  p.validate();
  Tensor out = img.detach();
  for (std::size_t i = 0; i < p.iterations; ++i) out = detail::bilateral_pass(out, p.spatial_sigma, p.range_sigma);
  return out;
}

inline Tensor grayscale(const Tensor& img) {
  detail::check_image(img, "grayscale");
  const std::size_t H = img.dim(1), W = img.dim(2), HW = H * W;
  Tensor g({H, W});
  for (std::size_t i = 0; i < HW; ++i) g[i] = 0.299 * img[i] + 0.587 * img[HW + i] + 0.114 * img[2 * HW + i];
  return g;
}

inline Tensor pencil_sketch(const Tensor& img, const SketchParams& p = {}) {
  detail::check_image(img, "pencil_sketch");
  p.validate();
  const std::size_t H = img.dim(1), W = img.dim(2), HW = H * W;
  const Tensor gray = grayscale(img);
  std::vector<double> inv(HW);
  for (std::size_t i = 0; i < HW; ++i) inv[i] = 1.0 - gray[i];
  const std::vector<double> blur = detail::gaussian_blur(inv, H, W, p.blur_sigma);
  Tensor out({3, H, W});
  for (std::size_t i = 0; i < HW; ++i) {
    const double v = std::clamp((gray[i] + p.dodge_eps) / (1.0 - blur[i] + p.dodge_eps), 0.0, 1.0);
    out[i] = out[HW + i] = out[2 * HW + i] = v;
  }
  return out;
}

inline Tensor patch_shuffle(const Tensor& img, const ShuffleParams& p) {
  detail::check_image(img, "patch_shuffle");
  const std::size_t H = img.dim(1), W = img.dim(2);
  if (p.patch == 0 || H % p.patch || W % p.patch)
    throw ConfigError("patch_shuffle: patch size " + std::to_string(p.patch) + " must divide " + std::to_string(H) +
                      "x" + std::to_string(W));
  const std::size_t gh = H / p.patch, gw = W / p.patch, n = gh * gw;
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  std::mt19937_64 rng(p.seed);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[detail::bounded(rng, i)]);
  Tensor out({3, H, W});
  for (std::size_t dst = 0; dst < n; ++dst) {
    const std::size_t src = perm[dst];
    const std::size_t dy = (dst / gw) * p.patch, dx = (dst % gw) * p.patch;
    const std::size_t sy = (src / gw) * p.patch, sx = (src % gw) * p.patch;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < p.patch; ++y)
        for (std::size_t x = 0; x < p.patch; ++x)
          out[(c * H + dy + y) * W + dx + x] = img[(c * H + sy + y) * W + sx + x];
  }
  return out;
}

inline const std::vector<std::string>& style_names() {
  static const std::vector<std::string> names{"watercolor", "pencil", "shuffle"};
  return names;
}

struct StyleParams {
  WatercolorParams watercolor;
  SketchParams sketch;
  ShuffleParams shuffle;
};

inline Tensor apply_style(const std::string& style, const Tensor& img, const StyleParams& p) {
  if (style == "watercolor") return watercolor(img, p.watercolor);
  if (style == "pencil") return pencil_sketch(img, p.sketch);
  if (style == "shuffle") return patch_shuffle(img, p.shuffle);
  std::string valid;
  for (const auto& n : style_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown style '" + style + "'; valid styles: " + valid);
}

}  // namespace monoformer
