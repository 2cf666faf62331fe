#pragma once

// CNN stem and patch embedding.
//
// The stem is two stride-2 3x3 convs followed by residual blocks, which puts
// the feature map at 1/4 resolution. Grouping PxP cells of that map into
// patch tokens completes the total stride 4*P (16 for P = 4).
//
// Patch flattening: patches are scanned row-major over the patch grid; inside
// a patch the vector is channel-major, i.e. index c*P*P + dy*P + dx.

#include <string>

#include "monoformer/ops.hpp"
#include "monoformer/params.hpp"

namespace monoformer {

struct BackboneConfig {
  std::size_t in_channels = 3;
  std::size_t stem_channels = 16;
  std::size_t num_res_blocks = 2;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 16;
  bool positional_embedding = true;

  static constexpr std::size_t stem_stride = 4;
  std::size_t total_stride() const { return stem_stride * patch_size; }

  void validate(std::size_t height, std::size_t width) const {
    if (in_channels == 0 || stem_channels < 2 || stem_channels % 2 || patch_size == 0 || embed_dim == 0)
      throw ConfigError("backbone: channels must be positive, stem_channels even, patch_size positive");
    const std::size_t s = total_stride();
    if (height == 0 || width == 0 || height % s || width % s)
      throw ConfigError("image extents " + std::to_string(height) + "x" + std::to_string(width) +
                        " must be divisible by the total stride " + std::to_string(s));
  }
};

struct FeatureMap {
  Tensor features;  // [C, H/4, W/4]
};

struct TokenSequence {
  Tensor tokens;  // [(N+1), C_e]; row 0 is the special token
  std::size_t grid_h = 0, grid_w = 0;
  std::size_t patches() const { return grid_h * grid_w; }
};

struct ResBlock {
  Tensor w1, b1, w2, b2;
};

struct BackboneWeights {
  Tensor conv1_w, conv1_b, conv2_w, conv2_b;
  std::vector<ResBlock> blocks;
  Tensor projection;       // E: [C*P*P, C_e]
  Tensor special_token;    // t_s: [1, C_e]
  Tensor position;         // [(N+1), C_e], undefined when disabled

  static BackboneWeights init(const BackboneConfig& cfg, std::size_t height, std::size_t width, Initializer& init) {
    cfg.validate(height, width);
    BackboneWeights w;
    const std::size_t half = cfg.stem_channels / 2, c = cfg.stem_channels;
    w.conv1_w = init.conv(half, cfg.in_channels, 3);
    w.conv1_b = Initializer::constant({half}, 0.0);
    w.conv2_w = init.conv(c, half, 3);
    w.conv2_b = Initializer::constant({c}, 0.0);
    for (std::size_t i = 0; i < cfg.num_res_blocks; ++i) {
      // Second conv starts small so each block begins close to identity.
      w.blocks.push_back({init.conv(c, c, 3), Initializer::constant({c}, 0.0), init.conv(c, c, 3, 0.1),
                          Initializer::constant({c}, 0.0)});
    }
    const std::size_t patch_dim = c * cfg.patch_size * cfg.patch_size;
    w.projection = init.normal({patch_dim, cfg.embed_dim}, 1.0 / std::sqrt(static_cast<double>(patch_dim)));
    w.special_token = init.normal({1, cfg.embed_dim}, 0.02);
    if (cfg.positional_embedding) {
      const std::size_t n = (height / cfg.total_stride()) * (width / cfg.total_stride());
      w.position = init.normal({n + 1, cfg.embed_dim}, 0.02);
    }
    return w;
  }

  void collect(ParameterList& out, const std::string& prefix = "backbone.") const {
    append(out, prefix + "conv1.weight", conv1_w);
    append(out, prefix + "conv1.bias", conv1_b);
    append(out, prefix + "conv2.weight", conv2_w);
    append(out, prefix + "conv2.bias", conv2_b);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = prefix + "res" + std::to_string(i) + ".";
      append(out, p + "conv1.weight", blocks[i].w1);
      append(out, p + "conv1.bias", blocks[i].b1);
      append(out, p + "conv2.weight", blocks[i].w2);
      append(out, p + "conv2.bias", blocks[i].b2);
    }
    append(out, prefix + "projection", projection);
    append(out, prefix + "special_token", special_token);
    append(out, prefix + "position", position);
  }
};

// Maps a [3,H,W] image in [0,1] to a quarter-resolution feature map.
inline FeatureMap stem_forward(const Tensor& image, const BackboneWeights& w, const BackboneConfig& cfg) {
  if (image.rank() != 3 || image.dim(0) != cfg.in_channels)
    throw DimensionError("stem expects [" + std::to_string(cfg.in_channels) + ",H,W], got " +
                         shape_str(image.shape()));
  if (image.dim(1) % BackboneConfig::stem_stride || image.dim(2) % BackboneConfig::stem_stride)
    throw ConfigError("image extents " + std::to_string(image.dim(1)) + "x" + std::to_string(image.dim(2)) +
                      " must be divisible by " + std::to_string(BackboneConfig::stem_stride));
  Tensor x = gelu(conv2d(image, w.conv1_w, w.conv1_b, 2, 1));
  x = gelu(conv2d(x, w.conv2_w, w.conv2_b, 2, 1));
  for (const auto& b : w.blocks) x = x + conv2d(gelu(conv2d(x, b.w1, b.b1, 1, 1)), b.w2, b.b2, 1, 1);
  return {x};
}

// [C, H, W] -> [N, C*P*P] in the documented patch order.
inline Tensor patchify(const Tensor& f, std::size_t patch) {
  if (f.rank() != 3 || f.dim(1) % patch || f.dim(2) % patch)
    throw DimensionError("feature map " + shape_str(f.shape()) + " not divisible into " + std::to_string(patch) +
                         "x" + std::to_string(patch) + " patches");
  const std::size_t c = f.dim(0), gh = f.dim(1) / patch, gw = f.dim(2) / patch;
  Tensor t = reshape(f, {c, gh, patch, gw, patch});
  t = permute(t, {1, 3, 0, 2, 4});
  return reshape(t, {gh * gw, c * patch * patch});
}

// Inverse of patchify.
inline Tensor unpatchify(const Tensor& p, std::size_t channels, std::size_t grid_h, std::size_t grid_w,
                         std::size_t patch) {
  Tensor t = reshape(p, {grid_h, grid_w, channels, patch, patch});
  t = permute(t, {2, 0, 3, 1, 4});
  return reshape(t, {channels, grid_h * patch, grid_w * patch});
}

// Z0 = [t_s; p_1 E; ...; p_N E]
inline TokenSequence patchify_embed(const FeatureMap& f, const Tensor& projection, const Tensor& special_token,
                                    std::size_t patch) {
  Tensor patches = patchify(f.features, patch);
  if (patches.dim(1) != projection.dim(0))
    throw DimensionError("patch vector length " + std::to_string(patches.dim(1)) + " does not match projection " +
                         shape_str(projection.shape()));
  TokenSequence seq;
  seq.grid_h = f.features.dim(1) / patch;
  seq.grid_w = f.features.dim(2) / patch;
  seq.tokens = concat({special_token, matmul(patches, projection)}, 0);
  return seq;
}

inline TokenSequence embed(const Tensor& image, const BackboneWeights& w, const BackboneConfig& cfg,
                           FeatureMap* stem_out = nullptr) {
  FeatureMap f = stem_forward(image, w, cfg);
  TokenSequence seq = patchify_embed(f, w.projection, w.special_token, cfg.patch_size);
  if (cfg.positional_embedding) {
    if (!w.position.defined() || w.position.dim(0) != seq.tokens.dim(0))
      throw ConfigError("positional embedding sized for a different input resolution");
    seq.tokens = seq.tokens + w.position;
  }
  if (stem_out) *stem_out = f;
  return seq;
}

}  // namespace monoformer
