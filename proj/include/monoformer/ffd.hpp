#pragma once

// Feature Fusion Decoder.
//
// Stage l (l = 1..L) consumes Z_l with the running decoder state X_{L-l+1}:
//   X^_{L-l} = Conv(w_p A_p + w_c A_c + Z_l) + X_{L-l+1}
//   X_{L-l}  = X^ * [1 + tanh(gamma * CN(alpha * ||X^||_2 + beta))]
// ||X^||_2 is the per-channel l2 norm over the token grid, and
// CN(s) = s / sqrt(mean_c(s^2) + eps) (i.e. sqrt(C) s / ||s||). The seed
// state X_L is Z_L through a residual conv unit. All stages run on the
// 1/S token grid; a x2-bilinear-plus-conv head brings the result back to
// full resolution and the depth head maps it into [d_min, d_max].

#include <bit>
#include <string>

#include "monoformer/acm.hpp"
#include "monoformer/ops.hpp"
#include "monoformer/params.hpp"

namespace monoformer {

struct FfdConfig {
  std::size_t fusion_kernel = 3;  // 3 on the reassembled grid, or 1
  std::size_t head_min_channels = 8;
  double min_depth = 1.0;
  double max_depth = 30.0;
  double init_depth = 6.0;  // depth predicted everywhere by the untrained head
  double gate_eps = 1e-5;

  void validate() const {
    if (fusion_kernel != 1 && fusion_kernel != 3) throw ConfigError("ffd: fusion_kernel must be 1 or 3");
    if (head_min_channels == 0) throw ConfigError("ffd: head_min_channels must be positive");
    if (!(min_depth > 0) || !(max_depth > min_depth)) throw ConfigError("ffd: require 0 < min_depth < max_depth");
    if (!(init_depth > min_depth) || !(init_depth < max_depth))
      throw ConfigError("ffd: init_depth must lie strictly inside (min_depth, max_depth)");
  }

  // Logit whose sigmoid maps to init_depth through the disparity head.
  double init_logit() const {
    const double b = 1.0 / max_depth, a = 1.0 / min_depth - b;
    const double sigma = (1.0 / init_depth - b) / a;
    return std::log(sigma / (1.0 - sigma));
  }
};

struct FusionStageWeights {
  Tensor conv_w, conv_b;
  Tensor w_p, w_c;             // [1]
  Tensor alpha, beta, gamma;   // [C, 1]
};

struct HeadStage {
  Tensor conv_w, conv_b;
};

struct FfdWeights {
  Tensor res_w1, res_b1, res_w2, res_b2;
  std::vector<FusionStageWeights> stages;
  std::vector<HeadStage> upsample;
  Tensor depth_w, depth_b;

  static FfdWeights init(std::size_t channels, std::size_t layers, std::size_t total_stride, const FfdConfig& cfg,
                         Initializer& init) {
    cfg.validate();
    if (!std::has_single_bit(total_stride)) throw ConfigError("ffd: total stride must be a power of two");
    FfdWeights w;
    w.res_w1 = init.conv(channels, channels, 3);
    w.res_b1 = Initializer::constant({channels}, 0.0);
    w.res_w2 = init.conv(channels, channels, 3, 0.1);
    w.res_b2 = Initializer::constant({channels}, 0.0);
    for (std::size_t l = 0; l < layers; ++l) {
      w.stages.push_back({init.conv(channels, channels, cfg.fusion_kernel), Initializer::constant({channels}, 0.0),
                          Initializer::constant({1}, 0.0), Initializer::constant({1}, 0.0),
                          Initializer::constant({channels, 1}, 1.0), Initializer::constant({channels, 1}, 0.0),
                          Initializer::constant({channels, 1}, 0.0)});
    }
    std::size_t c = channels;
    for (std::size_t s = total_stride; s > 1; s /= 2) {
      const std::size_t next = std::max(cfg.head_min_channels, c / 2);
      w.upsample.push_back({init.conv(next, c, 3), Initializer::constant({next}, 0.0)});
      c = next;
    }
    w.depth_w = init.conv(1, c, 3, 0.1);
    w.depth_b = Initializer::constant({1}, cfg.init_logit());
    return w;
  }

  void collect(ParameterList& out, const std::string& prefix = "ffd.") const {
    append(out, prefix + "res.conv1.weight", res_w1);
    append(out, prefix + "res.conv1.bias", res_b1);
    append(out, prefix + "res.conv2.weight", res_w2);
    append(out, prefix + "res.conv2.bias", res_b2);
    for (std::size_t l = 0; l < stages.size(); ++l) {
      const std::string p = prefix + "stage" + std::to_string(l + 1) + ".";
      append(out, p + "conv.weight", stages[l].conv_w);
      append(out, p + "conv.bias", stages[l].conv_b);
      append(out, p + "w_p", stages[l].w_p);
      append(out, p + "w_c", stages[l].w_c);
      append(out, p + "alpha", stages[l].alpha);
      append(out, p + "beta", stages[l].beta);
      append(out, p + "gamma", stages[l].gamma);
    }
    for (std::size_t i = 0; i < upsample.size(); ++i) {
      const std::string p = prefix + "up" + std::to_string(i) + ".";
      append(out, p + "weight", upsample[i].conv_w);
      append(out, p + "bias", upsample[i].conv_b);
    }
    append(out, prefix + "depth.weight", depth_w);
    append(out, prefix + "depth.bias", depth_b);
  }
};

// [N, C] tokens (row-major grid) <-> [C, h, w] maps.
inline Tensor tokens_to_grid(const Tensor& tokens, std::size_t h, std::size_t w) {
  if (tokens.rank() != 2 || tokens.dim(0) != h * w)
    throw DimensionError("cannot lay " + shape_str(tokens.shape()) + " tokens on a " + std::to_string(h) + "x" +
                         std::to_string(w) + " grid");
  return permute(reshape(tokens, {h, w, tokens.dim(1)}), {2, 0, 1});
}

inline Tensor grid_to_tokens(const Tensor& grid) {
  const std::size_t c = grid.dim(0), h = grid.dim(1), w = grid.dim(2);
  return reshape(permute(grid, {1, 2, 0}), {h * w, c});
}

struct StageOutput {
  Tensor pre_gate;  // X^
  Tensor output;    // X
};

inline Tensor channel_gate(const Tensor& x_hat, const FusionStageWeights& w, double eps) {
  const std::size_t c = x_hat.dim(0), hw = x_hat.dim(1) * x_hat.dim(2);
  Tensor flat = reshape(x_hat, {c, hw});
  Tensor norm = sqrt(sum_axis(square(flat), 1) + eps);  // [C, 1]
  Tensor s = w.alpha * norm + w.beta;
  Tensor cn = s / sqrt(mean(square(s)) + eps);
  return 1.0 + tanh(w.gamma * cn);  // [C, 1]
}

inline StageOutput fuse_stage(const Tensor& tokens, const Tensor& a_p, const Tensor& a_c, const Tensor& x_prev,
                              const FusionStageWeights& w, const FfdConfig& cfg) {
  if (tokens.shape() != a_p.shape() || tokens.shape() != a_c.shape())
    throw DimensionError("fuse_stage: attention outputs " + shape_str(a_p.shape()) + "/" + shape_str(a_c.shape()) +
                         " must match tokens " + shape_str(tokens.shape()));
  if (x_prev.rank() != 3 || x_prev.dim(0) != tokens.dim(1) || x_prev.dim(1) * x_prev.dim(2) != tokens.dim(0))
    throw DimensionError("fuse_stage: decoder state " + shape_str(x_prev.shape()) + " does not match tokens " +
                         shape_str(tokens.shape()));
  const std::size_t h = x_prev.dim(1), wd = x_prev.dim(2);
  Tensor mixed = w.w_p * a_p + w.w_c * a_c + tokens;
  Tensor x_hat = conv2d(tokens_to_grid(mixed, h, wd), w.conv_w, w.conv_b, 1, cfg.fusion_kernel / 2) + x_prev;
  const Tensor gate = channel_gate(x_hat, w, cfg.gate_eps);
  const std::size_t c = x_hat.dim(0);
  Tensor x = reshape(reshape(x_hat, {c, h * wd}) * gate, {c, h, wd});
  return {x_hat, x};
}

// Sigmoid disparity mapped to depth 1/(a*sigma + b), sigma=0 -> max_depth,
// sigma=1 -> min_depth.
inline Tensor disparity_to_depth(const Tensor& sigma, const FfdConfig& cfg) {
  const double b = 1.0 / cfg.max_depth;
  const double a = 1.0 / cfg.min_depth - b;
  return div(Tensor::ones(sigma.shape()), sigma * a + b);
}

inline Tensor depth_head(const Tensor& features, const FfdWeights& w, const FfdConfig& cfg) {
  Tensor logits = conv2d(features, w.depth_w, w.depth_b, 1, 1);  // [1, H, W]
  Tensor sigma = sigmoid(reshape(logits, {logits.dim(1), logits.dim(2)}));
  return disparity_to_depth(sigma, cfg);
}

struct DecodeTrace {
  std::vector<std::size_t> consumed_layer;  // stage k consumed Z_{consumed_layer[k]} (1-based)
  std::vector<Tensor> stage_outputs;        // X_{L-1}, ..., X_0
};

// Stage l pairs Z_l with X_{L-l+1}.
inline std::vector<std::size_t> stage_schedule(std::size_t layers) {
  std::vector<std::size_t> order(layers);
  for (std::size_t l = 0; l < layers; ++l) order[l] = l + 1;
  return order;
}

inline Tensor decode(const std::vector<Tensor>& layer_tokens, const std::vector<AttentionPair>& attention,
                     std::size_t grid_h, std::size_t grid_w, const FfdWeights& w, const FfdConfig& cfg,
                     DecodeTrace* trace = nullptr) {
  const std::size_t L = layer_tokens.size();
  if (L == 0 || attention.size() != L || w.stages.size() != L)
    throw DimensionError("decode: need one attention pair and stage per encoder layer");
  Tensor top = tokens_to_grid(layer_tokens[L - 1], grid_h, grid_w);
  Tensor x = top + conv2d(gelu(conv2d(gelu(top), w.res_w1, w.res_b1, 1, 1)), w.res_w2, w.res_b2, 1, 1);
  for (std::size_t l : stage_schedule(L)) {
    const std::size_t i = l - 1;
    x = fuse_stage(layer_tokens[i], attention[i].position, attention[i].channel, x, w.stages[i], cfg).output;
    if (trace) {
      trace->consumed_layer.push_back(l);
      trace->stage_outputs.push_back(x.detach());
    }
  }
  for (const auto& up : w.upsample) x = gelu(conv2d(upsample2x(x), up.conv_w, up.conv_b, 1, 1));
  return depth_head(x, w, cfg);
}

}  // namespace monoformer
