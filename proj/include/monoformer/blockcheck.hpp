#pragma once

// Finite-difference verification of every differentiable block of the model
// and the self-supervised objective, on freshly initialised toy weights.

#include <random>
#include <string>

#include "monoformer/gradcheck.hpp"
#include "monoformer/selfsup.hpp"

namespace monoformer {

struct BlockCheck {
  std::string block;
  double tolerance = 0;
  GradCheckReport report;
};

struct BlockCheckOptions {
  std::uint64_t seed = 0;
  std::size_t coords_per_input = 24;  // 0 probes every coordinate
  double tolerance = 1e-4;
  double warp_tolerance = 1e-3;
};

namespace detail {
inline Tensor uniform_tensor(Shape s, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = u(rng);
  return t;
}
}  // namespace detail

inline std::vector<BlockCheck> check_blocks(const ModelConfig& cfg, const BlockCheckOptions& opt = {}) {
  cfg.validate();
  std::mt19937_64 rng(opt.seed ^ 0x6b636865636bULL);
  MonoFormer model(cfg, opt.seed + 1);
  const std::size_t H = cfg.height, W = cfg.width, C = cfg.backbone.embed_dim;
  const std::size_t gh = cfg.grid_h(), gw = cfg.grid_w(), N = gh * gw;
  GradCheckOptions g;
  g.max_coords = opt.coords_per_input;
  g.seed = opt.seed;
  g.tol = opt.tolerance;
  std::vector<BlockCheck> out;
  auto run = [&](const std::string& name, const TensorFunction& f, std::vector<Tensor> inputs, double tol) {
    GradCheckOptions o = g;
    o.tol = tol;
    out.push_back({name, tol, grad_check(f, std::move(inputs), o)});
  };

  const Tensor image = detail::uniform_tensor({3, H, W}, rng, 0.0, 1.0);
  const BackboneWeights& bb = model.backbone();
  run("stem", [&](const std::vector<Tensor>& in) {
        return probe_loss(stem_forward(in[0], bb, cfg.backbone).features);
      },
      {image, bb.conv1_w, bb.conv2_w, bb.blocks.empty() ? bb.conv2_b : bb.blocks[0].w1}, opt.tolerance);

  const Tensor fmap = detail::uniform_tensor({cfg.backbone.stem_channels, H / 4, W / 4}, rng, -1.0, 1.0);
  run("patch_embedding", [&](const std::vector<Tensor>& in) {
        return probe_loss(patchify_embed({in[0]}, in[1], in[2], cfg.backbone.patch_size).tokens);
      },
      {fmap, bb.projection, bb.special_token}, opt.tolerance);

  const Tensor z = detail::uniform_tensor({N + 1, C}, rng, -1.0, 1.0);
  const LayerWeights& lw = model.layers()[0];
  run("attention", [&](const std::vector<Tensor>& in) { return probe_loss(layer_forward(in[0], lw, cfg.transformer)); },
      {z, lw.heads[0].wq, lw.heads[0].wk, lw.heads[0].wv, lw.proj, lw.mlp_w1, lw.ln_gain}, opt.tolerance);

  const Tensor tokens = detail::uniform_tensor({N, C}, rng, -1.0, 1.0);
  const AcmWeights& aw = model.acm()[0];
  run("acm_position", [&](const std::vector<Tensor>& in) { return probe_loss(position_attention(in[0], aw)); },
      {tokens, aw.wq, aw.wk, aw.wv, aw.bv}, opt.tolerance);
  run("acm_channel",
      [&](const std::vector<Tensor>& in) { return probe_loss(channel_attention(in[0], nullptr, cfg.acm.channel_mode)); },
      {tokens}, opt.tolerance);

  FfdWeights& fw = model.ffd();
  FusionStageWeights st = fw.stages[0];
  st.w_p = detail::uniform_tensor({1}, rng, 0.2, 0.8).set_requires_grad();
  st.w_c = detail::uniform_tensor({1}, rng, 0.2, 0.8).set_requires_grad();
  st.gamma = detail::uniform_tensor({C, 1}, rng, 0.3, 1.0).set_requires_grad();
  st.beta = detail::uniform_tensor({C, 1}, rng, -0.3, 0.3).set_requires_grad();
  const Tensor a_p = detail::uniform_tensor({N, C}, rng, -1.0, 1.0);
  const Tensor a_c = detail::uniform_tensor({N, C}, rng, -1.0, 1.0);
  const Tensor x_prev = detail::uniform_tensor({C, gh, gw}, rng, -1.0, 1.0);
  run("ffd_stage", [&](const std::vector<Tensor>& in) {
        FusionStageWeights s = st;
        s.conv_w = in[4];
        s.w_p = in[5];
        s.w_c = in[6];
        s.alpha = in[7];
        s.beta = in[8];
        s.gamma = in[9];
        return probe_loss(fuse_stage(in[0], in[1], in[2], in[3], s, cfg.ffd).output);
      },
      {tokens, a_p, a_c, x_prev, st.conv_w, st.w_p, st.w_c, st.alpha, st.beta, st.gamma}, opt.tolerance);

  run("decoder_head", [&](const std::vector<Tensor>& in) {
        Tensor x = in[0];
        for (const auto& up : fw.upsample) x = gelu(conv2d(upsample2x(x), up.conv_w, up.conv_b, 1, 1));
        return probe_loss(depth_head(x, fw, cfg.ffd));
      },
      {x_prev, fw.upsample[0].conv_w, fw.depth_w}, opt.tolerance);

  const CameraModel cam = CameraModel::centered(H, W);
  const Pose pose = Pose::from_axis_angle({0.01, -0.02, 0.005}, {0.12, -0.05, 0.08});
  const Tensor source = detail::uniform_tensor({3, H, W}, rng, 0.0, 1.0);
  const Tensor target = detail::uniform_tensor({3, H, W}, rng, 0.0, 1.0);
  const Tensor depth = detail::uniform_tensor({H, W}, rng, 3.0, 8.0);
  run("warp", [&](const std::vector<Tensor>& in) { return probe_loss(warp(in[0], in[1], pose, cam).image); },
      {source, depth}, opt.warp_tolerance);

  const Tensor warped = detail::uniform_tensor({3, H, W}, rng, 0.0, 1.0);
  const Tensor mask = reproject(depth, pose, cam).mask;
  run("photometric_loss",
      [&](const std::vector<Tensor>& in) { return photometric_loss(in[0], std::vector<Tensor>{in[1], in[2]}, {mask, mask}); },
      {target, warped, source}, opt.tolerance);
  run("smoothness_loss", [&](const std::vector<Tensor>& in) { return smoothness_loss(in[0], target); }, {depth},
      opt.tolerance);
  return out;
}

}  // namespace monoformer
