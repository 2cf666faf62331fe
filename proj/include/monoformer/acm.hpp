#pragma once

// Attention Connection Module. Operates on the N patch tokens of each Z_l
// (special token dropped) as an N x C matrix:
//   position:  A_p = softmax(Q K^T) V     with 1x1-conv (per-token linear) Q, K, V
//   channel:   A_c = softmax(Z Z^T) Z
// Both attentions are N x N over tokens and both outputs are N x C. No
// 1/sqrt(d) scaling is applied inside either softmax.

#include <string>

#include "monoformer/ops.hpp"
#include "monoformer/params.hpp"

namespace monoformer {

enum class ChannelAttentionMode {
  token_gram,   // softmax(Z Z^T) Z, N x N
  channel_gram  // ablation: Z softmax(Z^T Z)^T, C x C as in dual-attention networks
};

struct AcmConfig {
  std::size_t qk_dim = 8;
  ChannelAttentionMode channel_mode = ChannelAttentionMode::token_gram;
};

struct AcmWeights {
  Tensor wq, bq, wk, bk;  // [C, qk], [1, qk]
  Tensor wv, bv;          // [C, C], [1, C]

  static AcmWeights init(std::size_t channels, const AcmConfig& cfg, Initializer& init) {
    const double s = 1.0 / std::sqrt(static_cast<double>(channels));
    return {init.normal({channels, cfg.qk_dim}, s), Initializer::constant({1, cfg.qk_dim}, 0.0),
            init.normal({channels, cfg.qk_dim}, s), Initializer::constant({1, cfg.qk_dim}, 0.0),
            init.normal({channels, channels}, s),   Initializer::constant({1, channels}, 0.0)};
  }

  void collect(ParameterList& out, const std::string& prefix) const {
    append(out, prefix + "wq", wq);
    append(out, prefix + "bq", bq);
    append(out, prefix + "wk", wk);
    append(out, prefix + "bk", bk);
    append(out, prefix + "wv", wv);
    append(out, prefix + "bv", bv);
  }
};

struct AttentionPair {
  Tensor position;      // A_p, N x C
  Tensor channel;       // A_c, N x C
  Tensor position_map;  // softmax(Q K^T), N x N
  Tensor channel_map;   // softmax(Z Z^T), N x N (C x C in the ablation mode)
};

// Drops the special token: [(N+1), C] -> [N, C].
inline Tensor patch_tokens(const Tensor& z) {
  if (z.rank() != 2 || z.dim(0) < 2) throw DimensionError("expected a token sequence with patches, got " + shape_str(z.shape()));
  return slice(z, 0, 1, z.dim(0));
}

inline Tensor position_attention(const Tensor& tokens, const AcmWeights& w, Tensor* map = nullptr) {
  Tensor q = matmul(tokens, w.wq) + w.bq;
  Tensor k = matmul(tokens, w.wk) + w.bk;
  Tensor v = matmul(tokens, w.wv) + w.bv;
  Tensor a = softmax(matmul(q, transpose(k)), 1);
  if (map) *map = a;
  return matmul(a, v);
}

inline Tensor channel_attention(const Tensor& tokens, Tensor* map = nullptr,
                                ChannelAttentionMode mode = ChannelAttentionMode::token_gram) {
  if (mode == ChannelAttentionMode::channel_gram) {
    Tensor a = softmax(matmul(transpose(tokens), tokens), 1);
    if (map) *map = a;
    return matmul(tokens, transpose(a));
  }
  Tensor a = softmax(matmul(tokens, transpose(tokens)), 1);
  if (map) *map = a;
  return matmul(a, tokens);
}

inline AttentionPair attend(const Tensor& tokens, const AcmWeights& w, const AcmConfig& cfg) {
  AttentionPair p;
  p.position = position_attention(tokens, w, &p.position_map);
  p.channel = channel_attention(tokens, &p.channel_map, cfg.channel_mode);
  return p;
}

}  // namespace monoformer
