#pragma once

// Transformer encoder layers:
//   SA^m   = softmax(Q^m K^m^T / sqrt(d)) V^m,    Q^m = Z W_Q^m, ...
//   MSA    = Z + concat(SA^1..SA^M) W
//   Z_next = MLP(LN(MSA)) + MSA
// With `pre_ln_attention` the attention branch also sees LN(Z).

#include <cmath>
#include <string>

#include "monoformer/backbone.hpp"
#include "monoformer/ops.hpp"
#include "monoformer/params.hpp"

namespace monoformer {

struct TransformerConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t head_dim = 8;
  std::size_t mlp_ratio = 2;
  bool pre_ln_attention = false;
  bool qkv_bias = false;
  double ln_eps = 1e-5;

  std::size_t embed_dim() const { return heads * head_dim; }

  void validate(std::size_t embed) const {
    if (layers < 1) throw ConfigError("transformer: at least one layer required");
    if (heads < 1 || head_dim < 1 || mlp_ratio < 1) throw ConfigError("transformer: heads, head_dim, mlp_ratio must be positive");
    if (embed != heads * head_dim)
      throw ConfigError("embed dim " + std::to_string(embed) + " must equal heads*head_dim = " +
                        std::to_string(heads * head_dim));
  }
};

struct HeadWeights {
  Tensor wq, wk, wv;  // [C_e, d]
  Tensor bq, bk, bv;  // [1, d] when qkv_bias
};

struct LayerWeights {
  std::vector<HeadWeights> heads;
  Tensor proj;                  // W: [M*d, C_e]
  Tensor ln_gain, ln_bias;      // LN before the MLP
  Tensor ln_attn_gain, ln_attn_bias;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;

  static LayerWeights init(const TransformerConfig& cfg, Initializer& init) {
    const std::size_t c = cfg.embed_dim(), d = cfg.head_dim, hidden = cfg.mlp_ratio * c;
    LayerWeights w;
    for (std::size_t m = 0; m < cfg.heads; ++m) {
      HeadWeights h{init.normal({c, d}, 0.02), init.normal({c, d}, 0.02), init.normal({c, d}, 0.02), {}, {}, {}};
      if (cfg.qkv_bias) {
        h.bq = Initializer::constant({1, d}, 0.0);
        h.bk = Initializer::constant({1, d}, 0.0);
        h.bv = Initializer::constant({1, d}, 0.0);
      }
      w.heads.push_back(h);
    }
    w.proj = init.normal({cfg.heads * d, c}, 0.02);
    w.ln_gain = Initializer::constant({c}, 1.0);
    w.ln_bias = Initializer::constant({c}, 0.0);
    if (cfg.pre_ln_attention) {
      w.ln_attn_gain = Initializer::constant({c}, 1.0);
      w.ln_attn_bias = Initializer::constant({c}, 0.0);
    }
    w.mlp_w1 = init.normal({c, hidden}, 0.02);
    w.mlp_b1 = Initializer::constant({1, hidden}, 0.0);
    w.mlp_w2 = init.normal({hidden, c}, 0.02);
    w.mlp_b2 = Initializer::constant({1, c}, 0.0);
    return w;
  }

  void collect(ParameterList& out, const std::string& prefix) const {
    for (std::size_t m = 0; m < heads.size(); ++m) {
      const std::string p = prefix + "head" + std::to_string(m) + ".";
      append(out, p + "wq", heads[m].wq);
      append(out, p + "wk", heads[m].wk);
      append(out, p + "wv", heads[m].wv);
      append(out, p + "bq", heads[m].bq);
      append(out, p + "bk", heads[m].bk);
      append(out, p + "bv", heads[m].bv);
    }
    append(out, prefix + "proj", proj);
    append(out, prefix + "ln.gain", ln_gain);
    append(out, prefix + "ln.bias", ln_bias);
    append(out, prefix + "ln_attn.gain", ln_attn_gain);
    append(out, prefix + "ln_attn.bias", ln_attn_bias);
    append(out, prefix + "mlp.w1", mlp_w1);
    append(out, prefix + "mlp.b1", mlp_b1);
    append(out, prefix + "mlp.w2", mlp_w2);
    append(out, prefix + "mlp.b2", mlp_b2);
  }
};

struct AttentionResult {
  Tensor output;     // [(N+1), d]
  Tensor attention;  // [(N+1), (N+1)], rows sum to one
};

inline Tensor affine_rows(const Tensor& z, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(z, w);
  return b.defined() ? y + b : y;
}

inline AttentionResult self_attention(const Tensor& z, const HeadWeights& h) {
  Tensor q = affine_rows(z, h.wq, h.bq);
  Tensor k = affine_rows(z, h.wk, h.bk);
  Tensor v = affine_rows(z, h.wv, h.bv);
  const double scale = 1.0 / std::sqrt(static_cast<double>(h.wq.dim(1)));
  Tensor a = softmax(matmul(q, transpose(k)) * scale, 1);
  return {matmul(a, v), a};
}

inline Tensor layer_forward(const Tensor& z, const LayerWeights& w, const TransformerConfig& cfg,
                            std::vector<Tensor>* attention_maps = nullptr) {
  const Tensor attn_in = cfg.pre_ln_attention ? layer_norm(z, w.ln_attn_gain, w.ln_attn_bias, cfg.ln_eps) : z;
  std::vector<Tensor> heads;
  heads.reserve(w.heads.size());
  for (const auto& h : w.heads) {
    AttentionResult r = self_attention(attn_in, h);
    if (attention_maps) attention_maps->push_back(r.attention.detach());
    heads.push_back(r.output);
  }
  Tensor msa = z + matmul(concat(heads, 1), w.proj);
  Tensor hidden = gelu(affine_rows(layer_norm(msa, w.ln_gain, w.ln_bias, cfg.ln_eps), w.mlp_w1, w.mlp_b1));
  return affine_rows(hidden, w.mlp_w2, w.mlp_b2) + msa;
}

struct EncoderOutputs {
  std::vector<TokenSequence> layers;                 // Z_1..Z_L
  std::vector<std::vector<Tensor>> attention;        // [layer][head]
};

inline EncoderOutputs encode(const TokenSequence& z0, const std::vector<LayerWeights>& weights,
                             const TransformerConfig& cfg, bool keep_attention = false) {
  EncoderOutputs out;
  TokenSequence cur = z0;
  for (const auto& w : weights) {
    std::vector<Tensor> maps;
    cur.tokens = layer_forward(cur.tokens, w, cfg, keep_attention ? &maps : nullptr);
    out.layers.push_back(cur);
    if (keep_attention) out.attention.push_back(std::move(maps));
  }
  return out;
}

}  // namespace monoformer
