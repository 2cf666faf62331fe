#pragma once

#include <map>
#include <string>

#include "monoformer/acm.hpp"
#include "monoformer/backbone.hpp"
#include "monoformer/ffd.hpp"
#include "monoformer/serialize.hpp"
#include "monoformer/transformer.hpp"

namespace monoformer {

struct ModelConfig {
  std::size_t height = 64, width = 64;
  BackboneConfig backbone;
  TransformerConfig transformer;
  AcmConfig acm;
  FfdConfig ffd;

  void validate() const {
    backbone.validate(height, width);
    transformer.validate(backbone.embed_dim);
    if (acm.qk_dim == 0) throw ConfigError("acm: qk_dim must be positive");
    ffd.validate();
  }
  std::size_t grid_h() const { return height / backbone.total_stride(); }
  std::size_t grid_w() const { return width / backbone.total_stride(); }
};

// Intermediate results of one forward pass, for probing and export.
struct ModelTrace {
  FeatureMap stem;
  EncoderOutputs encoder;
  std::vector<AttentionPair> acm;
  DecodeTrace decoder;
};

class MonoFormer {
 public:
  MonoFormer(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Initializer init(seed);
    backbone_ = BackboneWeights::init(cfg_.backbone, cfg_.height, cfg_.width, init);
    for (std::size_t l = 0; l < cfg_.transformer.layers; ++l) layers_.push_back(LayerWeights::init(cfg_.transformer, init));
    for (std::size_t l = 0; l < cfg_.transformer.layers; ++l)
      acm_.push_back(AcmWeights::init(cfg_.backbone.embed_dim, cfg_.acm, init));
    ffd_ = FfdWeights::init(cfg_.backbone.embed_dim, cfg_.transformer.layers, cfg_.backbone.total_stride(), cfg_.ffd,
                            init);
  }

  const ModelConfig& config() const { return cfg_; }

  ParameterList parameters() const {
    ParameterList out;
    backbone_.collect(out);
    for (std::size_t l = 0; l < layers_.size(); ++l) layers_[l].collect(out, "transformer.layer" + std::to_string(l + 1) + ".");
    for (std::size_t l = 0; l < acm_.size(); ++l) acm_[l].collect(out, "acm.layer" + std::to_string(l + 1) + ".");
    ffd_.collect(out);
    return out;
  }

  // image: [3, H, W] in [0, 1]; returns depth [H, W].
  Tensor forward(const Tensor& image, ModelTrace* trace = nullptr) const {
    if (image.rank() != 3 || image.dim(1) != cfg_.height || image.dim(2) != cfg_.width)
      throw DimensionError("model expects [3," + std::to_string(cfg_.height) + "," + std::to_string(cfg_.width) +
                           "] input, got " + shape_str(image.shape()));
    FeatureMap stem;
    const Tensor x = (image - 0.5) * 4.0;
    TokenSequence z0 = embed(x, backbone_, cfg_.backbone, &stem);
    EncoderOutputs enc = encode(z0, layers_, cfg_.transformer, trace != nullptr);
    std::vector<Tensor> tokens;
    std::vector<AttentionPair> pairs;
    for (std::size_t l = 0; l < enc.layers.size(); ++l) {
      tokens.push_back(patch_tokens(enc.layers[l].tokens));
      pairs.push_back(attend(tokens.back(), acm_[l], cfg_.acm));
    }
    Tensor depth = decode(tokens, pairs, cfg_.grid_h(), cfg_.grid_w(), ffd_, cfg_.ffd, trace ? &trace->decoder : nullptr);
    if (trace) {
      trace->stem = stem;
      trace->encoder = std::move(enc);
      trace->acm = std::move(pairs);
    }
    return depth;
  }

  // Encoder feature taps used by the bias probe.
  Tensor stem_features(const Tensor& image) const {
    NoGradGuard ng;
    return embed_stem((image - 0.5) * 4.0).features;
  }
  Tensor transformer_features(const Tensor& image) const {
    NoGradGuard ng;
    TokenSequence z0 = embed((image - 0.5) * 4.0, backbone_, cfg_.backbone);
    EncoderOutputs enc = encode(z0, layers_, cfg_.transformer);
    return patch_tokens(enc.layers.back().tokens);
  }

  NamedTensors state() const {
    NamedTensors out;
    for (const auto& p : parameters()) out.emplace_back(p.name, p.tensor.detach());
    return out;
  }

  void load_state(const NamedTensors& state) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : state) by_name[name] = &t;
    for (auto& p : parameters()) {
      auto it = by_name.find(p.name);
      if (it == by_name.end()) throw FormatError("checkpoint missing tensor '" + p.name + "'");
      if (it->second->shape() != p.tensor.shape())
        throw FormatError("checkpoint tensor '" + p.name + "' has shape " + shape_str(it->second->shape()) +
                          ", model expects " + shape_str(p.tensor.shape()));
      Tensor dst = p.tensor;
      std::copy(it->second->values().begin(), it->second->values().end(), dst.data().begin());
    }
    if (by_name.size() != parameters().size()) throw FormatError("checkpoint has tensors the model does not define");
  }

  BackboneWeights& backbone() { return backbone_; }
  std::vector<LayerWeights>& layers() { return layers_; }
  std::vector<AcmWeights>& acm() { return acm_; }
  FfdWeights& ffd() { return ffd_; }

 private:
  FeatureMap embed_stem(const Tensor& x) const { return stem_forward(x, backbone_, cfg_.backbone); }

  ModelConfig cfg_;
  BackboneWeights backbone_;
  std::vector<LayerWeights> layers_;
  std::vector<AcmWeights> acm_;
  FfdWeights ffd_;
};

}  // namespace monoformer
