#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "textcond/cross_modal.hpp"
#include "textcond/nn/conv.hpp"
#include "textcond/nn/layers.hpp"
#include "textcond/nn/parameter.hpp"
#include "textcond/tensor.hpp"

namespace textcond {

/// Component switches matching the ablation table columns. Feature fusion and
/// attention both consume the condition, so they require text_condition.
struct Switches {
  bool text_condition = true;
  bool kam = true;
  bool feature_fusion = true;
  bool cma = true;

  void validate() const {
    if ((feature_fusion || cma) && !text_condition)
      throw std::invalid_argument("feature_fusion and cma require text_condition");
  }
  bool uses_cross_modal_block() const { return feature_fusion || cma; }
  bool operator==(const Switches&) const = default;
};

inline void to_json(nlohmann::json& j, const Switches& s) {
  j = {{"text_condition", s.text_condition}, {"kam", s.kam}, {"feature_fusion", s.feature_fusion}, {"cma", s.cma}};
}
inline void from_json(const nlohmann::json& j, Switches& s) {
  s.text_condition = j.value("text_condition", s.text_condition);
  s.kam = j.value("kam", s.kam);
  s.feature_fusion = j.value("feature_fusion", s.feature_fusion);
  s.cma = j.value("cma", s.cma);
}

struct NetworkConfig {
  int input_size = 128;
  std::array<int, 4> stage_channels{16, 32, 64, 128};
  std::array<int, 4> stage_blocks{1, 1, 1, 1};
  std::array<int, 3> decoder_channels{64, 32, 32};
  int embed_dim = 16;
  int head_channels = 32;
  int kv_stride = 1;
  Switches switches;

  /// Stem (conv /2 + pool /2) then three /2 encoder stages, undone by three x2 deconvs.
  static constexpr int output_stride() { return 4; }
  int heatmap_size() const { return input_size / output_stride(); }
  int deepest_size() const { return input_size / 32; }

  void validate() const {
    switches.validate();
    if (input_size <= 0 || input_size % 32 != 0)
      throw std::invalid_argument("input_size must be a positive multiple of 32, got " + std::to_string(input_size));
    for (int c : stage_channels)
      if (c <= 0) throw std::invalid_argument("stage_channels must be positive");
    for (int b : stage_blocks)
      if (b <= 0) throw std::invalid_argument("stage_blocks must be positive");
    for (int c : decoder_channels)
      if (c <= 0) throw std::invalid_argument("decoder_channels must be positive");
    if (embed_dim <= 0 || head_channels <= 0 || kv_stride <= 0)
      throw std::invalid_argument("embed_dim, head_channels and kv_stride must be positive");
    const int hw = heatmap_size() * heatmap_size();
    if (switches.text_condition && hw % embed_dim != 0)
      throw DimensionError("embed_dim " + std::to_string(embed_dim) + " must divide the condition grid size " +
                           std::to_string(hw));
    if (heatmap_size() % kv_stride != 0) throw std::invalid_argument("kv_stride must divide the heatmap size");
  }

  static NetworkConfig desk() { return {}; }

  static NetworkConfig large() {
    NetworkConfig c;
    c.input_size = 512;
    c.stage_channels = {64, 128, 256, 512};
    c.stage_blocks = {3, 4, 6, 3};
    c.decoder_channels = {256, 256, 256};
    c.embed_dim = 512;
    c.head_channels = 64;
    c.kv_stride = 8;
    return c;
  }

  bool operator==(const NetworkConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = {{"input_size", c.input_size},       {"stage_channels", c.stage_channels},
       {"stage_blocks", c.stage_blocks},   {"decoder_channels", c.decoder_channels},
       {"embed_dim", c.embed_dim},         {"head_channels", c.head_channels},
       {"kv_stride", c.kv_stride},         {"switches", c.switches}};
}
inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
  c.input_size = j.value("input_size", c.input_size);
  c.stage_channels = j.value("stage_channels", c.stage_channels);
  c.stage_blocks = j.value("stage_blocks", c.stage_blocks);
  c.decoder_channels = j.value("decoder_channels", c.decoder_channels);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.head_channels = j.value("head_channels", c.head_channels);
  c.kv_stride = j.value("kv_stride", c.kv_stride);
  if (j.contains("switches")) c.switches = j.at("switches").get<Switches>();
}

namespace nn {

/// conv3x3-BN-ReLU-conv3x3-BN plus (projected) shortcut, then ReLU.
template <typename T>
class ResidualBlock {
 public:
  struct Cache {
    typename Conv2d<T>::Cache conv1, conv2, proj;
    typename BatchNorm2d<T>::Cache bn1, bn2, bn_proj;
    typename ReLU<T>::Cache relu1, relu_out;
  };

  ResidualBlock() = default;
  ResidualBlock(int in_ch, int out_ch, int stride)
      : conv1_(in_ch, out_ch, 3, stride, 1, false), bn1_(out_ch), conv2_(out_ch, out_ch, 3, 1, 1, false),
        bn2_(out_ch), has_proj_(stride != 1 || in_ch != out_ch) {
    if (has_proj_) {
      proj_ = Conv2d<T>(in_ch, out_ch, 1, stride, 0, false);
      bn_proj_ = BatchNorm2d<T>(out_ch);
    }
  }

  void init(std::mt19937_64& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    if (has_proj_) proj_.init(rng);
  }

  void collect(ParamSet<T>& ps, const std::string& prefix) {
    conv1_.collect(ps, join_name(prefix, "conv1"));
    bn1_.collect(ps, join_name(prefix, "bn1"));
    conv2_.collect(ps, join_name(prefix, "conv2"));
    bn2_.collect(ps, join_name(prefix, "bn2"));
    if (has_proj_) {
      proj_.collect(ps, join_name(prefix, "proj"));
      bn_proj_.collect(ps, join_name(prefix, "bn_proj"));
    }
  }

  Tensor<T> forward(const Tensor<T>& x, Cache* c) const {
    Tensor<T> y = conv1_.forward(x, c ? &c->conv1 : nullptr);
    y = bn1_.forward(y, c ? &c->bn1 : nullptr);
    y = ReLU<T>::forward(std::move(y), c ? &c->relu1 : nullptr);
    y = conv2_.forward(y, c ? &c->conv2 : nullptr);
    y = bn2_.forward(y, c ? &c->bn2 : nullptr);
    if (has_proj_) {
      y += bn_proj_.forward(proj_.forward(x, c ? &c->proj : nullptr), c ? &c->bn_proj : nullptr);
    } else {
      y += x;
    }
    return ReLU<T>::forward(std::move(y), c ? &c->relu_out : nullptr);
  }

  Tensor<T> backward(const Tensor<T>& dy, Cache& c) {
    Tensor<T> g = ReLU<T>::backward(dy, c.relu_out);
    Tensor<T> d_short = has_proj_ ? proj_.backward(bn_proj_.backward(g, c.bn_proj), c.proj) : g;
    Tensor<T> d = bn2_.backward(g, c.bn2);
    d = conv2_.backward(d, c.conv2);
    d = ReLU<T>::backward(std::move(d), c.relu1);
    d = bn1_.backward(d, c.bn1);
    d = conv1_.backward(d, c.conv1);
    d += d_short;
    return d;
  }

 private:
  Conv2d<T> conv1_;
  BatchNorm2d<T> bn1_;
  Conv2d<T> conv2_;
  BatchNorm2d<T> bn2_;
  bool has_proj_ = false;
  Conv2d<T> proj_;
  BatchNorm2d<T> bn_proj_;
};

/// 3x3 conv + ReLU + 1x1 conv.
template <typename T>
class Head {
 public:
  struct Cache {
    typename Conv2d<T>::Cache conv1, conv2;
    typename ReLU<T>::Cache relu;
  };

  Head() = default;
  Head(int in_ch, int mid_ch, int out_ch) : conv1_(in_ch, mid_ch, 3, 1, 1), conv2_(mid_ch, out_ch, 1, 1, 0) {}

  void init(std::mt19937_64& rng, double final_bias) {
    conv1_.init(rng);
    init_normal(conv2_.weight().value, 0.01, rng);
    conv2_.bias().value.fill(static_cast<T>(final_bias));
  }

  void collect(ParamSet<T>& ps, const std::string& prefix) {
    conv1_.collect(ps, join_name(prefix, "conv1"));
    conv2_.collect(ps, join_name(prefix, "conv2"));
  }

  Tensor<T> forward(const Tensor<T>& x, Cache* c) const {
    Tensor<T> y = conv1_.forward(x, c ? &c->conv1 : nullptr);
    y = ReLU<T>::forward(std::move(y), c ? &c->relu : nullptr);
    return conv2_.forward(y, c ? &c->conv2 : nullptr);
  }

  Tensor<T> backward(const Tensor<T>& dy, Cache& c) {
    Tensor<T> d = conv2_.backward(dy, c.conv2);
    d = ReLU<T>::backward(std::move(d), c.relu);
    return conv1_.backward(d, c.conv1);
  }

 private:
  Conv2d<T> conv1_, conv2_;
};

}  // namespace nn

/// Intermediate features of one forward pass.
template <typename T>
struct FeaturePack {
  std::array<Tensor<T>, 4> encoder;  // M^e_1..M^e_4
  std::array<Tensor<T>, 3> decoder;  // M^d_1..M^d_3
  Tensor<T> encoder_fused;           // O_et
  Tensor<T> decoder_fused;           // O_dt
  Tensor<T> embedding;               // m_e4, N x D x 1 x 1 (empty without KAM)
};

template <typename T>
struct NetworkOutput {
  Tensor<T> heatmap;    // N x 1 x H x W, probabilities
  Tensor<T> offsets;    // N x 2 x H x W, fractional cell offsets (x, y)
  Tensor<T> embedding;  // N x D x 1 x 1, empty without KAM
};

/// Residual encoder / deconvolution decoder regressor with condition fusion:
///
///   stem -> stage1 = M^e_1 -> CMA(M^e_1, V_t) -> stages 2..4 = M^e_4 -> align tap
///        -> 3 x deconv = M^d_3 -> CMA(M^d_3, V_t) -> [ . | V_t] -> heatmap / offset heads
///
/// The condition map enters the heads directly whenever text_condition is on;
/// the two cross-modal blocks exist only with feature fusion or attention.
template <typename T>
class Network {
 public:
  struct Cache {
    typename nn::Conv2d<T>::Cache stem_conv;
    typename nn::BatchNorm2d<T>::Cache stem_bn;
    typename nn::ReLU<T>::Cache stem_relu;
    typename nn::MaxPool2d<T>::Cache stem_pool;
    std::array<std::vector<typename nn::ResidualBlock<T>::Cache>, 4> stages;
    typename CrossModalBlock<T>::Cache cma_enc, cma_dec;
    typename AlignmentHead<T>::Cache align;
    std::array<typename nn::ConvTranspose2d<T>::Cache, 3> deconv;
    std::array<typename nn::BatchNorm2d<T>::Cache, 3> deconv_bn;
    std::array<typename nn::ReLU<T>::Cache, 3> deconv_relu;
    typename nn::Head<T>::Cache heat_head, offset_head;
    typename nn::Sigmoid<T>::Cache sigmoid;
    int decoder_channels = 0;
  };

  struct OutputGrads {
    Tensor<T> heatmap;    // d loss / d probability
    Tensor<T> offsets;
    Tensor<T> embedding;  // may be empty
  };

  explicit Network(NetworkConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto& sc = cfg_.stage_channels;
    stem_conv_ = nn::Conv2d<T>(3, sc[0], 7, 2, 3, false);
    stem_bn_ = nn::BatchNorm2d<T>(sc[0]);
    stem_pool_ = nn::MaxPool2d<T>(3, 2, 1);
    int in = sc[0];
    for (int s = 0; s < 4; ++s) {
      for (int b = 0; b < cfg_.stage_blocks[s]; ++b) {
        const int stride = (s > 0 && b == 0) ? 2 : 1;
        stages_[s].emplace_back(in, sc[s], stride);
        in = sc[s];
      }
    }
    const Switches& sw = cfg_.switches;
    if (sw.uses_cross_modal_block()) {
      cma_enc_ = CrossModalBlock<T>({sc[0], cfg_.kv_stride, sw.feature_fusion, sw.cma});
      cma_dec_ = CrossModalBlock<T>({cfg_.decoder_channels[2], cfg_.kv_stride, sw.feature_fusion, sw.cma});
    }
    if (sw.kam) align_ = AlignmentHead<T>(sc[3], cfg_.embed_dim);
    for (int d = 0; d < 3; ++d) {
      deconv_[d] = nn::ConvTranspose2d<T>(in, cfg_.decoder_channels[d], 4, 2, 1, false);
      deconv_bn_[d] = nn::BatchNorm2d<T>(cfg_.decoder_channels[d]);
      in = cfg_.decoder_channels[d];
    }
    const int head_in = in + (sw.text_condition ? 1 : 0);
    heat_head_ = nn::Head<T>(head_in, cfg_.head_channels, 1);
    offset_head_ = nn::Head<T>(head_in, cfg_.head_channels, 2);

    std::mt19937_64 rng(seed);
    stem_conv_.init(rng);
    for (auto& stage : stages_)
      for (auto& blk : stage) blk.init(rng);
    if (sw.uses_cross_modal_block()) {
      cma_enc_.init(rng);
      cma_dec_.init(rng);
    }
    if (sw.kam) align_.init(rng);
    for (auto& d : deconv_) d.init(rng);
    // initial foreground probability of 0.01
    heat_head_.init(rng, -std::log((1.0 - 0.01) / 0.01));
    offset_head_.init(rng, 0.5);
  }

  const NetworkConfig& config() const { return cfg_; }

  nn::ParamSet<T> parameters() {
    nn::ParamSet<T> ps;
    stem_conv_.collect(ps, "stem.conv");
    stem_bn_.collect(ps, "stem.bn");
    for (int s = 0; s < 4; ++s)
      for (std::size_t b = 0; b < stages_[s].size(); ++b)
        stages_[s][b].collect(ps, "encoder.stage" + std::to_string(s + 1) + "." + std::to_string(b));
    if (cfg_.switches.uses_cross_modal_block()) {
      cma_enc_.collect(ps, "cma_enc");
      cma_dec_.collect(ps, "cma_dec");
    }
    if (cfg_.switches.kam) align_.collect(ps, "align");
    for (int d = 0; d < 3; ++d) {
      deconv_[d].collect(ps, "decoder." + std::to_string(d + 1) + ".deconv");
      deconv_bn_[d].collect(ps, "decoder." + std::to_string(d + 1) + ".bn");
    }
    heat_head_.collect(ps, "head.heatmap");
    offset_head_.collect(ps, "head.offset");
    return ps;
  }

  std::size_t count_parameters() { return parameters().count_trainable(); }

  CrossModalBlock<T>& encoder_block() { return cma_enc_; }
  CrossModalBlock<T>& decoder_block() { return cma_dec_; }

  /// `condition` is N x 1 x H x W at heatmap resolution; ignored (may be
  /// empty) when text_condition is off. A non-null cache selects training mode.
  NetworkOutput<T> forward(const Tensor<T>& images, const Tensor<T>& condition, Cache* c,
                           FeaturePack<T>* pack = nullptr) const {
    if (images.c() != 3 || images.h() != cfg_.input_size || images.w() != cfg_.input_size)
      throw ShapeError("Network: expected N x 3 x " + std::to_string(cfg_.input_size) + " x " +
                       std::to_string(cfg_.input_size) + " images, got " + images.shape_string());
    const Switches& sw = cfg_.switches;
    const int hs = cfg_.heatmap_size();
    if (sw.text_condition &&
        (condition.n() != images.n() || condition.c() != 1 || condition.h() != hs || condition.w() != hs))
      throw ShapeError("Network: condition map " + condition.shape_string() + " does not match heatmap grid");

    Tensor<T> x = stem_conv_.forward(images, c ? &c->stem_conv : nullptr);
    x = stem_bn_.forward(x, c ? &c->stem_bn : nullptr);
    x = nn::ReLU<T>::forward(std::move(x), c ? &c->stem_relu : nullptr);
    x = stem_pool_.forward(x, c ? &c->stem_pool : nullptr);

    for (int s = 0; s < 4; ++s) {
      if (c) c->stages[s].resize(stages_[s].size());
      for (std::size_t b = 0; b < stages_[s].size(); ++b)
        x = stages_[s][b].forward(x, c ? &c->stages[s][b] : nullptr);
      if (pack) pack->encoder[s] = x;
      if (s == 0 && sw.uses_cross_modal_block()) {
        x = cma_enc_.forward(x, condition, c ? &c->cma_enc : nullptr);
      }
      if (s == 0 && pack) pack->encoder_fused = x;
    }

    NetworkOutput<T> out;
    if (sw.kam) out.embedding = align_.forward(x, c ? &c->align : nullptr);
    if (pack) pack->embedding = out.embedding;

    for (int d = 0; d < 3; ++d) {
      x = deconv_[d].forward(x, c ? &c->deconv[d] : nullptr);
      x = deconv_bn_[d].forward(x, c ? &c->deconv_bn[d] : nullptr);
      x = nn::ReLU<T>::forward(std::move(x), c ? &c->deconv_relu[d] : nullptr);
      if (pack) pack->decoder[d] = x;
    }
    if (sw.uses_cross_modal_block()) x = cma_dec_.forward(x, condition, c ? &c->cma_dec : nullptr);
    if (pack) pack->decoder_fused = x;
    if (c) c->decoder_channels = x.c();
    if (sw.text_condition) x = concat_channels(x, condition);

    out.heatmap = nn::Sigmoid<T>::forward(heat_head_.forward(x, c ? &c->heat_head : nullptr), c ? &c->sigmoid : nullptr);
    out.offsets = offset_head_.forward(x, c ? &c->offset_head : nullptr);
    return out;
  }

  /// Accumulates parameter gradients; BN running statistics update here.
  void backward(const OutputGrads& g, Cache& c) {
    const Switches& sw = cfg_.switches;
    Tensor<T> d = heat_head_.backward(nn::Sigmoid<T>::backward(g.heatmap, c.sigmoid), c.heat_head);
    d += offset_head_.backward(g.offsets, c.offset_head);
    if (sw.text_condition) d = split_channels(d, c.decoder_channels).first;
    if (sw.uses_cross_modal_block()) d = cma_dec_.backward(d, c.cma_dec).feature;
    for (int k = 2; k >= 0; --k) {
      d = nn::ReLU<T>::backward(std::move(d), c.deconv_relu[k]);
      d = deconv_bn_[k].backward(d, c.deconv_bn[k]);
      d = deconv_[k].backward(d, c.deconv[k]);
    }
    if (sw.kam && !g.embedding.empty()) d += align_.backward(g.embedding, c.align);
    for (int s = 3; s >= 0; --s) {
      if (s == 0 && sw.uses_cross_modal_block()) d = cma_enc_.backward(d, c.cma_enc).feature;
      for (int b = static_cast<int>(stages_[s].size()) - 1; b >= 0; --b) d = stages_[s][b].backward(d, c.stages[s][b]);
    }
    d = stem_pool_.backward(d, c.stem_pool);
    d = nn::ReLU<T>::backward(std::move(d), c.stem_relu);
    d = stem_bn_.backward(d, c.stem_bn);
    stem_conv_.backward(d, c.stem_conv);
  }

 private:
  NetworkConfig cfg_;
  nn::Conv2d<T> stem_conv_;
  nn::BatchNorm2d<T> stem_bn_;
  nn::MaxPool2d<T> stem_pool_;
  std::array<std::vector<nn::ResidualBlock<T>>, 4> stages_;
  CrossModalBlock<T> cma_enc_, cma_dec_;
  AlignmentHead<T> align_;
  std::array<nn::ConvTranspose2d<T>, 3> deconv_;
  std::array<nn::BatchNorm2d<T>, 3> deconv_bn_;
  nn::Head<T> heat_head_, offset_head_;
};

}  // namespace textcond
