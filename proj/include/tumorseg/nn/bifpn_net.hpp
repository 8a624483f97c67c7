#pragma once

#include "tumorseg/nn/network.hpp"

namespace tumorseg::nn {

// Feature maps at strides 2, 4, 8, 16 ... relative to the input, finest first.
template <class T>
using FeaturePyramid = std::vector<Var<T>>;

// Residual downsampling unit:
//   (conv3 s2, GN, dropout, ReLU, conv3 s1, GN, dropout, ReLU) + conv3 s2 shortcut.
template <class T>
class EncoderBlock : public Module<T> {
 public:
  EncoderBlock(std::int64_t in, std::int64_t out, const NetworkConfig& cfg, std::shared_ptr<Rng> dropout_rng,
               Rng& rng)
      : dropout_(cfg.dropout_rate), dropout_rng_(std::move(dropout_rng)) {
    conv_a_ = this->add_module("conv_a", std::make_shared<Conv3d<T>>(in, out, 3, 2, 1, rng));
    norm_a_ = this->add_module("norm_a", std::make_shared<GroupNorm<T>>(out, cfg.norm_groups));
    conv_b_ = this->add_module("conv_b", std::make_shared<Conv3d<T>>(out, out, 3, 1, 1, rng));
    norm_b_ = this->add_module("norm_b", std::make_shared<GroupNorm<T>>(out, cfg.norm_groups));
    shortcut_ = this->add_module("shortcut", std::make_shared<Conv3d<T>>(in, out, 3, 2, 1, rng));
  }

  Var<T> operator()(const Var<T>& x) const {
    const bool train = this->training();
    Var<T> h = (*norm_a_)((*conv_a_)(x));
    h = ops::relu(ops::dropout(h, dropout_, train, *dropout_rng_));
    h = (*norm_b_)((*conv_b_)(h));
    h = ops::relu(ops::dropout(h, dropout_, train, *dropout_rng_));
    return ops::add(h, (*shortcut_)(x));
  }

 private:
  double dropout_;
  std::shared_ptr<Rng> dropout_rng_;
  std::shared_ptr<Conv3d<T>> conv_a_, conv_b_, shortcut_;
  std::shared_ptr<GroupNorm<T>> norm_a_, norm_b_;
};

template <class T>
class Encoder : public Module<T> {
 public:
  Encoder(const NetworkConfig& cfg, std::shared_ptr<Rng> dropout_rng, Rng& rng) {
    std::int64_t in = cfg.in_channels;
    for (std::size_t i = 0; i < cfg.encoder_channels.size(); ++i) {
      blocks_.push_back(this->add_module("block" + std::to_string(i + 1),
                                         std::make_shared<EncoderBlock<T>>(in, cfg.encoder_channels[i], cfg,
                                                                           dropout_rng, rng)));
      in = cfg.encoder_channels[i];
    }
  }

  FeaturePyramid<T> operator()(Var<T> x) const {
    FeaturePyramid<T> levels;
    for (const auto& b : blocks_) {
      x = (*b)(x);
      levels.push_back(x);
    }
    return levels;
  }

 private:
  std::vector<std::shared_ptr<EncoderBlock<T>>> blocks_;
};

// One bidirectional pyramid layer: a top-down pass producing intermediate
// nodes, then a bottom-up pass producing outputs. Each node fuses its inputs
// with fast normalized fusion and applies conv3 -> GN -> ReLU.
template <class T>
class BiFpnLayer : public Module<T> {
 public:
  BiFpnLayer(std::size_t levels, std::int64_t channels, std::int64_t groups, Rng& rng) : levels_(levels) {
    for (std::size_t i = 0; i + 1 < levels; ++i) {
      td_conv_.push_back(this->add_module("td" + std::to_string(i),
                                          std::make_shared<ConvGnRelu<T>>(channels, channels, groups, rng)));
      td_w_.push_back(this->add_parameter("td" + std::to_string(i) + "_w", Tensor<T>({2}, T{1})));
    }
    for (std::size_t i = 1; i < levels; ++i) {
      const std::int64_t inputs = i + 1 < levels ? 3 : 2;
      bu_conv_.push_back(this->add_module("bu" + std::to_string(i),
                                          std::make_shared<ConvGnRelu<T>>(channels, channels, groups, rng)));
      bu_w_.push_back(this->add_parameter("bu" + std::to_string(i) + "_w", Tensor<T>({inputs}, T{1})));
    }
  }

  FeaturePyramid<T> operator()(const FeaturePyramid<T>& in) const {
    const std::size_t L = levels_;
    if (in.size() != L) throw ShapeError("BiFPN layer: wrong number of levels");
    // Top-down: td[L-1] = in[L-1]; td[i] = node(in[i], up(td[i+1])).
    FeaturePyramid<T> td(L);
    td[L - 1] = in[L - 1];
    for (std::size_t i = L - 1; i-- > 0;) {
      auto fused = ops::weighted_fusion<T>({in[i], ops::upsample2x(td[i + 1])}, td_w_[i]);
      td[i] = (*td_conv_[i])(fused);
    }
    // Bottom-up: out[0] = td[0]; out[i] = node(in[i], td[i], down(out[i-1])), top omits td.
    FeaturePyramid<T> out(L);
    out[0] = td[0];
    for (std::size_t i = 1; i < L; ++i) {
      std::vector<Var<T>> parts{in[i]};
      if (i + 1 < L) parts.push_back(td[i]);
      parts.push_back(ops::max_pool2(out[i - 1]));
      out[i] = (*bu_conv_[i - 1])(ops::weighted_fusion<T>(parts, bu_w_[i - 1]));
    }
    return out;
  }

 private:
  std::size_t levels_;
  std::vector<std::shared_ptr<ConvGnRelu<T>>> td_conv_, bu_conv_;
  std::vector<Var<T>> td_w_, bu_w_;
};

// Lateral 1x1x1 projections to a common width followed by stacked BiFPN layers.
template <class T>
class BiFpn : public Module<T> {
 public:
  BiFpn(const NetworkConfig& cfg, Rng& rng) {
    const std::size_t L = cfg.encoder_channels.size();
    for (std::size_t i = 0; i < L; ++i)
      lateral_.push_back(this->add_module(
          "lateral" + std::to_string(i),
          std::make_shared<Pointwise<T>>(cfg.encoder_channels[i], cfg.pyramid_channels, rng)));
    for (int l = 0; l < cfg.bifpn_layers; ++l)
      layers_.push_back(this->add_module("layer" + std::to_string(l),
                                         std::make_shared<BiFpnLayer<T>>(L, cfg.pyramid_channels, cfg.norm_groups, rng)));
  }

  FeaturePyramid<T> operator()(const FeaturePyramid<T>& encoder_levels) const {
    if (encoder_levels.size() != lateral_.size()) throw ShapeError("BiFPN: wrong number of levels");
    FeaturePyramid<T> p;
    for (std::size_t i = 0; i < lateral_.size(); ++i) p.push_back((*lateral_[i])(encoder_levels[i]));
    for (const auto& layer : layers_) p = (*layer)(p);
    return p;
  }

 private:
  std::vector<std::shared_ptr<Pointwise<T>>> lateral_;
  std::vector<std::shared_ptr<BiFpnLayer<T>>> layers_;
};

// Semantic branch in the Panoptic-FPN style: level i (stride 2^(i+1)) goes
// through i upsample blocks (conv3, GN, ReLU, 2x trilinear) to reach half
// the input resolution; the finest level gets one conv block without
// upsampling. The maps are concatenated, projected to 3 logits by a
// 1x1x1 convolution and upsampled 2x to full resolution.
template <class T>
class Decoder : public Module<T> {
 public:
  struct Output {
    Var<T> logits;
    Var<T> concatenated;
  };

  Decoder(const NetworkConfig& cfg, Rng& rng) {
    const std::size_t L = cfg.encoder_channels.size();
    const std::int64_t c = cfg.pyramid_channels;
    for (std::size_t i = 0; i < L; ++i) {
      std::vector<std::shared_ptr<ConvGnRelu<T>>> blocks;
      const std::size_t count = std::max<std::size_t>(i, 1);
      for (std::size_t b = 0; b < count; ++b)
        blocks.push_back(this->add_module("level" + std::to_string(i) + "_block" + std::to_string(b),
                                          std::make_shared<ConvGnRelu<T>>(c, c, cfg.norm_groups, rng)));
      blocks_.push_back(std::move(blocks));
    }
    head_ = this->add_module("head", std::make_shared<Pointwise<T>>(c * static_cast<std::int64_t>(L),
                                                                     cfg.num_regions, rng));
  }

  Output operator()(const FeaturePyramid<T>& p) const {
    std::vector<Var<T>> maps;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      Var<T> h = p.at(i);
      for (const auto& b : blocks_[i]) {
        h = (*b)(h);
        if (i > 0) h = ops::upsample2x(h);
      }
      maps.push_back(h);
    }
    Var<T> cat = ops::concat_channels(maps);
    return {ops::upsample2x((*head_)(cat)), cat};
  }

 private:
  std::vector<std::vector<std::shared_ptr<ConvGnRelu<T>>>> blocks_;
  std::shared_ptr<Pointwise<T>> head_;
};

// Encoder -> BiFPN -> decoder, with the classification branch reading the
// decoder's concatenated half-resolution map.
template <class T>
class BiFpnNet : public SegmentationNet<T> {
 public:
  explicit BiFpnNet(const NetworkConfig& cfg, std::uint64_t seed = 0) : SegmentationNet<T>(cfg) {
    if (cfg.architecture != Architecture::bifpn) throw ConfigError("network.architecture: expected bifpn");
    Rng rng(seed);
    encoder_ = this->add_module("encoder", std::make_shared<Encoder<T>>(this->cfg_, this->dropout_rng_, rng));
    bifpn_ = this->add_module("bifpn", std::make_shared<BiFpn<T>>(this->cfg_, rng));
    decoder_ = this->add_module("decoder", std::make_shared<Decoder<T>>(this->cfg_, rng));
    const std::int64_t cat = this->cfg_.pyramid_channels * static_cast<std::int64_t>(cfg.encoder_channels.size());
    classifier_ = this->add_module(
        "classifier", std::make_shared<ClassifierHead<T>>(cat, this->cfg_, ClassifierHead<T>::Norm::group,
                                                          /*restore_axial=*/true, this->dropout_rng_, rng));
  }

  NetOutput<T> forward(const Var<T>& image) override {
    this->check_input(image);
    auto levels = (*encoder_)(image);
    auto pyramid = (*bifpn_)(levels);
    auto dec = (*decoder_)(pyramid);
    NetOutput<T> out;
    out.seg_logits = dec.logits;
    out.branch_logits = {dec.logits};
    out.classifier_features = dec.concatenated;
    out.slice_logits = (*classifier_)(dec.concatenated);
    return out;
  }

  FeaturePyramid<T> encode(const Var<T>& image) const { return (*encoder_)(image); }
  FeaturePyramid<T> pyramid(const FeaturePyramid<T>& levels) const { return (*bifpn_)(levels); }
  typename Decoder<T>::Output decode(const FeaturePyramid<T>& p) const { return (*decoder_)(p); }
  const ClassifierHead<T>& classifier() const { return *classifier_; }

 private:
  std::shared_ptr<Encoder<T>> encoder_;
  std::shared_ptr<BiFpn<T>> bifpn_;
  std::shared_ptr<Decoder<T>> decoder_;
  std::shared_ptr<ClassifierHead<T>> classifier_;
};

}  // namespace tumorseg::nn
