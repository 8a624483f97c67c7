#pragma once

#include <memory>
#include <vector>

#include "tumorseg/nn/config.hpp"
#include "tumorseg/nn/layers.hpp"

namespace tumorseg::nn {

template <class T>
struct NetOutput {
  Var<T> seg_logits;                  // (N, 3, X, Y, Z)
  Var<T> slice_logits;                // (N, 3, Z)
  std::vector<Var<T>> branch_logits;  // deep-supervision branches; holds seg_logits otherwise
  Var<T> classifier_features;         // map consumed by the classification head
};

// Common interface of the two segmentation architectures.
template <class T>
class SegmentationNet : public Module<T> {
 public:
  explicit SegmentationNet(NetworkConfig cfg)
      : cfg_(std::move(cfg)), dropout_rng_(std::make_shared<Rng>(0)) {
    cfg_.validate();
  }

  virtual NetOutput<T> forward(const Var<T>& image) = 0;

  const NetworkConfig& config() const { return cfg_; }
  void reseed_dropout(std::uint64_t seed) { *dropout_rng_ = Rng(seed); }

 protected:
  void check_input(const Var<T>& image) const {
    const auto d = dims5(image.shape());
    const std::int64_t m = cfg_.size_multiple();
    if (d.c != cfg_.in_channels)
      throw ShapeError("expected " + std::to_string(cfg_.in_channels) + " input channels, got " +
                       shape_str(image.shape()));
    if (d.x % m || d.y % m || d.z % m)
      throw ShapeError("spatial extents " + shape_str(image.shape()) + " not divisible by " +
                       std::to_string(m));
  }

  NetworkConfig cfg_;
  std::shared_ptr<Rng> dropout_rng_;
};

// Slice-wise classification branch: conv block, in-plane global average
// pooling, optional axial transpose-conv restoration, BiLSTM stack and a
// pointwise classifier producing (N, 3, Z) logits.
template <class T>
class ClassifierHead : public Module<T> {
 public:
  enum class Norm { group, batch };

  ClassifierHead(std::int64_t in, const NetworkConfig& cfg, Norm norm, bool restore_axial,
                 std::shared_ptr<Rng> dropout_rng, Rng& rng)
      : restore_axial_(restore_axial) {
    const std::int64_t ch = cfg.classifier_channels;
    conv_ = this->add_module("conv", std::make_shared<Conv3d<T>>(in, ch, 3, 1, 1, rng));
    if (norm == Norm::group)
      gn_ = this->add_module("norm", std::make_shared<GroupNorm<T>>(ch, cfg.norm_groups));
    else
      bn_ = this->add_module("norm", std::make_shared<BatchNorm<T>>(ch));
    if (restore_axial_) {
      tconv_ = this->add_module("tconv", std::make_shared<ConvTranspose1d<T>>(ch, ch, rng));
      tconv_norm_ = this->add_module("tconv_norm", std::make_shared<GroupNorm<T>>(ch, cfg.norm_groups));
    }
    lstm_ = this->add_module("lstm", std::make_shared<BiLstm<T>>(ch, cfg.lstm_hidden, cfg.lstm_layers,
                                                                 cfg.dropout_rate, dropout_rng, rng));
    fc_ = this->add_module("fc", std::make_shared<Pointwise<T>>(lstm_->output_channels(), cfg.num_regions, rng));
  }

  Var<T> operator()(const Var<T>& features) const {
    const auto d = dims5(features.shape());
    if (d.z < 2)
      throw ShapeError("classifier: axial extent " + std::to_string(d.z) +
                       " smaller than the minimum of 2 slices");
    Var<T> h = (*conv_)(features);
    h = ops::relu(gn_ ? (*gn_)(h) : (*bn_)(h));
    h = ops::mean_over_plane(h);
    if (restore_axial_) h = ops::relu((*tconv_norm_)((*tconv_)(h)));
    h = (*lstm_)(h);
    return (*fc_)(h);
  }

  // Shapes of each stage for a given input, for documentation and tests.
  std::vector<Shape> trace(const Var<T>& features) const {
    NoGradGuard guard;
    std::vector<Shape> out;
    Var<T> meta(Tensor<T>::meta(features.shape()));
    Var<T> h = (*conv_)(meta);
    out.push_back(h.shape());
    h = ops::mean_over_plane(h);
    out.push_back(h.shape());
    if (restore_axial_) {
      h = (*tconv_)(h);
      out.push_back(h.shape());
    }
    h = (*lstm_)(h);
    out.push_back(h.shape());
    out.push_back((*fc_)(h).shape());
    return out;
  }

 private:
  bool restore_axial_;
  std::shared_ptr<Conv3d<T>> conv_;
  std::shared_ptr<GroupNorm<T>> gn_;
  std::shared_ptr<BatchNorm<T>> bn_;
  std::shared_ptr<ConvTranspose1d<T>> tconv_;
  std::shared_ptr<GroupNorm<T>> tconv_norm_;
  std::shared_ptr<BiLstm<T>> lstm_;
  std::shared_ptr<Pointwise<T>> fc_;
};

}  // namespace tumorseg::nn
