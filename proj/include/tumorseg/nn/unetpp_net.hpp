#pragma once

#include "tumorseg/nn/network.hpp"

namespace tumorseg::nn {

// (conv3, GN, ReLU) x 2; the first convolution may be strided.
template <class T>
class DoubleConv : public Module<T> {
 public:
  DoubleConv(std::int64_t in, std::int64_t out, std::int64_t groups, std::int64_t stride, Rng& rng) {
    a_ = this->add_module("a", std::make_shared<ConvGnRelu<T>>(in, out, groups, rng, stride));
    b_ = this->add_module("b", std::make_shared<ConvGnRelu<T>>(out, out, groups, rng));
  }
  Var<T> operator()(const Var<T>& x) const { return (*b_)((*a_)(x)); }

 private:
  std::shared_ptr<ConvGnRelu<T>> a_, b_;
};

// Deep-supervision output head: ReLU -> conv3 -> conv3 -> resize to input size.
template <class T>
class SupervisionHead : public Module<T> {
 public:
  SupervisionHead(std::int64_t in, std::int64_t regions, Rng& rng) {
    a_ = this->add_module("conv_a", std::make_shared<Conv3d<T>>(in, in, 3, 1, 1, rng));
    b_ = this->add_module("conv_b", std::make_shared<Conv3d<T>>(in, regions, 3, 1, 1, rng));
  }
  Var<T> operator()(const Var<T>& x, const Shape& image_shape) const {
    Var<T> h = (*b_)((*a_)(ops::relu(x)));
    return ops::resize_trilinear(h, image_shape[2], image_shape[3], image_shape[4]);
  }

 private:
  std::shared_ptr<Conv3d<T>> a_, b_;
};

// Nested U-Net. Node X(i, j) sits at depth i (stride 2^i) and column j:
//   X(i, 0) = DoubleConv(X(i-1, 0)) with a stride-2 first conv (i > 0),
//   X(i, j) = DoubleConv(concat(X(i, 0..j-1), up(X(i+1, j-1)))).
// The top-row nodes X(0, 1..D) feed the supervision heads (averaged) and,
// concatenated, the classification branch.
template <class T>
class UNetPlusPlus : public SegmentationNet<T> {
 public:
  explicit UNetPlusPlus(const NetworkConfig& cfg, std::uint64_t seed = 0) : SegmentationNet<T>(cfg) {
    if (cfg.architecture != Architecture::unetpp) throw ConfigError("network.architecture: expected unetpp");
    Rng rng(seed);
    const auto& ch = this->cfg_.unetpp_channels;
    depth_ = ch.size() - 1;
    const std::int64_t g = this->cfg_.norm_groups;
    nodes_.resize(depth_ + 1);
    for (std::size_t i = 0; i <= depth_; ++i) {
      const std::int64_t in = i == 0 ? this->cfg_.in_channels : ch[i - 1];
      nodes_[i].push_back(this->add_module("x" + std::to_string(i) + "_0",
                                           std::make_shared<DoubleConv<T>>(in, ch[i], g, i == 0 ? 1 : 2, rng)));
    }
    for (std::size_t j = 1; j <= depth_; ++j)
      for (std::size_t i = 0; i + j <= depth_; ++i) {
        const std::int64_t in = static_cast<std::int64_t>(j) * ch[i] + ch[i + 1];
        nodes_[i].push_back(this->add_module("x" + std::to_string(i) + "_" + std::to_string(j),
                                             std::make_shared<DoubleConv<T>>(in, ch[i], g, 1, rng)));
      }
    const std::size_t first_head = this->cfg_.deep_supervision ? 1 : depth_;
    for (std::size_t j = first_head; j <= depth_; ++j)
      heads_.push_back(this->add_module("head" + std::to_string(j),
                                        std::make_shared<SupervisionHead<T>>(ch[0], this->cfg_.num_regions, rng)));
    classifier_ = this->add_module(
        "classifier",
        std::make_shared<ClassifierHead<T>>(ch[0] * static_cast<std::int64_t>(depth_), this->cfg_,
                                            ClassifierHead<T>::Norm::batch, /*restore_axial=*/false,
                                            this->dropout_rng_, rng));
  }

  NetOutput<T> forward(const Var<T>& image) override {
    this->check_input(image);
    std::vector<std::vector<Var<T>>> x(depth_ + 1);
    Var<T> h = image;
    for (std::size_t i = 0; i <= depth_; ++i) {
      h = (*nodes_[i][0])(h);
      x[i].push_back(h);
    }
    for (std::size_t j = 1; j <= depth_; ++j)
      for (std::size_t i = 0; i + j <= depth_; ++i) {
        std::vector<Var<T>> parts(x[i].begin(), x[i].begin() + static_cast<std::ptrdiff_t>(j));
        parts.push_back(ops::upsample2x(x[i + 1][j - 1]));
        x[i].push_back((*nodes_[i][j])(ops::concat_channels(parts)));
      }
    NetOutput<T> out;
    const std::size_t first_head = depth_ + 1 - heads_.size();
    for (std::size_t k = 0; k < heads_.size(); ++k)
      out.branch_logits.push_back((*heads_[k])(x[0][first_head + k], image.shape()));
    out.seg_logits = ops::mean_of(out.branch_logits);
    std::vector<Var<T>> top(x[0].begin() + 1, x[0].end());
    out.classifier_features = ops::concat_channels(top);
    out.slice_logits = (*classifier_)(out.classifier_features);
    return out;
  }

  const ClassifierHead<T>& classifier() const { return *classifier_; }

 private:
  std::size_t depth_ = 0;
  std::vector<std::vector<std::shared_ptr<DoubleConv<T>>>> nodes_;
  std::vector<std::shared_ptr<SupervisionHead<T>>> heads_;
  std::shared_ptr<ClassifierHead<T>> classifier_;
};

}  // namespace tumorseg::nn
