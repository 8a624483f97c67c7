#pragma once

#include "tumorseg/core/ops.hpp"
#include "tumorseg/core/ops_conv.hpp"
#include "tumorseg/core/ops_lstm.hpp"
#include "tumorseg/core/ops_norm.hpp"
#include "tumorseg/nn/module.hpp"

namespace tumorseg::nn {

// Cubic-kernel 3D convolution, He-normal initialised.
template <class T>
class Conv3d : public Module<T> {
 public:
  Conv3d(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride, std::int64_t pad,
         Rng& rng, bool bias = true)
      : stride_(stride), pad_(pad) {
    const double fan_in = static_cast<double>(in * kernel * kernel * kernel);
    weight_ = this->add_parameter("weight", init::normal<T>({out, in, kernel, kernel, kernel},
                                                           std::sqrt(2.0 / fan_in), rng));
    if (bias) bias_ = this->add_parameter("bias", Tensor<T>({out}));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::conv3d(x, weight_, bias_, stride_, pad_); }

 private:
  std::int64_t stride_, pad_;
  Var<T> weight_, bias_;
};

// Kernel-1 convolution of any spatial rank (1x1x1 conv3d, conv1d with k = 1).
template <class T>
class Pointwise : public Module<T> {
 public:
  Pointwise(std::int64_t in, std::int64_t out, Rng& rng, bool bias = true) {
    weight_ = this->add_parameter("weight", init::normal<T>({out, in}, std::sqrt(1.0 / in), rng));
    if (bias) bias_ = this->add_parameter("bias", Tensor<T>({out}));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::pointwise(x, weight_, bias_); }

 private:
  Var<T> weight_, bias_;
};

// Kernel-3, stride-2 transposed convolution that exactly doubles a sequence length.
template <class T>
class ConvTranspose1d : public Module<T> {
 public:
  ConvTranspose1d(std::int64_t in, std::int64_t out, Rng& rng) {
    weight_ = this->add_parameter("weight", init::normal<T>({in, out, 3}, std::sqrt(2.0 / (in * 3)), rng));
    bias_ = this->add_parameter("bias", Tensor<T>({out}));
  }
  Var<T> operator()(const Var<T>& x) const {
    return ops::conv_transpose1d(x, weight_, bias_, /*stride=*/2, /*pad=*/1, /*output_pad=*/1);
  }

 private:
  Var<T> weight_, bias_;
};

template <class T>
class GroupNorm : public Module<T> {
 public:
  GroupNorm(std::int64_t channels, std::int64_t groups) : groups_(groups) {
    if (groups <= 0 || channels % groups != 0)
      throw ShapeError("GroupNorm: " + std::to_string(groups) + " groups do not divide " +
                       std::to_string(channels) + " channels");
    gamma_ = this->add_parameter("weight", Tensor<T>({channels}, T{1}));
    beta_ = this->add_parameter("bias", Tensor<T>({channels}));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::group_norm(x, gamma_, beta_, groups_); }
  std::int64_t groups() const { return groups_; }

 private:
  std::int64_t groups_;
  Var<T> gamma_, beta_;
};

template <class T>
class BatchNorm : public Module<T> {
 public:
  explicit BatchNorm(std::int64_t channels) {
    gamma_ = this->add_parameter("weight", Tensor<T>({channels}, T{1}));
    beta_ = this->add_parameter("bias", Tensor<T>({channels}));
    mean_ = &this->add_buffer("running_mean", Tensor<T>({channels}));
    var_ = &this->add_buffer("running_var", Tensor<T>({channels}, T{1}));
  }
  Var<T> operator()(const Var<T>& x) const {
    return ops::batch_norm(x, gamma_, beta_, *mean_, *var_, this->training());
  }

 private:
  Var<T> gamma_, beta_;
  Tensor<T>* mean_;
  Tensor<T>* var_;
};

// Stack of bidirectional LSTM layers over (N, C, L); output (N, 2H, L).
// Dropout is applied between layers while training.
template <class T>
class BiLstm : public Module<T> {
 public:
  BiLstm(std::int64_t in, std::int64_t hidden, int layers, double dropout, std::shared_ptr<Rng> dropout_rng,
         Rng& rng)
      : hidden_(hidden), dropout_(dropout), dropout_rng_(std::move(dropout_rng)) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (int l = 0; l < layers; ++l) {
      const std::int64_t cin = l == 0 ? in : 2 * hidden;
      Direction d;
      for (int dir = 0; dir < 2; ++dir) {
        const std::string sfx = "_l" + std::to_string(l) + (dir ? "_reverse" : "");
        d.w_ih[dir] = this->add_parameter("weight_ih" + sfx, init::uniform<T>({4 * hidden, cin}, bound, rng));
        d.w_hh[dir] = this->add_parameter("weight_hh" + sfx, init::uniform<T>({4 * hidden, hidden}, bound, rng));
        d.bias[dir] = this->add_parameter("bias" + sfx, init::uniform<T>({4 * hidden}, bound, rng));
      }
      layers_.push_back(d);
    }
  }

  Var<T> operator()(Var<T> x) const {
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& d = layers_[l];
      auto fwd = ops::lstm_direction(x, d.w_ih[0], d.w_hh[0], d.bias[0], false);
      auto bwd = ops::lstm_direction(x, d.w_ih[1], d.w_hh[1], d.bias[1], true);
      x = ops::concat_channels<T>({fwd, bwd});
      if (l + 1 < layers_.size()) x = ops::dropout(x, dropout_, this->training(), *dropout_rng_);
    }
    return x;
  }
  std::int64_t output_channels() const { return 2 * hidden_; }

 private:
  struct Direction {
    Var<T> w_ih[2], w_hh[2], bias[2];
  };
  std::int64_t hidden_;
  double dropout_;
  std::shared_ptr<Rng> dropout_rng_;
  std::vector<Direction> layers_;
};

// conv3 (stride 1, pad 1) -> GroupNorm -> ReLU.
template <class T>
class ConvGnRelu : public Module<T> {
 public:
  ConvGnRelu(std::int64_t in, std::int64_t out, std::int64_t groups, Rng& rng, std::int64_t stride = 1) {
    conv_ = this->add_module("conv", std::make_shared<Conv3d<T>>(in, out, 3, stride, 1, rng));
    norm_ = this->add_module("norm", std::make_shared<GroupNorm<T>>(out, groups));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::relu((*norm_)((*conv_)(x))); }

 private:
  std::shared_ptr<Conv3d<T>> conv_;
  std::shared_ptr<GroupNorm<T>> norm_;
};

}  // namespace tumorseg::nn
