#pragma once

#include <memory>

#include "tumorseg/nn/bifpn_net.hpp"
#include "tumorseg/nn/unetpp_net.hpp"

namespace tumorseg::nn {

template <class T>
std::unique_ptr<SegmentationNet<T>> make_network(const NetworkConfig& cfg, std::uint64_t seed = 0) {
  if (cfg.architecture == Architecture::bifpn) return std::make_unique<BiFpnNet<T>>(cfg, seed);
  return std::make_unique<UNetPlusPlus<T>>(cfg, seed);
}

// Runs a shape-only forward pass (no activations are allocated).
template <class T>
NetOutput<T> trace_shapes(SegmentationNet<T>& net, const Shape& image_shape) {
  NoGradGuard guard;
  return net.forward(Var<T>(Tensor<T>::meta(image_shape)));
}

}  // namespace tumorseg::nn
