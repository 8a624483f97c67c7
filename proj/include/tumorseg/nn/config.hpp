#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tumorseg/core/error.hpp"

namespace tumorseg::nn {

enum class Architecture { bifpn, unetpp };

inline std::string to_string(Architecture a) { return a == Architecture::bifpn ? "bifpn" : "unetpp"; }

inline Architecture parse_architecture(const std::string& s) {
  if (s == "bifpn") return Architecture::bifpn;
  if (s == "unetpp") return Architecture::unetpp;
  throw ConfigError("network.architecture: unknown architecture '" + s + "' (expected bifpn|unetpp)");
}

struct NetworkConfig {
  Architecture architecture = Architecture::bifpn;
  int in_channels = 4;
  // BiFPN encoder widths, one per pyramid level (strides 2, 4, 8, 16).
  std::vector<int> encoder_channels{16, 32, 64, 128};
  int pyramid_channels = 256;
  int bifpn_layers = 3;
  // UNet++ backbone widths from the full-resolution row downwards.
  std::vector<int> unetpp_channels{32, 64, 128, 256, 512};
  bool deep_supervision = true;
  int norm_groups = 8;
  int num_regions = 3;
  double dropout_rate = 0.2;
  int classifier_channels = 512;
  int lstm_hidden = 512;
  int lstm_layers = 2;

  static NetworkConfig bifpn_default() { return {}; }

  static NetworkConfig unetpp_default() {
    NetworkConfig c;
    c.architecture = Architecture::unetpp;
    c.classifier_channels = 256;
    c.lstm_hidden = 256;
    c.lstm_layers = 3;
    return c;
  }

  // Spatial extents fed to the network must be multiples of this.
  std::int64_t size_multiple() const {
    const std::size_t levels =
        architecture == Architecture::bifpn ? encoder_channels.size() : unetpp_channels.size() - 1;
    return std::int64_t{1} << levels;
  }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ConfigError("network." + field + ": " + why);
    };
    if (in_channels <= 0) fail("in_channels", "must be positive");
    if (num_regions != 3) fail("num_regions", "must be 3 (WT, TC, ET)");
    if (norm_groups <= 0) fail("norm_groups", "must be positive");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) fail("dropout_rate", "must lie in [0, 1)");
    if (classifier_channels <= 0) fail("classifier_channels", "must be positive");
    if (lstm_hidden <= 0) fail("lstm_hidden", "must be positive");
    if (lstm_layers <= 0) fail("lstm_layers", "must be positive");
    auto check_doubling = [&](const std::vector<int>& ch, const std::string& field, std::size_t min_len) {
      if (ch.size() < min_len) fail(field, "needs at least " + std::to_string(min_len) + " levels");
      for (std::size_t i = 0; i < ch.size(); ++i) {
        if (ch[i] <= 0) fail(field, "channel counts must be positive");
        if (i > 0 && ch[i] != 2 * ch[i - 1]) fail(field, "channel counts must double at each level");
        if (ch[i] % norm_groups != 0)
          fail(field, std::to_string(norm_groups) + " groups do not divide " + std::to_string(ch[i]));
      }
    };
    if (architecture == Architecture::bifpn) {
      check_doubling(encoder_channels, "encoder_channels", 2);
      if (pyramid_channels <= 0 || pyramid_channels % norm_groups != 0)
        fail("pyramid_channels", "must be a positive multiple of norm_groups");
      if (bifpn_layers < 1) fail("bifpn_layers", "must be at least 1");
    } else {
      check_doubling(unetpp_channels, "unetpp_channels", 2);
    }
    if (classifier_channels % norm_groups != 0)
      fail("classifier_channels", "must be a multiple of norm_groups");
  }
};

}  // namespace tumorseg::nn
