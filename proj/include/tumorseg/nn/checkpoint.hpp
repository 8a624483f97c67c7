#pragma once

// Checkpoint files:
//   "TSEGCKPT" | u32 schema version | u64 header length | JSON header | tensor data
// The JSON header holds the NetworkConfig, free-form metadata and a table of
// (name, kind, shape, dtype, offset) entries. Tensor data is stored raw, so
// a save/load round trip is bit-exact.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>

#include <json.hpp>

#include "tumorseg/io/json_fields.hpp"
#include "tumorseg/nn/factory.hpp"

namespace tumorseg::nn {

inline constexpr char kCheckpointMagic[8] = {'T', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointSchema = 1;

inline nlohmann::json to_json(const NetworkConfig& c) {
  return {{"architecture", to_string(c.architecture)},
          {"in_channels", c.in_channels},
          {"encoder_channels", c.encoder_channels},
          {"pyramid_channels", c.pyramid_channels},
          {"bifpn_layers", c.bifpn_layers},
          {"unetpp_channels", c.unetpp_channels},
          {"deep_supervision", c.deep_supervision},
          {"norm_groups", c.norm_groups},
          {"num_regions", c.num_regions},
          {"dropout_rate", c.dropout_rate},
          {"classifier_channels", c.classifier_channels},
          {"lstm_hidden", c.lstm_hidden},
          {"lstm_layers", c.lstm_layers}};
}

// Unspecified fields take the defaults of the named architecture.
inline NetworkConfig network_config_from_json(const nlohmann::json& j, const std::string& path = "network") {
  json_fields::Reader r(j, path);
  std::string arch = "bifpn";
  r.get("architecture", arch);
  NetworkConfig c = parse_architecture(arch) == Architecture::bifpn ? NetworkConfig::bifpn_default()
                                                                    : NetworkConfig::unetpp_default();
  r.get("in_channels", c.in_channels);
  r.get("encoder_channels", c.encoder_channels);
  r.get("pyramid_channels", c.pyramid_channels);
  r.get("bifpn_layers", c.bifpn_layers);
  r.get("unetpp_channels", c.unetpp_channels);
  r.get("deep_supervision", c.deep_supervision);
  r.get("norm_groups", c.norm_groups);
  r.get("num_regions", c.num_regions);
  r.get("dropout_rate", c.dropout_rate);
  r.get("classifier_channels", c.classifier_channels);
  r.get("lstm_hidden", c.lstm_hidden);
  r.get("lstm_layers", c.lstm_layers);
  r.finish();
  c.validate();
  return c;
}

template <class T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, SegmentationNet<T>& net,
                     const nlohmann::json& metadata = nlohmann::json::object()) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  struct Entry {
    std::string name, kind;
    const Tensor<T>* t;
  };
  std::vector<Entry> entries;
  for (auto& p : net.named_parameters()) entries.push_back({p.name, "parameter", &p.var.value()});
  for (auto& b : net.named_buffers()) entries.push_back({b.name, "buffer", b.tensor});

  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    table.push_back({{"name", e.name}, {"kind", e.kind}, {"shape", e.t->shape()}, {"dtype", dtype_name<T>()},
                     {"offset", offset}});
    offset += e.t->numel() * sizeof(T);
  }
  const std::string header =
      nlohmann::json{{"network", to_json(net.config())}, {"metadata", metadata}, {"tensors", table}}.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + path.string());
    const std::uint64_t len = header.size();
    out.write(kCheckpointMagic, 8);
    out.write(reinterpret_cast<const char*>(&kCheckpointSchema), 4);
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(header.data(), static_cast<std::streamsize>(len));
    for (const auto& e : entries)
      out.write(reinterpret_cast<const char*>(e.t->data()), static_cast<std::streamsize>(e.t->numel() * sizeof(T)));
    if (!out) throw CheckpointError("short write to " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

struct CheckpointHeader {
  NetworkConfig network;
  nlohmann::json metadata;
  nlohmann::json tensors;
  std::uint64_t data_start = 0;
};

inline CheckpointHeader read_checkpoint_header(std::ifstream& in, const std::string& name) {
  char magic[8];
  std::uint32_t schema = 0;
  std::uint64_t len = 0;
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw CheckpointError(name + ": not a checkpoint file");
  in.read(reinterpret_cast<char*>(&schema), 4);
  if (schema != kCheckpointSchema)
    throw CheckpointError(name + ": unsupported schema version " + std::to_string(schema));
  in.read(reinterpret_cast<char*>(&len), 8);
  if (!in || len > (1ull << 32)) throw CheckpointError(name + ": corrupt header");
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError(name + ": truncated header");
  CheckpointHeader h;
  try {
    auto j = nlohmann::json::parse(header);
    h.network = network_config_from_json(j.at("network"));
    h.metadata = j.value("metadata", nlohmann::json::object());
    h.tensors = j.at("tensors");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(name + ": malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(name + ": " + e.what());
  }
  h.data_start = 8 + 4 + 8 + len;
  return h;
}

template <class T>
struct LoadedModel {
  std::unique_ptr<SegmentationNet<T>> net;
  nlohmann::json metadata;
};

// Builds the network described by the checkpoint and fills its tensors.
template <class T>
LoadedModel<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const auto h = read_checkpoint_header(in, path.string());
  LoadedModel<T> out{make_network<T>(h.network), h.metadata};

  std::map<std::string, Tensor<T>*> targets;
  for (auto& p : out.net->named_parameters()) targets[p.name] = &p.var.mutable_value();
  for (auto& b : out.net->named_buffers()) targets[b.name] = b.tensor;
  if (h.tensors.size() != targets.size())
    throw CheckpointError(path.string() + ": tensor count does not match the network");

  for (const auto& e : h.tensors) {
    const std::string name = e.at("name");
    auto it = targets.find(name);
    if (it == targets.end()) throw CheckpointError(path.string() + ": unexpected tensor " + name);
    Tensor<T>& dst = *it->second;
    if (e.at("shape").get<Shape>() != dst.shape())
      throw CheckpointError(path.string() + ": shape mismatch for " + name);
    const std::string dtype = e.at("dtype");
    const std::size_t n = dst.numel();
    in.seekg(static_cast<std::streamoff>(h.data_start + e.at("offset").get<std::uint64_t>()));
    if (dtype == dtype_name<T>()) {
      in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(n * sizeof(T)));
    } else if (dtype == "f32" || dtype == "f64") {
      const std::size_t width = dtype == "f32" ? 4 : 8;
      std::vector<char> raw(n * width);
      in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
      for (std::size_t i = 0; i < n; ++i) {
        if (width == 4) {
          float v;
          std::memcpy(&v, raw.data() + 4 * i, 4);
          dst[i] = static_cast<T>(v);
        } else {
          double v;
          std::memcpy(&v, raw.data() + 8 * i, 8);
          dst[i] = static_cast<T>(v);
        }
      }
    } else {
      throw CheckpointError(path.string() + ": unknown dtype " + dtype);
    }
    if (!in) throw CheckpointError(path.string() + ": truncated tensor data for " + name);
  }
  out.net->set_training(false);
  return out;
}

}  // namespace tumorseg::nn
