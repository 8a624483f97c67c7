#pragma once

// Run configuration: one JSON document holding every tunable of a training,
// prediction or evaluation run. Unknown keys are errors, and every run writes
// the resolved document next to its outputs.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tumorseg/inference.hpp"
#include "tumorseg/io/json_fields.hpp"
#include "tumorseg/losses.hpp"
#include "tumorseg/metrics.hpp"
#include "tumorseg/nn/checkpoint.hpp"
#include "tumorseg/preprocess.hpp"
#include "tumorseg/schedule.hpp"
#include "tumorseg/train.hpp"

namespace tumorseg {

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path dataset;     // manifest file or directory of case directories
  std::filesystem::path output_dir = "runs/default";
  nn::NetworkConfig network = nn::NetworkConfig::bifpn_default();
  TrainConfig train;
  SchedulerConfig scheduler;
  LossConfig loss;
  AugmentConfig augment;
  InferenceConfig inference;
  std::vector<std::filesystem::path> checkpoints;  // ensemble members for predict
  MetricsConfig metrics;

  void validate() const {
    network.validate();
    train.validate();
    scheduler.validate();
    loss.validate();
    augment.validate();
    inference.validate();
    const std::int64_t mult = network.size_multiple();
    for (auto c : augment.crop_size)
      if (c % mult != 0) throw ConfigError("augment.crop_size: extents must be multiples of " + std::to_string(mult));
    if (inference.tiling == Tiling::sliding)
      for (auto w : inference.window)
        if (w % mult != 0) throw ConfigError("inference.window: extents must be multiples of " + std::to_string(mult));
    if (!(metrics.hd95_sentinel >= 0)) throw ConfigError("metrics.hd95_sentinel: must be >= 0");
  }

  // Seeds of the individual stages follow the run seed.
  void propagate_seed() {
    train.seed = seed;
    augment.seed = seed;
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  using nlohmann::json;
  json flips = json::array();
  for (const auto& f : c.inference.tta_flips) flips.push_back({f[0], f[1], f[2]});
  json ckpts = json::array();
  for (const auto& p : c.checkpoints) ckpts.push_back(p.generic_string());
  return {
      {"seed", c.seed},
      {"dataset", c.dataset.generic_string()},
      {"output_dir", c.output_dir.generic_string()},
      {"network", nn::to_json(c.network)},
      {"train",
       {{"batch_size", c.train.batch_size},
        {"folds", c.train.folds},
        {"max_steps", c.train.max_steps},
        {"validate_every", c.train.validate_every},
        {"augment", c.train.augment},
        {"optimizer",
         {{"beta1", c.train.optimizer.beta1},
          {"beta2", c.train.optimizer.beta2},
          {"eps", c.train.optimizer.eps},
          {"weight_decay", c.train.optimizer.weight_decay}}}}},
      {"scheduler",
       {{"kind", to_string(c.scheduler.kind)},
        {"base_lr", c.scheduler.base_lr},
        {"total_epochs", c.scheduler.total_epochs},
        {"warmup_epochs", c.scheduler.warmup_epochs},
        {"poly_power", c.scheduler.poly_power}}},
      {"loss",
       {{"epsilon", c.loss.epsilon},
        {"focal_gamma", c.loss.focal_gamma},
        {"focal_alpha", c.loss.focal_alpha},
        {"clamp", c.loss.clamp}}},
      {"augment",
       {{"flip_prob", c.augment.flip_prob},
        {"scale_range", c.augment.scale_range},
        {"shift_range", c.augment.shift_range},
        {"intensity_aug_prob", c.augment.intensity_aug_prob},
        {"crop_size", c.augment.crop_size}}},
      {"inference",
       {{"tta_flips", flips},
        {"threshold", c.inference.threshold},
        {"gate", c.inference.gate_enabled},
        {"average_space", to_string(c.inference.average_space)},
        {"tiling", to_string(c.inference.tiling)},
        {"window", c.inference.window},
        {"overlap", c.inference.overlap},
        {"min_component_voxels", c.inference.min_component_voxels},
        {"write_probabilities", c.inference.write_probabilities},
        {"checkpoints", ckpts}}},
      {"metrics", {{"hd95_sentinel", c.metrics.hd95_sentinel}}},
  };
}

namespace detail {

inline std::vector<FlipSet> parse_flips(const nlohmann::json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() == "all") return all_flip_sets();
    if (j.get<std::string>() == "none") return {FlipSet{false, false, false}};
    throw ConfigError("inference.tta_flips: expected \"all\", \"none\" or a list of [x, y, z] flags");
  }
  if (!j.is_array()) throw ConfigError("inference.tta_flips: expected a list");
  std::vector<FlipSet> out;
  for (const auto& f : j) {
    if (!f.is_array() || f.size() != 3) throw ConfigError("inference.tta_flips: each entry must be [x, y, z]");
    try {
      out.push_back({f[0].get<bool>(), f[1].get<bool>(), f[2].get<bool>()});
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("inference.tta_flips: ") + e.what());
    }
  }
  return out;
}

}  // namespace detail

// Relative paths in the document are resolved against `base`.
inline RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base = {}) {
  json_fields::Reader r(j, "");
  RunConfig c;
  r.get("seed", c.seed);
  std::string dataset, output_dir = c.output_dir.string();
  r.get("dataset", dataset);
  r.get("output_dir", output_dir);
  auto resolve = [&](const std::string& p) -> std::filesystem::path {
    if (p.empty()) return {};
    const std::filesystem::path q(p);
    return std::filesystem::absolute(q.is_absolute() || base.empty() ? q : base / q).lexically_normal();
  };
  c.dataset = resolve(dataset);
  c.output_dir = resolve(output_dir);

  if (const auto* n = r.child("network")) c.network = nn::network_config_from_json(*n, "network");
  // cosine with BiFPN, polynomial with UNet++ unless stated otherwise
  c.scheduler.kind = c.network.architecture == nn::Architecture::bifpn ? ScheduleKind::cosine : ScheduleKind::polynomial;
  if (c.network.architecture == nn::Architecture::unetpp) {
    c.train.batch_size = 2;
    c.augment.crop_size = {128, 128, 128};
  }

  if (const auto* t = r.child("train")) {
    json_fields::Reader tr(*t, "train");
    tr.get("batch_size", c.train.batch_size);
    tr.get("folds", c.train.folds);
    tr.get("max_steps", c.train.max_steps);
    tr.get("validate_every", c.train.validate_every);
    tr.get("augment", c.train.augment);
    if (const auto* o = tr.child("optimizer")) {
      json_fields::Reader orr(*o, "train.optimizer");
      orr.get("beta1", c.train.optimizer.beta1);
      orr.get("beta2", c.train.optimizer.beta2);
      orr.get("eps", c.train.optimizer.eps);
      orr.get("weight_decay", c.train.optimizer.weight_decay);
      orr.finish();
    }
    tr.finish();
  }
  if (const auto* s = r.child("scheduler")) {
    json_fields::Reader sr(*s, "scheduler");
    if (sr.has("kind")) {
      std::string kind;
      sr.get("kind", kind);
      c.scheduler.kind = parse_schedule_kind(kind);
    }
    sr.get("base_lr", c.scheduler.base_lr);
    sr.get("total_epochs", c.scheduler.total_epochs);
    sr.get("warmup_epochs", c.scheduler.warmup_epochs);
    sr.get("poly_power", c.scheduler.poly_power);
    sr.finish();
  }
  if (const auto* l = r.child("loss")) {
    json_fields::Reader lr(*l, "loss");
    lr.get("epsilon", c.loss.epsilon);
    lr.get("focal_gamma", c.loss.focal_gamma);
    lr.get("focal_alpha", c.loss.focal_alpha);
    lr.get("clamp", c.loss.clamp);
    lr.finish();
  }
  if (const auto* a = r.child("augment")) {
    json_fields::Reader ar(*a, "augment");
    ar.get("flip_prob", c.augment.flip_prob);
    ar.get("scale_range", c.augment.scale_range);
    ar.get("shift_range", c.augment.shift_range);
    ar.get("intensity_aug_prob", c.augment.intensity_aug_prob);
    ar.get("crop_size", c.augment.crop_size);
    ar.finish();
  }
  if (const auto* i = r.child("inference")) {
    json_fields::Reader ir(*i, "inference");
    if (const auto* f = ir.child("tta_flips")) c.inference.tta_flips = detail::parse_flips(*f);
    ir.get("threshold", c.inference.threshold);
    ir.get("gate", c.inference.gate_enabled);
    if (ir.has("average_space")) {
      std::string s;
      ir.get("average_space", s);
      c.inference.average_space = parse_average_space(s);
    }
    if (ir.has("tiling")) {
      std::string s;
      ir.get("tiling", s);
      c.inference.tiling = parse_tiling(s);
    }
    ir.get("window", c.inference.window);
    ir.get("overlap", c.inference.overlap);
    ir.get("min_component_voxels", c.inference.min_component_voxels);
    ir.get("write_probabilities", c.inference.write_probabilities);
    std::vector<std::string> ckpts;
    ir.get("checkpoints", ckpts);
    for (const auto& p : ckpts) c.checkpoints.push_back(resolve(p));
    ir.finish();
  }
  if (const auto* m = r.child("metrics")) {
    json_fields::Reader mr(*m, "metrics");
    mr.get("hd95_sentinel", c.metrics.hd95_sentinel);
    mr.finish();
  }
  r.finish();
  c.propagate_seed();
  c.validate();
  return c;
}

// "a.b.c=value": value is parsed as JSON, falling back to a plain string.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &j;
  std::size_t start = 0;
  for (std::size_t dot; (dot = key.find('.', start)) != std::string::npos; start = dot + 1) {
    auto& next = (*node)[key.substr(start, dot - start)];
    if (next.is_null()) next = nlohmann::json::object();
    if (!next.is_object()) throw ConfigError("override '" + key + "': " + key.substr(0, dot) + " is not an object");
    node = &next;
  }
  (*node)[key.substr(start)] = std::move(value);
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  try {
    return nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  auto j = read_json_file(path);
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  for (const auto& o : overrides) apply_override(j, o);
  return run_config_from_json(j, path.parent_path());
}

inline void write_frozen_config(const RunConfig& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "run_config.json");
  if (!out) throw ConfigError("cannot write " + (dir / "run_config.json").string());
  out << to_json(c).dump(2) << "\n";
}

}  // namespace tumorseg
