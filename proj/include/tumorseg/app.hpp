#pragma once

// Command implementations behind the tumorseg executable. Each command takes
// a resolved RunConfig, writes its outputs plus a frozen copy of that config,
// and reports progress on the given stream.

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "tumorseg/config.hpp"
#include "tumorseg/evaluation.hpp"
#include "tumorseg/inference.hpp"
#include "tumorseg/io/case_io.hpp"
#include "tumorseg/nn/checkpoint.hpp"
#include "tumorseg/nn/factory.hpp"
#include "tumorseg/synth.hpp"
#include "tumorseg/train.hpp"

namespace tumorseg::app {

enum ExitCode : int { kOk = 0, kRuntimeError = 1, kConfigError = 2 };

inline constexpr const char* kDeviceEnv = "TUMORSEG_DEVICE";

// Only the CPU backend exists; anything else in the environment is a config error.
inline std::string selected_device() {
  const char* v = std::getenv(kDeviceEnv);
  const std::string d = v && *v ? v : "cpu";
  if (d != "cpu") throw ConfigError(std::string(kDeviceEnv) + ": unsupported device '" + d + "' (available: cpu)");
  return d;
}

// A dataset is either a manifest file or a directory (with its own
// manifest.json or one subdirectory per case).
inline std::vector<CaseEntry> dataset_entries(const fs::path& p) {
  if (p.empty()) throw ConfigError("dataset: no dataset path configured");
  if (fs::is_regular_file(p)) return read_manifest(p);
  return enumerate_cases(p);
}

inline std::vector<PreparedCase> load_prepared(const std::vector<CaseEntry>& entries) {
  std::vector<PreparedCase> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(prepare_case(load_case(e)));
  return out;
}

// ---- train -----------------------------------------------------------------

struct FoldRun {
  int fold = 0;
  fs::path dir;
  FitResult result;
};

struct TrainReport {
  std::vector<FoldRun> folds;
};

inline std::uint64_t fold_seed(std::uint64_t seed, int fold) {
  return seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(fold) + 1;
}

inline TrainReport cmd_train(const RunConfig& cfg, std::optional<int> only_fold, std::ostream& log) {
  cfg.validate();
  const auto entries = dataset_entries(cfg.dataset);
  std::vector<std::string> ids;
  for (const auto& e : entries) ids.push_back(e.id);
  const auto folds = make_folds(ids, cfg.train.folds, cfg.seed);
  if (only_fold && (*only_fold < 0 || *only_fold >= cfg.train.folds))
    throw ConfigError("--fold: must lie in [0, " + std::to_string(cfg.train.folds) + ")");

  fs::create_directories(cfg.output_dir);
  write_frozen_config(cfg, cfg.output_dir);
  log << "loading " << entries.size() << " cases from " << cfg.dataset.string() << "\n";
  const auto cases = load_prepared(entries);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < cases.size(); ++i) index[cases[i].id] = i;

  TrainReport rep;
  for (int k = 0; k < cfg.train.folds; ++k) {
    if (only_fold && k != *only_fold) continue;
    std::vector<PreparedCase> tr, va;
    for (const auto& id : folds[k].train_ids) tr.push_back(cases[index.at(id)]);
    for (const auto& id : folds[k].val_ids) va.push_back(cases[index.at(id)]);

    FitOptions o;
    o.train = cfg.train;
    o.train.seed = fold_seed(cfg.seed, k);
    o.scheduler = cfg.scheduler;
    o.loss = cfg.loss;
    o.augment = cfg.augment;
    o.augment.seed = fold_seed(cfg.seed, k);
    o.output_dir = cfg.output_dir / ("fold_" + std::to_string(k));
    o.checkpoint_metadata = {{"fold", k}, {"run_seed", cfg.seed}, {"train_ids", folds[k].train_ids}};

    log << "fold " << k << ": " << tr.size() << " train / " << va.size() << " validation cases\n";
    auto net = nn::make_network<float>(cfg.network, fold_seed(cfg.seed, k));
    TrainCallbacks cb;
    cb.on_epoch = [&](const EpochRecord& e) {
      log << "  epoch " << e.epoch << " step " << e.step << " loss " << std::setprecision(5) << e.train_loss;
      if (e.val)
        log << " | val loss " << e.val->loss << " dice WT/TC/ET " << e.val->dice[0] << "/" << e.val->dice[1] << "/"
            << e.val->dice[2] << " slice acc " << e.val->slice_accuracy;
      log << "\n" << std::flush;
    };
    FoldRun run{k, o.output_dir, fit(*net, tr, va, o, cb)};
    log << "  best checkpoint: " << run.result.best_checkpoint.string() << "\n";
    rep.folds.push_back(std::move(run));
  }
  return rep;
}

// Reduced-width network of the configured architecture for smoke runs.
inline nn::NetworkConfig smoke_network(nn::Architecture a) {
  nn::NetworkConfig c = a == nn::Architecture::bifpn ? nn::NetworkConfig::bifpn_default()
                                                     : nn::NetworkConfig::unetpp_default();
  c.encoder_channels = {4, 8, 16, 32};
  c.pyramid_channels = 8;
  c.bifpn_layers = 1;
  c.unetpp_channels = {4, 8, 16, 32, 64};
  c.norm_groups = 2;
  c.classifier_channels = 16;
  c.lstm_hidden = 8;
  c.lstm_layers = 1;
  return c;
}

// Synthetic smoke run: 4 small generated cases, reduced network, 2 epochs.
inline RunConfig smoke_config(RunConfig c) {
  SynthConfig s;
  s.shape = {48, 48, 40};
  s.seed = c.seed;
  const fs::path data = c.output_dir / "synthetic";
  write_synthetic_dataset(data, 4, s);
  c.dataset = data;
  c.network = smoke_network(c.network.architecture);
  c.train.batch_size = 2;
  c.train.folds = 2;
  c.train.max_steps = 0;
  c.scheduler.total_epochs = 2;
  c.scheduler.warmup_epochs = 1;
  c.augment.crop_size = {32, 32, 32};
  c.validate();
  return c;
}

// ---- predict ---------------------------------------------------------------

struct PredictReport {
  std::size_t cases = 0;
  std::vector<fs::path> label_files;
  fs::path manifest;
};

// Gate decisions of one case in original axial slice indices.
inline nlohmann::json gate_record(const CasePrediction& p, int axial_axis) {
  const auto& f = p.frame;
  const std::int64_t first = f.crop.lo[axial_axis];
  const std::int64_t n = f.crop.extent()[axial_axis];
  const std::int64_t off = f.pad.before[2];
  nlohmann::json g{{"axial_axis", axial_axis}, {"first_slice", first}};
  for (int r = 0; r < 3; ++r) {
    nlohmann::json probs = nlohmann::json::array(), removed = nlohmann::json::array();
    for (std::int64_t z = 0; z < n; ++z) {
      probs.push_back(p.network_frame.slice_probs[r][static_cast<std::size_t>(z + off)]);
      if (!p.network_frame.keep[r][static_cast<std::size_t>(z + off)]) removed.push_back(first + z);
    }
    std::size_t kept = 0, raw = 0;
    for (auto v : p.regions.channels[r].data) kept += v != 0;
    for (auto v : p.ungated_regions.channels[r].data) raw += v != 0;
    g[kRegionNames[r]] = {{"slice_probabilities", probs},
                          {"gated_slices", removed},
                          {"voxels", kept},
                          {"voxels_before_gate", raw}};
  }
  return g;
}

inline PredictReport cmd_predict(const RunConfig& cfg, const fs::path& input, const fs::path& output,
                                 const std::vector<fs::path>& checkpoint_paths, std::ostream& log) {
  cfg.validate();
  const auto entries = dataset_entries(input);
  PredictReport rep;
  fs::create_directories(output);
  RunConfig frozen = cfg;
  frozen.dataset = input;
  frozen.output_dir = output;
  frozen.checkpoints = checkpoint_paths;
  write_frozen_config(frozen, output);
  if (entries.empty()) {
    log << "0 cases\n";
    return rep;
  }
  if (checkpoint_paths.empty()) throw ConfigError("predict: no checkpoints given");

  std::vector<nn::LoadedModel<float>> models;
  std::vector<Predictor<float>> predictors;
  std::int64_t mult = 1;
  for (const auto& p : checkpoint_paths) {
    models.push_back(nn::load_checkpoint<float>(p));
    mult = std::lcm(mult, models.back().net->config().size_multiple());
  }
  for (auto& m : models) predictors.push_back(as_predictor(*m.net));
  log << "ensemble of " << models.size() << " model(s), " << cfg.inference.tta_flips.size() << " flip(s) each\n";

  nlohmann::json manifest_cases = nlohmann::json::array();
  for (const auto& e : entries) {
    const Case c = load_case(e);
    const auto pred = predict_case<float>(c.image, predictors, cfg.inference, mult);
    const fs::path label_path = output / (c.id + ".nii.gz");
    nifti::write(label_path, pred.labels.labels(), c.image.geometry());
    nlohmann::json rec{{"id", c.id}, {"labels", label_path.filename().generic_string()}};
    if (cfg.inference.write_probabilities) {
      const fs::path prob_path = output / "probabilities" / (c.id + "_prob.nii.gz");
      nifti::write_volumes<float>(prob_path, {&pred.probabilities[0], &pred.probabilities[1], &pred.probabilities[2]},
                                  c.image.geometry());
      rec["probabilities"] = fs::relative(prob_path, output).generic_string();
    }
    rec["gate"] = gate_record(pred, c.image.geometry().axial_axis);
    manifest_cases.push_back(rec);
    rep.label_files.push_back(label_path);
    ++rep.cases;
    log << "  " << c.id << " -> " << label_path.filename().string() << "\n" << std::flush;
  }
  nlohmann::json ck = nlohmann::json::array();
  for (const auto& p : checkpoint_paths) ck.push_back(p.generic_string());
  rep.manifest = output / "predictions.json";
  std::ofstream(rep.manifest) << nlohmann::json{{"checkpoints", ck},
                                                {"gate_enabled", cfg.inference.gate_enabled},
                                                {"threshold", cfg.inference.threshold},
                                                {"cases", manifest_cases}}
                                     .dump(2)
                              << "\n";
  log << rep.cases << " cases\n";
  return rep;
}

// ---- evaluate --------------------------------------------------------------

inline EvaluationReport cmd_evaluate(const RunConfig& cfg, const fs::path& pred_dir, const fs::path& gt_root,
                                     const fs::path& out_dir, const std::string& method, std::ostream& log) {
  if (!fs::exists(gt_root)) throw ConfigError("--gt: ground-truth path not found: " + gt_root.string());
  if (!fs::is_directory(pred_dir)) throw ConfigError("--pred: prediction directory not found: " + pred_dir.string());
  auto rep = evaluate_dataset(pred_dir, gt_root, cfg.metrics);
  fs::create_directories(out_dir);
  write_summary_csv(out_dir / "metrics.csv", rep, method);
  write_detail_csv(out_dir / "metrics_detail.csv", rep);
  RunConfig frozen = cfg;
  frozen.dataset = gt_root;
  frozen.output_dir = out_dir;
  write_frozen_config(frozen, out_dir);
  const auto m = rep.mean();
  log << rep.cases.size() << " cases evaluated";
  if (!rep.cases.empty())
    log << ": Dice ET/WT/TC " << std::setprecision(4) << m[Region::et].dice << "/" << m[Region::wt].dice << "/"
        << m[Region::tc].dice << ", HD95 ET/WT/TC " << m[Region::et].hd95 << "/" << m[Region::wt].hd95 << "/"
        << m[Region::tc].hd95;
  log << "\n";
  if (!rep.skipped.empty()) {
    log << rep.skipped.size() << " skipped case(s):\n";
    for (const auto& s : rep.skipped) log << "  " << s.id << ": " << s.reason << "\n";
  }
  return rep;
}

// ---- synth -----------------------------------------------------------------

inline std::vector<CaseEntry> cmd_synth(std::size_t n, const fs::path& out, const SynthConfig& cfg, std::ostream& log) {
  auto entries = write_synthetic_dataset(out, n, cfg);
  nlohmann::json j{{"n", n},
                   {"seed", cfg.seed},
                   {"shape", cfg.shape},
                   {"spacing", cfg.spacing},
                   {"tumor_fraction", cfg.tumor_fraction},
                   {"core_ratio", cfg.core_ratio},
                   {"necrosis_ratio", cfg.necrosis_ratio},
                   {"noise", cfg.noise},
                   {"speckles", cfg.speckles},
                   {"speckle_size", cfg.speckle_size}};
  std::ofstream(out / "synth_config.json") << j.dump(2) << "\n";
  log << n << " synthetic cases written to " << out.string() << "\n";
  return entries;
}

}  // namespace tumorseg::app
