#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "tumorseg/app.hpp"

using namespace tumorseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("tumorseg_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string config_error(const nlohmann::json& j) {
  try {
    run_config_from_json(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

// Label volume with label 2 at the given flat indices.
LabelVolume wt_only(Extent3 s, std::initializer_list<std::size_t> on) {
  Grid3<std::uint8_t> g(s);
  for (auto i : on) g.data[i] = 2;
  Geometry geo;
  return LabelVolume(g, geo);
}

void write_gt_case(const fs::path& root, const std::string& id, const LabelVolume& lv) {
  const fs::path dir = root / id;
  fs::create_directories(dir);
  nifti::write(dir / (id + "_seg.nii.gz"), lv.labels(), lv.geometry());
}

}  // namespace

// ---- run configuration -----------------------------------------------------

TEST(RunConfig, DefaultsFollowArchitecture) {
  const auto b = run_config_from_json(nlohmann::json::object());
  EXPECT_EQ(b.network.architecture, nn::Architecture::bifpn);
  EXPECT_EQ(b.scheduler.kind, ScheduleKind::cosine);
  EXPECT_EQ(b.train.batch_size, 4);
  EXPECT_EQ(b.augment.crop_size, (Extent3{128, 128, 96}));

  const auto u = run_config_from_json({{"network", {{"architecture", "unetpp"}}}});
  EXPECT_EQ(u.scheduler.kind, ScheduleKind::polynomial);
  EXPECT_EQ(u.train.batch_size, 2);
  EXPECT_EQ(u.augment.crop_size, (Extent3{128, 128, 128}));

  const auto o = run_config_from_json({{"network", {{"architecture", "unetpp"}}}, {"scheduler", {{"kind", "cosine"}}}});
  EXPECT_EQ(o.scheduler.kind, ScheduleKind::cosine);
}

TEST(RunConfig, ErrorsNameTheField) {
  EXPECT_NE(config_error({{"scheduler", {{"kind", "linear"}}}}).find("scheduler.kind"), std::string::npos);
  EXPECT_NE(config_error({{"train", {{"batch_sz", 4}}}}).find("train.batch_sz"), std::string::npos);
  EXPECT_NE(config_error({{"extra", 1}}).find("extra"), std::string::npos);
  EXPECT_NE(config_error({{"loss", {{"focal_gamma", "two"}}}}).find("loss.focal_gamma"), std::string::npos);
  EXPECT_NE(config_error({{"augment", {{"crop_size", {100, 128, 96}}}}}).find("augment.crop_size"), std::string::npos);
  EXPECT_NE(config_error({{"scheduler", {{"warmup_epochs", 300}}}}).find("scheduler.warmup_epochs"), std::string::npos);
  EXPECT_NE(config_error({{"inference", {{"tta_flips", {{true, false, false}}}}}}).find("inference.tta_flips"),
            std::string::npos);
  EXPECT_NE(config_error({{"network", {{"lstm_layers", 2}, {"depth", 3}}}}).find("network.depth"), std::string::npos);
}

TEST(RunConfig, FrozenCopyRoundTrips) {
  TempDir tmp("cfg");
  nlohmann::json j{{"seed", 11},
                   {"dataset", "data"},
                   {"network", {{"architecture", "unetpp"}, {"unetpp_channels", {4, 8, 16, 32, 64}}, {"norm_groups", 2}}},
                   {"train", {{"folds", 3}, {"optimizer", {{"beta2", 0.99}}}}},
                   {"loss", {{"focal_alpha", 0.5}}},
                   {"inference", {{"tta_flips", "none"}, {"average_space", "probs"}, {"checkpoints", {"a.ckpt"}}}},
                   {"metrics", {{"hd95_sentinel", 100.0}}}};
  const auto c = run_config_from_json(j, tmp.path);
  EXPECT_EQ(c.dataset, tmp.path / "data");
  EXPECT_EQ(c.train.seed, 11u);
  EXPECT_EQ(c.augment.seed, 11u);
  EXPECT_EQ(c.inference.tta_flips.size(), 1u);
  ASSERT_EQ(c.checkpoints.size(), 1u);
  write_frozen_config(c, tmp.path / "out");
  const auto again = load_run_config(tmp.path / "out" / "run_config.json");
  EXPECT_EQ(to_json(again), to_json(c));
}

TEST(RunConfig, OverridesAndComments) {
  TempDir tmp("ovr");
  std::ofstream(tmp.path / "run.json") << "{\n  // comment\n  \"scheduler\": {\"base_lr\": 0.01}\n}\n";
  const auto c = load_run_config(tmp.path / "run.json", {"scheduler.base_lr=5e-4", "train.augment=false",
                                                         "network.architecture=unetpp"});
  EXPECT_DOUBLE_EQ(c.scheduler.base_lr, 5e-4);
  EXPECT_FALSE(c.train.augment);
  EXPECT_EQ(c.network.architecture, nn::Architecture::unetpp);
  EXPECT_THROW(load_run_config(tmp.path / "run.json", {"novalue"}), ConfigError);
  EXPECT_THROW(load_run_config(tmp.path / "missing.json"), ConfigError);
}

TEST(RunConfig, ShippedConfigsLoad) {
  for (const char* name : {"bifpn.json", "unetpp.json", "synthetic_small.json"}) {
    const auto c = load_run_config(fs::path(TUMORSEG_SOURCE_DIR) / "configs" / name);
    EXPECT_NO_THROW(c.validate()) << name;
  }
  const auto b = load_run_config(fs::path(TUMORSEG_SOURCE_DIR) / "configs" / "bifpn.json");
  EXPECT_EQ(b.network.encoder_channels, (std::vector<int>{16, 32, 64, 128}));
  EXPECT_EQ(b.scheduler.total_epochs, 200);
}

// ---- dataset evaluation --------------------------------------------------------

TEST(EvaluateDataset, PerfectPredictions) {
  TempDir tmp("evalperfect");
  const auto lv = wt_only({6, 6, 6}, {0, 1, 2, 40, 41});
  write_gt_case(tmp.path / "gt", "a", lv);
  write_gt_case(tmp.path / "gt", "b", wt_only({6, 6, 6}, {100}));
  nifti::write(tmp.path / "pred" / "a.nii.gz", lv.labels(), lv.geometry());
  nifti::write(tmp.path / "pred" / "b.nii.gz", wt_only({6, 6, 6}, {100}).labels(), lv.geometry());
  const auto rep = evaluate_dataset(tmp.path / "pred", tmp.path / "gt");
  ASSERT_EQ(rep.cases.size(), 2u);
  EXPECT_TRUE(rep.complete());
  const auto m = rep.mean();
  for (int r = 0; r < 3; ++r) {
    EXPECT_DOUBLE_EQ(m.regions[r].dice, 1.0);
    EXPECT_DOUBLE_EQ(m.regions[r].hd95, 0.0);
  }
}

TEST(EvaluateDataset, MeanAndSkippedBookkeeping) {
  TempDir tmp("evalmean");
  // gt 5 voxels each; overlaps of 3 and 4 voxels give Dice 0.6 and 0.8 on WT
  write_gt_case(tmp.path / "gt", "a", wt_only({6, 6, 6}, {0, 1, 2, 3, 4}));
  write_gt_case(tmp.path / "gt", "b", wt_only({6, 6, 6}, {0, 1, 2, 3, 4}));
  write_gt_case(tmp.path / "gt", "c", wt_only({6, 6, 6}, {0}));
  Geometry geo;
  nifti::write(tmp.path / "pred" / "a.nii.gz", wt_only({6, 6, 6}, {0, 1, 2, 50, 51}).labels(), geo);
  nifti::write(tmp.path / "pred" / "b.nii.gz", wt_only({6, 6, 6}, {0, 1, 2, 3, 51}).labels(), geo);
  nifti::write(tmp.path / "pred" / "zzz.nii.gz", wt_only({6, 6, 6}, {0}).labels(), geo);
  const auto rep = evaluate_dataset(tmp.path / "pred", tmp.path / "gt");
  ASSERT_EQ(rep.cases.size(), 2u);
  EXPECT_NEAR(rep.cases[0].metrics[Region::wt].dice, 0.6, 1e-12);
  EXPECT_NEAR(rep.cases[1].metrics[Region::wt].dice, 0.8, 1e-12);
  EXPECT_NEAR(rep.mean()[Region::wt].dice, 0.7, 1e-12);
  ASSERT_EQ(rep.skipped.size(), 2u);
  EXPECT_EQ(rep.skipped[0].id, "c");
  EXPECT_EQ(rep.skipped[1].id, "zzz");
  EXPECT_FALSE(rep.complete());

  write_summary_csv(tmp.path / "m.csv", rep, "ours");
  const auto csv = slurp(tmp.path / "m.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "Method,Dice ET,Dice WT,Dice TC,HD95 ET,HD95 WT,HD95 TC");
  EXPECT_NE(csv.find("\nours,1.000000,0.700000,1.000000,"), std::string::npos);
}

// ---- commands ----------------------------------------------------------------

TEST(Commands, DeviceSelection) {
  ::unsetenv(app::kDeviceEnv);
  EXPECT_EQ(app::selected_device(), "cpu");
  ::setenv(app::kDeviceEnv, "cuda:0", 1);
  EXPECT_THROW(app::selected_device(), ConfigError);
  ::setenv(app::kDeviceEnv, "cpu", 1);
  EXPECT_EQ(app::selected_device(), "cpu");
  ::unsetenv(app::kDeviceEnv);
}

TEST(Commands, PredictOnEmptyInputReportsZeroCases) {
  TempDir tmp("predempty");
  fs::create_directories(tmp.path / "in");
  std::ostringstream log;
  const auto rep = app::cmd_predict(run_config_from_json(nlohmann::json::object()), tmp.path / "in", tmp.path / "out", {}, log);
  EXPECT_EQ(rep.cases, 0u);
  EXPECT_NE(log.str().find("0 cases"), std::string::npos);
  EXPECT_TRUE(fs::exists(tmp.path / "out" / "run_config.json"));
}

TEST(Commands, SmokeTrainThenPredictThenEvaluate) {
  TempDir tmp("smoke");
  auto cfg = run_config_from_json({{"seed", 3}, {"output_dir", (tmp.path / "run").string()}});
  cfg = app::smoke_config(cfg);
  std::ostringstream log;
  const auto rep = app::cmd_train(cfg, 0, log);
  ASSERT_EQ(rep.folds.size(), 1u);
  const auto& fold = rep.folds[0];
  EXPECT_TRUE(fs::exists(fold.result.best_checkpoint));
  EXPECT_TRUE(fs::exists(fold.result.log_path));
  EXPECT_TRUE(fs::exists(cfg.output_dir / "run_config.json"));
  EXPECT_EQ(fold.result.epochs.size(), 2u);

  std::ostringstream plog;
  const auto pred = app::cmd_predict(cfg, cfg.dataset, tmp.path / "pred", {fold.result.best_checkpoint}, plog);
  ASSERT_EQ(pred.cases, 4u);
  const auto entries = app::dataset_entries(cfg.dataset);
  const auto in = nifti::read<float>(entries[0].modalities[0]);
  const auto out = nifti::read<std::uint8_t>(pred.label_files[0]);
  EXPECT_EQ(out.grid.shape, in.grid.shape);
  EXPECT_EQ(out.geometry.spacing, in.geometry.spacing);
  EXPECT_EQ(out.geometry.axial_axis, in.geometry.axial_axis);

  nlohmann::json manifest;
  std::ifstream(pred.manifest) >> manifest;
  ASSERT_EQ(manifest["cases"].size(), 4u);
  const auto& gate = manifest["cases"][0]["gate"];
  for (const char* r : {"WT", "TC", "ET"}) {
    EXPECT_LE(gate[r]["voxels"].get<std::size_t>(), gate[r]["voxels_before_gate"].get<std::size_t>());
    EXPECT_FALSE(gate[r]["slice_probabilities"].empty());
  }

  std::ostringstream elog;
  const auto ev = app::cmd_evaluate(cfg, tmp.path / "pred", cfg.dataset, tmp.path / "eval", "smoke", elog);
  EXPECT_EQ(ev.cases.size(), 4u);
  EXPECT_TRUE(ev.complete());
  EXPECT_TRUE(fs::exists(tmp.path / "eval" / "metrics.csv"));
}

TEST(Commands, TrainIsDeterministic) {
  TempDir tmp("det");
  std::vector<std::string> logs;
  for (int run = 0; run < 2; ++run) {
    auto cfg = run_config_from_json({{"seed", 9}, {"output_dir", (tmp.path / std::to_string(run)).string()}});
    cfg = app::smoke_config(cfg);
    std::ostringstream log;
    const auto rep = app::cmd_train(cfg, 1, log);
    logs.push_back(slurp(rep.folds[0].result.log_path));
  }
  EXPECT_EQ(logs[0], logs[1]);
  EXPECT_FALSE(logs[0].empty());
}

TEST(Commands, FoldOutOfRange) {
  TempDir tmp("fold");
  auto cfg = app::smoke_config(run_config_from_json({{"output_dir", tmp.path.string()}}));
  std::ostringstream log;
  EXPECT_THROW(app::cmd_train(cfg, 5, log), ConfigError);
}
