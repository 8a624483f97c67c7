#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tumorseg/app.hpp"

using namespace tumorseg;
namespace fs = std::filesystem;

namespace {

RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  if (!path.empty()) return load_run_config(path, overrides);
  nlohmann::json j = nlohmann::json::object();
  for (const auto& o : overrides) apply_override(j, o);
  return run_config_from_json(j, fs::current_path());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"tumorseg: brain tumor segmentation with slice-classification gating"};
  cli.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  auto add_config = [&](CLI::App* sub, bool required) {
    auto* o = sub->add_option("--config,-c", config_path, "run configuration (JSON)");
    if (required) o->required()->check(CLI::ExistingFile);
    sub->add_option("--set", overrides, "override a config field, e.g. --set scheduler.base_lr=5e-4");
  };

  auto* train = cli.add_subcommand("train", "train one fold or all folds");
  add_config(train, true);
  std::optional<int> fold;
  std::string synthetic;
  train->add_option("--fold", fold, "fold index (default: all folds)");
  train->add_option("--synthetic", synthetic, "run a built-in synthetic preset instead")->check(CLI::IsMember({"smoke"}));

  auto* predict = cli.add_subcommand("predict", "predict label maps for every case of a dataset");
  add_config(predict, false);
  std::string input, output;
  std::vector<std::string> checkpoints;
  bool no_gate = false, no_tta = false, probabilities = false;
  std::string avg_space;
  predict->add_option("--input,-i", input, "dataset directory or manifest")->required();
  predict->add_option("--output,-o", output, "output directory (default: <output_dir>/predictions)");
  predict->add_option("--checkpoint,checkpoints", checkpoints, "checkpoint files (ensemble members)");
  predict->add_flag("--no-gate", no_gate, "disable slice-classification gating");
  predict->add_flag("--no-tta", no_tta, "identity flip only");
  predict->add_option("--avg-space", avg_space, "ensemble averaging space")->check(CLI::IsMember({"logits", "probs"}));
  predict->add_flag("--probabilities", probabilities, "also write WT/TC/ET probability maps");

  auto* evaluate = cli.add_subcommand("evaluate", "score predicted label maps against ground truth");
  add_config(evaluate, false);
  std::string pred_dir, gt_dir, eval_out, method = "tumorseg";
  evaluate->add_option("--pred", pred_dir, "directory of <id>.nii.gz predictions")->required();
  evaluate->add_option("--gt", gt_dir, "ground-truth dataset directory or manifest")->required();
  evaluate->add_option("--out", eval_out, "directory for metrics.csv (default: --pred)");
  evaluate->add_option("--method", method, "label of the mean row");

  auto* synth = cli.add_subcommand("synth", "generate a synthetic multimodal dataset");
  std::size_t n = 4;
  std::string synth_out;
  SynthConfig scfg;
  std::vector<std::int64_t> shape;
  synth->add_option("--n", n, "number of cases")->check(CLI::PositiveNumber);
  synth->add_option("--out,-o", synth_out, "output directory")->required();
  synth->add_option("--seed", scfg.seed, "generator seed");
  synth->add_option("--shape", shape, "volume extents x y z")->expected(3);
  synth->add_option("--speckles", scfg.speckles, "enhancing-like speckles per case on tumor-free slices");

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = cli.exit(e);
    return code == 0 ? app::kOk : app::kConfigError;
  }

  try {
    app::selected_device();
    if (*train) {
      RunConfig cfg = resolve_config(config_path, overrides);
      if (synthetic == "smoke") {
        cfg = app::smoke_config(cfg);
        if (!fold) fold = 0;
      }
      app::cmd_train(cfg, fold, std::cout);
    } else if (*predict) {
      RunConfig cfg = resolve_config(config_path, overrides);
      if (no_gate) cfg.inference.gate_enabled = false;
      if (no_tta) cfg.inference.tta_flips = {FlipSet{false, false, false}};
      if (!avg_space.empty()) cfg.inference.average_space = parse_average_space(avg_space);
      if (probabilities) cfg.inference.write_probabilities = true;
      std::vector<fs::path> ck(cfg.checkpoints);
      if (!checkpoints.empty()) ck.assign(checkpoints.begin(), checkpoints.end());
      const fs::path out = output.empty() ? cfg.output_dir / "predictions" : fs::path(output);
      app::cmd_predict(cfg, input, out, ck, std::cout);
    } else if (*evaluate) {
      RunConfig cfg = resolve_config(config_path, overrides);
      const auto rep = app::cmd_evaluate(cfg, pred_dir, gt_dir, eval_out.empty() ? pred_dir : eval_out, method, std::cout);
      if (!rep.complete()) return app::kRuntimeError;
    } else if (*synth) {
      if (!shape.empty()) scfg.shape = {shape[0], shape[1], shape[2]};
      app::cmd_synth(n, synth_out, scfg, std::cout);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return app::kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return app::kRuntimeError;
  }
  return app::kOk;
}
