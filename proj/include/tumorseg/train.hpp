#pragma once

// Training: fold assignment, case preparation, the fit loop (augment ->
// forward -> loss -> Adam at the scheduled rate), validation and
// checkpointing, with a line-delimited JSON log.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tumorseg/io/case_io.hpp"
#include "tumorseg/losses.hpp"
#include "tumorseg/metrics.hpp"
#include "tumorseg/nn/checkpoint.hpp"
#include "tumorseg/optim.hpp"
#include "tumorseg/preprocess.hpp"
#include "tumorseg/schedule.hpp"

namespace tumorseg {

struct Fold {
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
};

// Shuffles with `seed`, then deals cases round-robin into k validation sets.
inline std::vector<Fold> make_folds(const std::vector<std::string>& ids, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("train.folds: at least 2 folds are needed so that every fold has validation cases");
  if (static_cast<std::size_t>(k) > ids.size())
    throw ConfigError("train.folds: " + std::to_string(k) + " folds for " + std::to_string(ids.size()) + " cases");
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<int> fold_of(ids.size());
  for (std::size_t p = 0; p < order.size(); ++p) fold_of[order[p]] = static_cast<int>(p % k);
  std::vector<Fold> out(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (int f = 0; f < k; ++f) (fold_of[i] == f ? out[f].val_ids : out[f].train_ids).push_back(ids[i]);
  return out;
}

struct TrainConfig {
  int batch_size = 4;
  int folds = 5;
  std::uint64_t seed = 0;
  long long max_steps = 0;  // stop after this many batches; 0 = run the whole schedule
  int validate_every = 1;   // epochs
  bool augment = true;      // off: centred patch, no flips or intensity changes
  AdamConfig optimizer;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
    if (folds < 2) throw ConfigError("train.folds: must be >= 2");
    if (max_steps < 0) throw ConfigError("train.max_steps: must be >= 0");
    if (validate_every < 1) throw ConfigError("train.validate_every: must be >= 1");
    optimizer.validate();
  }
};

// A case in the network frame: foreground-cropped, normalized, axial axis last.
struct PreparedCase {
  std::string id;
  MultimodalVolume image;
  RegionMask regions;
};

inline PreparedCase prepare_case(const Case& c) {
  if (!c.label) throw ConfigError("case " + c.id + " has no label; training and validation need labels");
  const CropBox box = compute_foreground_crop(c.image);
  const auto perm = axial_last_permutation(c.image.geometry().axial_axis);
  const MultimodalVolume norm = normalize(crop(c.image, box));
  const RegionMask reg = crop(labels_to_regions(*c.label), box);
  std::array<Grid3<float>, 4> img;
  RegionMask out_reg;
  for (int m = 0; m < 4; ++m) img[m] = permute_grid(norm.modalities()[m], perm);
  for (int r = 0; r < 3; ++r) out_reg.channels[r] = permute_grid(reg.channels[r], perm);
  Geometry g = c.image.geometry();
  g.axial_axis = 2;
  g.spacing = {g.spacing[perm[0]], g.spacing[perm[1]], g.spacing[perm[2]]};
  return {c.id, MultimodalVolume(std::move(img), g), std::move(out_reg)};
}

// Centred crop-or-pad to `size`, no other changes.
inline AugmentPlan centred_plan(const Extent3& shape, const Extent3& size) {
  AugmentPlan p;
  for (int a = 0; a < 3; ++a) p.origin[a] = std::max<std::int64_t>(0, (shape[a] - size[a]) / 2);
  return p;
}

struct StepRecord {
  long long step = 0;
  int epoch = 0;
  double lr = 0;
  double loss = 0, focal_seg = 0, dice = 0, focal_cls = 0, bce = 0;
};

inline nlohmann::json to_json(const StepRecord& r) {
  return {{"type", "step"}, {"step", r.step},       {"epoch", r.epoch},         {"lr", r.lr},
          {"loss", r.loss}, {"focal_seg", r.focal_seg}, {"dice", r.dice}, {"focal_cls", r.focal_cls},
          {"bce", r.bce}};
}

struct EvalSummary {
  double loss = 0;
  std::array<double, 3> dice{0, 0, 0};   // WT, TC, ET, averaged over cases
  double slice_accuracy = 0;              // over all (case, region, slice) entries
  std::size_t cases = 0;
  double mean_dice() const { return (dice[0] + dice[1] + dice[2]) / 3.0; }
};

inline nlohmann::json to_json(const EvalSummary& s) {
  return {{"loss", s.loss}, {"dice", s.dice}, {"mean_dice", s.mean_dice()}, {"slice_accuracy", s.slice_accuracy},
          {"cases", s.cases}};
}

// Evaluation-mode loss, thresholded Dice (0.5, no gating) and slice accuracy on
// whole prepared cases, padded to the network size multiple.
template <class T>
EvalSummary evaluate_prepared(nn::SegmentationNet<T>& net, const std::vector<PreparedCase>& cases,
                              const LossConfig& loss_cfg) {
  EvalSummary s;
  if (cases.empty()) return s;
  const bool was_training = net.training();
  net.set_training(false);
  NoGradGuard guard;
  std::size_t slice_total = 0, slice_correct = 0;
  for (const auto& c : cases) {
    const Padding pad = symmetric_padding_to_multiple(c.image.shape(), net.config().size_multiple());
    std::array<Grid3<float>, 4> img;
    RegionMask reg;
    for (int m = 0; m < 4; ++m) img[m] = pad_grid(c.image.modalities()[m], pad);
    for (int r = 0; r < 3; ++r) reg.channels[r] = pad_grid(c.regions.channels[r], pad);
    const Tensor<T> x = to_tensor<T>(MultimodalVolume(std::move(img), c.image.geometry()));
    const Tensor<T> y = to_tensor<T>(reg);
    const Tensor<T> ys = slice_targets(y);
    auto out = net.forward(Var<T>(x));
    s.loss += total_loss(out.branch_logits, out.slice_logits, y, ys, loss_cfg).total_value();

    const auto d = dims5(y.shape());
    for (int r = 0; r < 3; ++r) {
      Grid3<std::uint8_t> pred({d.x, d.y, d.z});
      const T* lg = out.seg_logits.value().data() + r * d.spatial();
      for (std::size_t i = 0; i < pred.size(); ++i) pred.data[i] = lg[i] >= T(0);
      pred = unpad_grid(pred, pad);
      s.dice[r] += dice_score(pred, c.regions.channels[r]);
      for (std::int64_t k = pad.before[2]; k < d.z - pad.after[2]; ++k) {
        const bool predicted = out.slice_logits.value()[r * d.z + k] >= T(0);
        const bool truth = ys[r * d.z + k] > T(0.5);
        slice_correct += predicted == truth;
        ++slice_total;
      }
    }
  }
  const double n = static_cast<double>(cases.size());
  s.loss /= n;
  for (auto& v : s.dice) v /= n;
  s.slice_accuracy = slice_total ? static_cast<double>(slice_correct) / static_cast<double>(slice_total) : 0.0;
  s.cases = cases.size();
  net.set_training(was_training);
  return s;
}

struct EpochRecord {
  int epoch = 0;
  long long step = 0;
  double train_loss = 0;  // mean over the epoch's batches
  std::optional<EvalSummary> val;
};

struct TrainCallbacks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<bool(const EpochRecord&)> stop;  // checked after each epoch
};

struct FitOptions {
  TrainConfig train;
  SchedulerConfig scheduler;  // batches_per_epoch is filled in by fit
  LossConfig loss;
  AugmentConfig augment;
  std::filesystem::path output_dir;  // empty: no files written
  nlohmann::json checkpoint_metadata = nlohmann::json::object();
};

struct FitResult {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::optional<EvalSummary> best_val;
  int best_epoch = -1;
  std::filesystem::path best_checkpoint, last_checkpoint, log_path;
};

template <class T>
FitResult fit(nn::SegmentationNet<T>& net, const std::vector<PreparedCase>& train_cases,
              const std::vector<PreparedCase>& val_cases, FitOptions opt, const TrainCallbacks& cb = {}) {
  opt.train.validate();
  opt.loss.validate();
  opt.augment.validate();
  if (train_cases.empty()) throw ConfigError("train: no training cases");
  const std::int64_t mult = net.config().size_multiple();
  for (auto c : opt.augment.crop_size)
    if (c % mult != 0)
      throw ConfigError("augment.crop_size: patch extents must be multiples of " + std::to_string(mult));

  const int bs = opt.train.batch_size;
  opt.scheduler.batches_per_epoch = static_cast<int>((train_cases.size() + bs - 1) / bs);
  opt.scheduler.validate();

  FitResult res;
  std::ofstream log;
  if (!opt.output_dir.empty()) {
    std::filesystem::create_directories(opt.output_dir);
    res.log_path = opt.output_dir / "train_log.jsonl";
    log.open(res.log_path);
    if (!log) throw ConfigError("cannot write " + res.log_path.string());
  }
  auto write_log = [&](const nlohmann::json& j) {
    if (log) log << j.dump() << "\n" << std::flush;
  };

  Rng order_rng(opt.train.seed ^ 0x5851F42D4C957F2Dull);
  Rng aug_rng(opt.augment.seed ^ opt.train.seed ^ 0x2545F4914F6CDD1Dull);
  net.reseed_dropout(opt.train.seed ^ 0x14057B7EF767814Full);
  Adam<T> adam(net.parameters(), opt.train.optimizer);

  auto save = [&](const std::filesystem::path& p, int epoch, long long step, const std::optional<EvalSummary>& val) {
    nlohmann::json meta = opt.checkpoint_metadata;
    meta["epoch"] = epoch;
    meta["step"] = step;
    if (val) meta["validation"] = to_json(*val);
    nlohmann::json ids = nlohmann::json::array();
    for (const auto& c : val_cases) ids.push_back(c.id);
    meta["val_ids"] = ids;
    nn::save_checkpoint(p, net, meta);
  };

  long long step = 0;
  const long long total_steps = opt.scheduler.total_steps();
  const long long step_limit = opt.train.max_steps > 0 ? std::min(opt.train.max_steps, total_steps) : total_steps;
  std::vector<std::size_t> order(train_cases.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < opt.scheduler.total_epochs && step < step_limit; ++epoch) {
    order_rng.shuffle(order);
    net.set_training(true);
    double epoch_loss = 0;
    int epoch_batches = 0;
    for (std::size_t b0 = 0; b0 < order.size() && step < step_limit; b0 += bs) {
      std::vector<Tensor<T>> xs, ys;
      for (std::size_t b = b0; b < std::min(order.size(), b0 + bs); ++b) {
        const auto& c = train_cases[order[b]];
        const AugmentPlan plan = opt.train.augment ? draw_augment_plan(c.image.shape(), opt.augment, aug_rng)
                                                   : centred_plan(c.image.shape(), opt.augment.crop_size);
        auto [img, reg] = apply_augment_plan(c.image, c.regions, plan, opt.augment.crop_size);
        xs.push_back(to_tensor<T>(img));
        ys.push_back(to_tensor<T>(reg));
      }
      const Tensor<T> x = stack_batch(xs), y = stack_batch(ys);
      const Tensor<T> ysl = slice_targets(y);

      const double lr = opt.scheduler.lr_at(step);
      adam.zero_grad();
      auto out = net.forward(Var<T>(x));
      auto loss = total_loss(out.branch_logits, out.slice_logits, y, ysl, opt.loss);
      const double lv = loss.total_value();
      if (!std::isfinite(lv)) throw NumericalDivergence(step, "non-finite training loss");
      loss.total.backward();
      adam.step(lr);

      StepRecord rec{step, epoch, lr, lv, loss.focal_seg, loss.dice, loss.focal_cls, loss.bce};
      res.steps.push_back(rec);
      write_log(to_json(rec));
      if (cb.on_step) cb.on_step(rec);
      epoch_loss += lv;
      ++epoch_batches;
      ++step;
    }

    EpochRecord er{epoch, step, epoch_loss / std::max(1, epoch_batches), std::nullopt};
    const bool last_epoch = epoch + 1 == opt.scheduler.total_epochs || step >= step_limit;
    if (!val_cases.empty() && ((epoch + 1) % opt.train.validate_every == 0 || last_epoch)) {
      er.val = evaluate_prepared(net, val_cases, opt.loss);
      if (!res.best_val || er.val->mean_dice() > res.best_val->mean_dice()) {
        res.best_val = er.val;
        res.best_epoch = epoch;
        if (!opt.output_dir.empty()) {
          res.best_checkpoint = opt.output_dir / "best.ckpt";
          save(res.best_checkpoint, epoch, step, er.val);
        }
      }
    }
    nlohmann::json ej{{"type", "epoch"}, {"epoch", epoch}, {"step", step}, {"train_loss", er.train_loss}};
    if (er.val) ej["validation"] = to_json(*er.val);
    write_log(ej);
    res.epochs.push_back(er);
    if (cb.on_epoch) cb.on_epoch(er);
    if (cb.stop && cb.stop(er)) break;
  }

  if (!opt.output_dir.empty()) {
    res.last_checkpoint = opt.output_dir / "last.ckpt";
    save(res.last_checkpoint, res.epochs.empty() ? 0 : res.epochs.back().epoch, step,
         res.epochs.empty() ? std::nullopt : res.epochs.back().val);
  }
  net.set_training(false);
  return res;
}

}  // namespace tumorseg
