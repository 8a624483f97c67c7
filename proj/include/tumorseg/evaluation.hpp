#pragma once

// Dataset-level evaluation: match predicted label maps to ground-truth cases
// by id and tabulate per-region metrics.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tumorseg/io/case_io.hpp"
#include "tumorseg/metrics.hpp"

namespace tumorseg {

struct CaseResult {
  std::string id;
  CaseMetrics metrics;
};

struct SkippedCase {
  std::string id;
  std::string reason;
};

struct EvaluationReport {
  std::vector<CaseResult> cases;
  std::vector<SkippedCase> skipped;

  bool complete() const { return skipped.empty(); }

  CaseMetrics mean() const {
    CaseMetrics m;
    if (cases.empty()) {
      for (auto& r : m.regions) r = {NAN, NAN, NAN, NAN};
      return m;
    }
    for (const auto& c : cases)
      for (int r = 0; r < 3; ++r) {
        m.regions[r].dice += c.metrics.regions[r].dice;
        m.regions[r].hd95 += c.metrics.regions[r].hd95;
        m.regions[r].sensitivity += c.metrics.regions[r].sensitivity;
        m.regions[r].specificity += c.metrics.regions[r].specificity;
      }
    const double n = static_cast<double>(cases.size());
    for (auto& r : m.regions) {
      r.dice /= n;
      r.hd95 /= n;
      r.sensitivity /= n;
      r.specificity /= n;
    }
    return m;
  }
};

// Prediction file for a case: <dir>/<id>.nii.gz or <dir>/<id>.nii.
inline std::optional<fs::path> find_prediction(const fs::path& dir, const std::string& id) {
  for (const char* ext : {".nii.gz", ".nii"}) {
    const fs::path p = dir / (id + ext);
    if (fs::exists(p)) return p;
  }
  return std::nullopt;
}

inline LabelVolume read_label_map(const fs::path& p) {
  auto raw = nifti::read<double>(p);
  Grid3<std::uint8_t> out(raw.grid.shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = raw.grid.data[i];
    if (v != std::round(v) || !LabelVolume::is_valid_label(static_cast<int>(v)))
      throw InvalidLabel(p.string() + ": label value " + std::to_string(v) + " not in {0,1,2,4}");
    out.data[i] = static_cast<std::uint8_t>(v);
  }
  return LabelVolume(std::move(out), raw.geometry);
}

inline std::string prediction_id(const fs::path& p) {
  std::string name = p.filename().string();
  for (const std::string ext : {".nii.gz", ".nii"})
    if (name.size() > ext.size() && name.compare(name.size() - ext.size(), ext.size(), ext) == 0)
      return name.substr(0, name.size() - ext.size());
  return {};
}

// Ground truth comes from `gt_root` (manifest or case directories); only the
// label files are read. Unmatched cases on either side are reported as skipped.
inline EvaluationReport evaluate_dataset(const fs::path& pred_dir, const fs::path& gt_root,
                                         const MetricsConfig& cfg = {}) {
  if (!fs::is_directory(pred_dir)) throw ConfigError("prediction directory not found: " + pred_dir.string());
  const auto entries = enumerate_cases(gt_root);
  EvaluationReport rep;
  std::map<std::string, bool> gt_ids;
  for (const auto& e : entries) {
    gt_ids[e.id] = true;
    if (!e.label || !fs::exists(*e.label)) {
      rep.skipped.push_back({e.id, "no ground-truth label"});
      continue;
    }
    const auto pred_path = find_prediction(pred_dir, e.id);
    if (!pred_path) {
      rep.skipped.push_back({e.id, "no prediction"});
      continue;
    }
    try {
      const auto gt = read_label_map(*e.label);
      const auto pred = read_label_map(*pred_path);
      if (pred.shape() != gt.shape()) {
        rep.skipped.push_back({e.id, "prediction shape differs from ground truth"});
        continue;
      }
      rep.cases.push_back(
          {e.id, evaluate_case(labels_to_regions(pred), labels_to_regions(gt), gt.geometry().spacing, cfg)});
    } catch (const Error& err) {
      rep.skipped.push_back({e.id, err.what()});
    }
  }
  std::vector<fs::path> preds;
  for (const auto& f : fs::directory_iterator(pred_dir))
    if (f.is_regular_file()) preds.push_back(f.path());
  std::sort(preds.begin(), preds.end());
  for (const auto& p : preds) {
    const auto id = prediction_id(p);
    if (!id.empty() && !gt_ids.count(id)) rep.skipped.push_back({id, "no matching ground-truth case"});
  }
  return rep;
}

namespace detail {
inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream s;
  s << std::setprecision(6) << std::fixed << v;
  return s.str();
}
}  // namespace detail

// One row per case and a final mean row labelled `method`.
inline void write_summary_csv(const fs::path& path, const EvaluationReport& rep, const std::string& method) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "Method,Dice ET,Dice WT,Dice TC,HD95 ET,HD95 WT,HD95 TC\n";
  auto row = [&](const std::string& name, const CaseMetrics& m) {
    out << name << ',' << detail::fmt(m[Region::et].dice) << ',' << detail::fmt(m[Region::wt].dice) << ','
        << detail::fmt(m[Region::tc].dice) << ',' << detail::fmt(m[Region::et].hd95) << ','
        << detail::fmt(m[Region::wt].hd95) << ',' << detail::fmt(m[Region::tc].hd95) << '\n';
  };
  for (const auto& c : rep.cases) row(c.id, c.metrics);
  row(method, rep.mean());
}

inline void write_detail_csv(const fs::path& path, const EvaluationReport& rep) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "Case,Region,Dice,HD95,Sensitivity,Specificity\n";
  for (const auto& c : rep.cases)
    for (Region r : {Region::et, Region::wt, Region::tc}) {
      const auto& m = c.metrics[r];
      out << c.id << ',' << kRegionNames[static_cast<int>(r)] << ',' << detail::fmt(m.dice) << ',' << detail::fmt(m.hd95) << ','
          << detail::fmt(m.sensitivity) << ',' << detail::fmt(m.specificity) << '\n';
    }
  for (const auto& s : rep.skipped) out << s.id << ",skipped,,,,\n";
}

}  // namespace tumorseg
