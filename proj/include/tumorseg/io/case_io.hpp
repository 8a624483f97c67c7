#pragma once

// Case loading. A case is either a directory whose files follow a naming
// pattern, or an explicit manifest entry listing the five paths.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tumorseg/data_model.hpp"
#include "tumorseg/io/nifti.hpp"

namespace tumorseg {

namespace fs = std::filesystem;

// File name patterns; "{id}" is replaced by the case id (the directory name).
// Several patterns per modality may be listed; the first existing file wins.
struct CaseLayout {
  std::array<std::vector<std::string>, 4> modality_patterns{
      std::vector<std::string>{"{id}_t1.nii.gz", "{id}_t1.nii"},
      std::vector<std::string>{"{id}_t1ce.nii.gz", "{id}_t1ce.nii", "{id}_t1gd.nii.gz", "{id}_t1gd.nii"},
      std::vector<std::string>{"{id}_t2.nii.gz", "{id}_t2.nii"},
      std::vector<std::string>{"{id}_flair.nii.gz", "{id}_flair.nii"}};
  std::vector<std::string> label_patterns{"{id}_seg.nii.gz", "{id}_seg.nii"};
};

struct CaseEntry {
  std::string id;
  std::array<fs::path, 4> modalities;
  std::optional<fs::path> label;
};

struct Case {
  std::string id;
  MultimodalVolume image;
  std::optional<LabelVolume> label;
};

inline std::string expand_pattern(const std::string& pattern, const std::string& id) {
  std::string out = pattern;
  for (std::size_t pos; (pos = out.find("{id}")) != std::string::npos;) out.replace(pos, 4, id);
  return out;
}

// Resolves a case directory against a layout. Missing modalities stay empty
// here and are reported by load_case.
inline CaseEntry resolve_case_dir(const fs::path& dir, const CaseLayout& layout = {}) {
  CaseEntry e;
  e.id = dir.filename().string();
  if (e.id.empty()) e.id = dir.parent_path().filename().string();
  for (int m = 0; m < 4; ++m)
    for (const auto& pat : layout.modality_patterns[m]) {
      const fs::path p = dir / expand_pattern(pat, e.id);
      if (fs::exists(p)) {
        e.modalities[m] = p;
        break;
      }
    }
  for (const auto& pat : layout.label_patterns) {
    const fs::path p = dir / expand_pattern(pat, e.id);
    if (fs::exists(p)) {
      e.label = p;
      break;
    }
  }
  return e;
}

inline Case load_case(const CaseEntry& entry) {
  std::array<Grid3<float>, 4> grids;
  Geometry geometry;
  for (int m = 0; m < 4; ++m) {
    const auto& p = entry.modalities[m];
    if (p.empty() || !fs::exists(p))
      throw MissingModality("case " + entry.id + ": no " + kModalityNames[m] + " file" +
                            (p.empty() ? std::string() : " at " + p.string()));
    auto img = nifti::read<float>(p);
    if (m == 0) {
      geometry = img.geometry;
    } else {
      if (img.grid.shape != grids[0].shape)
        throw GeometryMismatch("case " + entry.id + ": " + kModalityNames[m] + " shape differs from t1");
      for (int a = 0; a < 3; ++a)
        if (std::fabs(img.geometry.spacing[a] - geometry.spacing[a]) > 1e-4 * geometry.spacing[a])
          throw GeometryMismatch("case " + entry.id + ": " + kModalityNames[m] + " spacing differs from t1");
    }
    grids[m] = std::move(img.grid);
  }
  Case c{entry.id, MultimodalVolume(std::move(grids), geometry), std::nullopt};
  if (entry.label) {
    if (!fs::exists(*entry.label)) throw NiftiError("case " + entry.id + ": label file " + entry.label->string() + " missing");
    auto raw = nifti::read<double>(*entry.label);
    if (raw.grid.shape != c.image.shape())
      throw GeometryMismatch("case " + entry.id + ": label shape differs from the image");
    Grid3<std::uint8_t> labels(raw.grid.shape);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const double v = raw.grid.data[i];
      if (v != std::round(v) || !LabelVolume::is_valid_label(static_cast<int>(v)))
        throw InvalidLabel("case " + entry.id + ": label value " + std::to_string(v) + " not in {0,1,2,4}");
      labels.data[i] = static_cast<std::uint8_t>(v);
    }
    c.label = LabelVolume(std::move(labels), geometry);
  }
  return c;
}

inline Case load_case(const fs::path& case_directory, const CaseLayout& layout = {}) {
  if (!fs::is_directory(case_directory)) throw MissingModality("not a case directory: " + case_directory.string());
  return load_case(resolve_case_dir(case_directory, layout));
}

// Manifest: {"cases": [{"id": ..., "t1": ..., "t1gd": ..., "t2": ..., "flair": ..., "label": ...}]}
// with paths relative to the manifest's directory.
inline std::vector<CaseEntry> read_manifest(const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw ConfigError("manifest: cannot open " + manifest.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("manifest: " + std::string(e.what()));
  }
  const fs::path base = manifest.parent_path();
  std::vector<CaseEntry> out;
  if (!j.contains("cases") || !j["cases"].is_array()) throw ConfigError("manifest.cases: expected an array");
  for (const auto& c : j["cases"]) {
    CaseEntry e;
    if (!c.contains("id")) throw ConfigError("manifest.cases[].id: missing");
    e.id = c["id"].get<std::string>();
    for (int m = 0; m < 4; ++m)
      if (c.contains(kModalityNames[m])) e.modalities[m] = base / c[kModalityNames[m]].get<std::string>();
    if (c.contains("label") && !c["label"].is_null()) e.label = base / c["label"].get<std::string>();
    out.push_back(std::move(e));
  }
  return out;
}

inline void write_manifest(const fs::path& manifest, const std::vector<CaseEntry>& cases) {
  const fs::path base = manifest.parent_path();
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : cases) {
    nlohmann::json c;
    c["id"] = e.id;
    for (int m = 0; m < 4; ++m) c[kModalityNames[m]] = fs::relative(e.modalities[m], base).generic_string();
    if (e.label) c["label"] = fs::relative(*e.label, base).generic_string();
    arr.push_back(c);
  }
  if (!base.empty()) fs::create_directories(base);
  std::ofstream(manifest) << nlohmann::json{{"cases", arr}}.dump(2) << "\n";
}

// Cases under `root`: the manifest.json there if present, otherwise every
// subdirectory, sorted by name.
inline std::vector<CaseEntry> enumerate_cases(const fs::path& root, const CaseLayout& layout = {}) {
  if (!fs::is_directory(root)) throw ConfigError("dataset directory not found: " + root.string());
  if (fs::exists(root / "manifest.json")) return read_manifest(root / "manifest.json");
  std::vector<fs::path> dirs;
  for (const auto& d : fs::directory_iterator(root))
    if (d.is_directory()) dirs.push_back(d.path());
  std::sort(dirs.begin(), dirs.end());
  std::vector<CaseEntry> out;
  for (const auto& d : dirs) out.push_back(resolve_case_dir(d, layout));
  return out;
}

}  // namespace tumorseg
