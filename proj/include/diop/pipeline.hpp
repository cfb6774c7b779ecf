#pragma once

// Stage glue shared by the CLI and the annotation service: configuration,
// per-ROI loading, instance derivation and dataset-wide feature extraction.

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "diop/common.hpp"
#include "diop/features.hpp"
#include "diop/instances.hpp"
#include "diop/learn/evaluate.hpp"
#include "diop/raster.hpp"

namespace diop {

enum class DeriveMethod { Weak, ConnectedComponents };

inline DeriveMethod parse_derive_method(std::string_view s) {
  if (s == "weak") return DeriveMethod::Weak;
  if (s == "cc") return DeriveMethod::ConnectedComponents;
  throw ValidationError("unknown derivation method '" + std::string(s) + "' (expected weak or cc)");
}

struct PipelineConfig {
  FeatureOptions features;
  bool include_duct_count = false;
  DeriveMethod method = DeriveMethod::Weak;
  AssignmentPolicy policy = AssignmentPolicy::SmallestBox;
  BaselineParams baseline;
  EvalConfig learn;
  int repeats = 100;
  std::uint64_t seed = 0;
  unsigned jobs = 1;

  void validate() const {
    if (features.connectivity != 4 && features.connectivity != 8)
      throw ValidationError("features.connectivity must be 4 or 8");
    if (baseline.connectivity != 4 && baseline.connectivity != 8)
      throw ValidationError("instances.connectivity must be 4 or 8");
    if (baseline.closing_radius < 0) throw ValidationError("instances.closing_radius must be >= 0");
    if (baseline.min_area < 0) throw ValidationError("instances.min_area must be >= 0");
    if (learn.forest.n_trees < 1) throw ValidationError("learn.n_trees must be >= 1");
    if (learn.forest.min_leaf < 1) throw ValidationError("learn.min_leaf must be >= 1");
    if (learn.forest.max_depth < 0) throw ValidationError("learn.max_depth must be >= 0");
    if (learn.forest.features_per_split < 0) throw ValidationError("learn.features_per_split must be >= 0");
    if (learn.pca_k < 1) throw ValidationError("learn.pca_k must be >= 1");
    for (int s : learn.forest_size_candidates)
      if (s < 1) throw ValidationError("learn.forest_sizes entries must be >= 1");
    if (repeats < 1) throw ValidationError("learn.repeats must be >= 1");
    if (jobs < 1) throw ValidationError("jobs must be >= 1");
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ValidationError("unknown configuration key '" + where + "." + k + "'");
}

}  // namespace detail

/// Applies a configuration document on top of `cfg`. Unknown keys are
/// rejected.
inline void apply_config_json(PipelineConfig& cfg, const nlohmann::json& j) {
  try {
    detail::reject_unknown(j, {"features", "instances", "learn", "seed", "jobs"}, "config");
    if (j.contains("features")) {
      const auto& f = j["features"];
      detail::reject_unknown(f, {"connectivity", "pooling", "include_duct_count"}, "features");
      if (f.contains("connectivity")) cfg.features.connectivity = f["connectivity"].get<int>();
      if (f.contains("pooling")) {
        const auto p = f["pooling"].get<std::string>();
        if (p == "mean")
          cfg.features.pooling = FeatureOptions::Pooling::Mean;
        else if (p == "area_weighted")
          cfg.features.pooling = FeatureOptions::Pooling::AreaWeighted;
        else
          throw ValidationError("features.pooling must be mean or area_weighted");
      }
      if (f.contains("include_duct_count")) cfg.include_duct_count = f["include_duct_count"].get<bool>();
    }
    if (j.contains("instances")) {
      const auto& i = j["instances"];
      detail::reject_unknown(i, {"method", "policy", "closing_radius", "connectivity", "min_area"}, "instances");
      if (i.contains("method")) cfg.method = parse_derive_method(i["method"].get<std::string>());
      if (i.contains("policy")) cfg.policy = parse_policy(i["policy"].get<std::string>());
      if (i.contains("closing_radius")) cfg.baseline.closing_radius = i["closing_radius"].get<int>();
      if (i.contains("connectivity")) cfg.baseline.connectivity = i["connectivity"].get<int>();
      if (i.contains("min_area")) cfg.baseline.min_area = i["min_area"].get<long long>();
    }
    if (j.contains("learn")) {
      const auto& l = j["learn"];
      detail::reject_unknown(l, {"n_trees", "max_depth", "min_leaf", "features_per_split", "bootstrap", "pca_k",
                                 "pca", "repeats", "forest_sizes"},
                             "learn");
      if (l.contains("n_trees")) cfg.learn.forest.n_trees = l["n_trees"].get<int>();
      if (l.contains("max_depth")) cfg.learn.forest.max_depth = l["max_depth"].get<int>();
      if (l.contains("min_leaf")) cfg.learn.forest.min_leaf = l["min_leaf"].get<int>();
      if (l.contains("features_per_split")) cfg.learn.forest.features_per_split = l["features_per_split"].get<int>();
      if (l.contains("bootstrap")) cfg.learn.forest.bootstrap = l["bootstrap"].get<bool>();
      if (l.contains("pca_k")) cfg.learn.pca_k = l["pca_k"].get<int>();
      if (l.contains("pca")) {
        const auto m = l["pca"].get<std::string>();
        if (m == "auto")
          cfg.learn.pca_mode = EvalConfig::PcaMode::Auto;
        else if (m == "never")
          cfg.learn.pca_mode = EvalConfig::PcaMode::Never;
        else if (m == "always")
          cfg.learn.pca_mode = EvalConfig::PcaMode::Always;
        else
          throw ValidationError("learn.pca must be auto, never or always");
      }
      if (l.contains("repeats")) cfg.repeats = l["repeats"].get<int>();
      if (l.contains("forest_sizes")) cfg.learn.forest_size_candidates = l["forest_sizes"].get<std::vector<int>>();
    }
    if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("jobs")) cfg.jobs = j["jobs"].get<unsigned>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("configuration: ") + e.what());
  }
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  PipelineConfig cfg;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  apply_config_json(cfg, j);
  return cfg;
}

// ---------------------------------------------------------------------------
// Dataset access

struct Dataset {
  std::filesystem::path root;  // manifest directory
  std::vector<RoiRecord> records;

  static Dataset open(const std::filesystem::path& manifest) {
    Dataset d;
    d.root = manifest.parent_path();
    d.records = read_manifest(manifest);
    std::set<std::string> seen;
    for (const auto& r : d.records)
      if (!seen.insert(r.id).second) throw ValidationError("duplicate ROI id '" + r.id + "' in manifest");
    return d;
  }

  const RoiRecord* find(const std::string& id) const {
    for (const auto& r : records)
      if (r.id == id) return &r;
    return nullptr;
  }

  std::filesystem::path resolve(const std::string& p) const {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : root / path;
  }

  LabelRaster raster(const RoiRecord& r) const { return read_label_raster(resolve(r.raster)); }

  /// Annotation document location: the manifest entry, else annotations/<id>.json.
  std::filesystem::path boxes_path(const RoiRecord& r) const {
    return r.boxes ? resolve(*r.boxes) : root / "annotations" / (r.id + ".json");
  }

  /// Boxes clamped to the raster; a missing document means no boxes.
  std::vector<BoundingBox> boxes(const RoiRecord& r, int width, int height,
                                 std::vector<std::string>* warnings = nullptr) const {
    const auto path = boxes_path(r);
    if (!std::filesystem::exists(path)) return {};
    return clamp_boxes(read_boxes(path).boxes, width, height, warnings);
  }

  std::map<std::string, Split> splits() const {
    std::map<std::string, Split> out;
    for (const auto& r : records) out[r.id] = r.split;
    return out;
  }
};

inline InstanceMap derive_instances(const LabelRaster& raster, const std::vector<BoundingBox>& boxes,
                                    const PipelineConfig& cfg) {
  const auto mask = binarize(raster);
  if (cfg.method == DeriveMethod::ConnectedComponents) return derive_instances_cc(mask, cfg.baseline);
  return derive_instances_weak(mask, boxes, cfg.policy);
}

inline std::filesystem::path instance_raster_path(const std::filesystem::path& dir, const std::string& id) {
  return dir / (id + ".pgm");
}

/// Derives and writes an instance raster (+ sidecar) for every ROI.
inline std::vector<std::string> derive_dataset(const Dataset& data, const PipelineConfig& cfg,
                                               const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());
  std::vector<std::vector<std::string>> warnings(data.records.size());
  parallel_for(data.records.size(), cfg.jobs, [&](std::size_t i) {
    const auto& rec = data.records[i];
    const auto raster = data.raster(rec);
    std::vector<std::string> w;
    const auto boxes = cfg.method == DeriveMethod::Weak ? data.boxes(rec, raster.width, raster.height, &w)
                                                        : std::vector<BoundingBox>{};
    for (auto& s : w) warnings[i].push_back(rec.id + ": " + s);
    write_instance_map(derive_instances(raster, boxes, cfg), instance_raster_path(out_dir, rec.id));
  });
  std::vector<std::string> all;
  for (auto& w : warnings) all.insert(all.end(), w.begin(), w.end());
  return all;
}

/// Feature rows for every ROI, reading instance rasters from `instances_dir`.
inline std::vector<FeatureRow> extract_dataset(const Dataset& data, const std::filesystem::path& instances_dir,
                                               const PipelineConfig& cfg) {
  std::vector<FeatureRow> rows(data.records.size());
  parallel_for(data.records.size(), cfg.jobs, [&](std::size_t i) {
    const auto& rec = data.records[i];
    const auto raster = data.raster(rec);
    const auto inst = read_instance_map(instance_raster_path(instances_dir, rec.id));
    if (inst.width() != raster.width || inst.height() != raster.height)
      throw DimensionError("instance raster for '" + rec.id + "' does not match its label raster");
    rows[i] = {rec.id, rec.diagnosis, extract_features(raster, inst, cfg.features)};
  });
  return rows;
}

}  // namespace diop
