#pragma once

// Tissue histogram and co-occurrence features at three region levels (whole
// ROI, duct bounding box, duct mask), pooled into one named vector per ROI.

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "diop/common.hpp"
#include "diop/instances.hpp"
#include "diop/raster.hpp"

namespace diop {

enum class RegionKind { Roi, Box, Mask };

/// Pixel set over which features are computed. `bounds` always encloses the
/// member pixels; mask regions additionally test the instance id.
struct Region {
  RegionKind kind = RegionKind::Roi;
  BoundingBox bounds;
  const Grid<std::uint32_t>* ids = nullptr;
  std::uint32_t id = 0;

  static Region roi(const LabelRaster& r) { return {RegionKind::Roi, {0, 0, r.width, r.height}}; }
  static Region box(const BoundingBox& b) { return {RegionKind::Box, b}; }
  static Region mask(const Grid<std::uint32_t>& ids, std::uint32_t id, const BoundingBox& bounds) {
    return {RegionKind::Mask, bounds, &ids, id};
  }
  static Region mask(const InstanceMap& m, const InstanceInfo& inst) {
    return mask(m.ids, inst.id, inst.box);
  }

  bool contains(int x, int y) const {
    if (!bounds.contains(x, y)) return false;
    return kind != RegionKind::Mask || ids->at(x, y) == id;
  }
};

inline constexpr int kBoundary = kNumLabels;  // BD pseudo-label index
inline constexpr int kCoLabels = kNumLabels + 1;

using Histogram = std::array<double, kNumLabels>;

inline Histogram histogram_features(const LabelRaster& raster, const Region& region) {
  std::array<long long, kNumLabels> counts{};
  long long total = 0;
  const auto& b = region.bounds;
  for (int y = b.y; y < b.bottom(); ++y)
    for (int x = b.x; x < b.right(); ++x)
      if (region.contains(x, y)) {
        ++counts[code(raster.at(x, y))];
        ++total;
      }
  if (total == 0) throw EmptyRegionError("histogram over an empty region");
  Histogram h{};
  for (int l = 0; l < kNumLabels; ++l) h[l] = static_cast<double>(counts[l]) / total;
  return h;
}

/// Symmetric tally of neighbour events over the 8 tissue labels plus BD.
struct CooccurrenceMatrix {
  std::array<std::array<long long, kCoLabels>, kCoLabels> counts{};
  long long events = 0;

  void record(int a, int b) {
    ++counts[a][b];
    if (a != b) ++counts[b][a];
    ++events;
  }

  double frequency(int a, int b) const {
    return events == 0 ? 0.0 : static_cast<double>(counts[a][b]) / static_cast<double>(events);
  }

  /// Upper triangle (with diagonal) over the first `n` labels, row-major.
  std::vector<double> upper(int n) const {
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(n) * (n + 1) / 2);
    for (int a = 0; a < n; ++a)
      for (int b = a; b < n; ++b) out.push_back(frequency(a, b));
    return out;
  }
};

/// Every region pixel visits each grid neighbour once. An in-region neighbour
/// records its label pair; an out-of-region neighbour (including outside the
/// image) records a BD event when `include_bd` is set.
inline CooccurrenceMatrix cooccurrence_features(const LabelRaster& raster, const Region& region,
                                                bool include_bd, int connectivity = 4) {
  static constexpr int kDx[8] = {1, -1, 0, 0, 1, 1, -1, -1};
  static constexpr int kDy[8] = {0, 0, 1, -1, 1, -1, 1, -1};
  if (connectivity != 4 && connectivity != 8) throw ValidationError("connectivity must be 4 or 8");
  CooccurrenceMatrix m;
  bool any = false;
  const auto& b = region.bounds;
  for (int y = b.y; y < b.bottom(); ++y)
    for (int x = b.x; x < b.right(); ++x) {
      if (!region.contains(x, y)) continue;
      any = true;
      const int l = code(raster.at(x, y));
      for (int k = 0; k < connectivity; ++k) {
        const int nx = x + kDx[k], ny = y + kDy[k];
        if (raster.inside(nx, ny) && region.contains(nx, ny))
          m.record(l, code(raster.at(nx, ny)));
        else if (include_bd)
          m.record(l, kBoundary);
      }
    }
  if (!any) throw EmptyRegionError("co-occurrence over an empty region");
  return m;
}

// ---------------------------------------------------------------------------
// Feature layout

inline constexpr std::size_t kRoiBlock = kNumLabels + kNumLabels * (kNumLabels + 1) / 2;  // 44
inline constexpr std::size_t kDuctBlock = kNumLabels + kCoLabels * (kCoLabels + 1) / 2;   // 53
inline constexpr std::size_t kFeatureCount = kRoiBlock + 2 * kDuctBlock;                  // 150

enum class FeatureLevel { Roi, Box, Mask };

inline std::string_view level_tag(FeatureLevel l) {
  switch (l) {
    case FeatureLevel::Roi: return "ROI";
    case FeatureLevel::Box: return "bounding box";
    case FeatureLevel::Mask: return "duct mask";
  }
  return "";
}

inline std::size_t level_offset(FeatureLevel l) {
  switch (l) {
    case FeatureLevel::Roi: return 0;
    case FeatureLevel::Box: return kRoiBlock;
    case FeatureLevel::Mask: return kRoiBlock + kDuctBlock;
  }
  return 0;
}

inline std::size_t level_size(FeatureLevel l) { return l == FeatureLevel::Roi ? kRoiBlock : kDuctBlock; }

namespace detail {

inline std::string co_label(int i) {
  return i == kBoundary ? std::string("BD") : std::string(kLabelNames[i]);
}

inline void append_block_names(std::vector<std::string>& out, FeatureLevel level) {
  const std::string tag(level_tag(level));
  const int n = level == FeatureLevel::Roi ? kNumLabels : kCoLabels;
  for (int l = 0; l < kNumLabels; ++l) out.push_back(std::string(kLabelNames[l]) + " freq in " + tag);
  for (int a = 0; a < n; ++a)
    for (int b = a; b < n; ++b) {
      // BD pairs are written BD-first: "BD & BE in duct mask".
      if (b == kBoundary)
        out.push_back("BD & " + co_label(a) + " in " + tag);
      else
        out.push_back(co_label(a) + " & " + co_label(b) + " in " + tag);
    }
}

}  // namespace detail

/// Canonical names of the 150 features, in vector order.
inline const std::vector<std::string>& feature_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    n.reserve(kFeatureCount);
    detail::append_block_names(n, FeatureLevel::Roi);
    detail::append_block_names(n, FeatureLevel::Box);
    detail::append_block_names(n, FeatureLevel::Mask);
    return n;
  }();
  return names;
}

/// Column indices covering the given levels, in vector order.
inline std::vector<std::size_t> level_columns(std::initializer_list<FeatureLevel> levels) {
  std::vector<std::size_t> cols;
  for (auto l : {FeatureLevel::Roi, FeatureLevel::Box, FeatureLevel::Mask}) {
    if (std::find(levels.begin(), levels.end(), l) == levels.end()) continue;
    for (std::size_t i = 0; i < level_size(l); ++i) cols.push_back(level_offset(l) + i);
  }
  return cols;
}

struct FeatureVector {
  std::vector<double> values;  // kFeatureCount entries, feature_names() order
  int duct_count = 0;
  bool operator==(const FeatureVector&) const = default;
};

struct FeatureOptions {
  int connectivity = 4;
  enum class Pooling { Mean, AreaWeighted } pooling = Pooling::Mean;
};

inline std::vector<double> roi_features(const LabelRaster& raster, int connectivity = 4) {
  const auto region = Region::roi(raster);
  const auto h = histogram_features(raster, region);
  const auto co = cooccurrence_features(raster, region, false, connectivity).upper(kNumLabels);
  std::vector<double> out(h.begin(), h.end());
  out.insert(out.end(), co.begin(), co.end());
  return out;
}

inline std::vector<double> region_block(const LabelRaster& raster, const Region& region,
                                        int connectivity) {
  const auto h = histogram_features(raster, region);
  const auto co = cooccurrence_features(raster, region, true, connectivity).upper(kCoLabels);
  std::vector<double> out(h.begin(), h.end());
  out.insert(out.end(), co.begin(), co.end());
  return out;
}

/// One 53-entry block per instance over its box interior or its pixel set.
inline std::vector<std::vector<double>> duct_features(const LabelRaster& raster, const InstanceMap& inst,
                                                      FeatureLevel level, int connectivity = 4) {
  if (level == FeatureLevel::Roi) throw ValidationError("duct features need box or mask level");
  if (inst.width() != raster.width || inst.height() != raster.height)
    throw DimensionError("instance map and raster differ in size");
  std::vector<std::vector<double>> out;
  out.reserve(inst.count());
  for (const auto& i : inst.instances) {
    const auto region = level == FeatureLevel::Box ? Region::box(i.box) : Region::mask(inst, i);
    out.push_back(region_block(raster, region, connectivity));
  }
  return out;
}

/// Pools per-duct blocks and concatenates ROI, box and mask blocks. With no
/// ducts the two duct blocks are zero. `weights` (one per duct) is only read
/// for area-weighted pooling.
inline FeatureVector aggregate_features(const std::vector<double>& roi_vec,
                                        const std::vector<std::vector<double>>& per_duct_box,
                                        const std::vector<std::vector<double>>& per_duct_mask,
                                        FeatureOptions::Pooling pooling = FeatureOptions::Pooling::Mean,
                                        const std::vector<double>& weights = {}) {
  if (roi_vec.size() != kRoiBlock) throw DimensionError("ROI block must have 44 entries");
  if (per_duct_box.size() != per_duct_mask.size())
    throw DimensionError("box and mask duct lists differ in length");
  const std::size_t n = per_duct_box.size();
  if (pooling == FeatureOptions::Pooling::AreaWeighted && weights.size() != n)
    throw DimensionError("area-weighted pooling needs one weight per duct");

  auto pool = [&](const std::vector<std::vector<double>>& blocks) {
    std::vector<double> acc(kDuctBlock, 0.0);
    if (n == 0) return acc;
    double wsum = 0.0;
    for (std::size_t d = 0; d < n; ++d) {
      if (blocks[d].size() != kDuctBlock) throw DimensionError("duct block must have 53 entries");
      const double w = pooling == FeatureOptions::Pooling::Mean ? 1.0 : weights[d];
      wsum += w;
      for (std::size_t k = 0; k < kDuctBlock; ++k) acc[k] += w * blocks[d][k];
    }
    if (wsum > 0)
      for (auto& v : acc) v /= wsum;
    return acc;
  };

  FeatureVector fv;
  fv.duct_count = static_cast<int>(n);
  fv.values = roi_vec;
  const auto box = pool(per_duct_box);
  const auto mask = pool(per_duct_mask);
  fv.values.insert(fv.values.end(), box.begin(), box.end());
  fv.values.insert(fv.values.end(), mask.begin(), mask.end());
  return fv;
}

/// Full three-level extraction for one ROI.
inline FeatureVector extract_features(const LabelRaster& raster, const InstanceMap& inst,
                                      const FeatureOptions& opt = {}) {
  std::vector<double> areas;
  for (const auto& i : inst.instances) areas.push_back(static_cast<double>(i.area));
  return aggregate_features(roi_features(raster, opt.connectivity),
                            duct_features(raster, inst, FeatureLevel::Box, opt.connectivity),
                            duct_features(raster, inst, FeatureLevel::Mask, opt.connectivity),
                            opt.pooling, areas);
}

// ---------------------------------------------------------------------------
// Feature table (CSV)

struct FeatureRow {
  std::string roi_id;
  std::optional<Diagnosis> diagnosis;
  FeatureVector features;
  bool operator==(const FeatureRow&) const = default;
};

inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string encode_feature_table(const std::vector<FeatureRow>& rows) {
  std::string out = "roi_id,diagnosis,duct_count";
  for (const auto& n : feature_names()) out += "," + n;
  out += "\n";
  for (const auto& r : rows) {
    if (r.roi_id.find_first_of(",\n") != std::string::npos)
      throw ValidationError("ROI id '" + r.roi_id + "' contains a delimiter");
    out += r.roi_id;
    out += ",";
    if (r.diagnosis) out += diagnosis_name(*r.diagnosis);
    out += "," + std::to_string(r.features.duct_count);
    for (double v : r.features.values) out += "," + format_double(v);
    out += "\n";
  }
  return out;
}

inline std::vector<FeatureRow> decode_feature_table(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("feature table: missing header");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  const auto& names = feature_names();
  if (header.size() != names.size() + 3 || header[0] != "roi_id" || header[1] != "diagnosis" ||
      header[2] != "duct_count" || !std::equal(names.begin(), names.end(), header.begin() + 3))
    throw FormatError("feature table: header does not match the canonical feature names");
  std::vector<FeatureRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != header.size())
      throw FormatError("feature table line " + std::to_string(lineno) + ": wrong column count");
    FeatureRow r;
    r.roi_id = cells[0];
    if (!cells[1].empty()) r.diagnosis = parse_diagnosis(cells[1]);
    auto parse = [&](const std::string& s, auto& v) {
      const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
      if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw FormatError("feature table line " + std::to_string(lineno) + ": bad number '" + s + "'");
    };
    parse(cells[2], r.features.duct_count);
    r.features.values.resize(names.size());
    for (std::size_t k = 0; k < names.size(); ++k) parse(cells[k + 3], r.features.values[k]);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline void write_feature_table(const std::vector<FeatureRow>& rows, const std::filesystem::path& path) {
  detail::write_file(path, encode_feature_table(rows));
}

inline std::vector<FeatureRow> read_feature_table(const std::filesystem::path& path) {
  return decode_feature_table(detail::read_file(path));
}

}  // namespace diop
