#pragma once

// Duct instance maps: the connected-components baseline, box-guided weak
// derivation, and greedy IoU matching between two maps.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "diop/common.hpp"
#include "diop/raster.hpp"

namespace diop {

struct InstanceInfo {
  std::uint32_t id = 0;
  BoundingBox box;  // tight
  long long area = 0;
  bool operator==(const InstanceInfo&) const = default;
};

/// Per-pixel duct ids (0 = none) with the derived per-instance summary.
/// Always construct through `from_ids` so the summary matches the grid.
struct InstanceMap {
  Grid<std::uint32_t> ids;
  std::vector<InstanceInfo> instances;  // sorted by id

  int width() const { return ids.width; }
  int height() const { return ids.height; }
  std::size_t count() const { return instances.size(); }
  bool operator==(const InstanceMap&) const = default;

  static InstanceMap from_ids(Grid<std::uint32_t> ids) {
    std::map<std::uint32_t, std::array<long long, 5>> acc;  // x0 y0 x1 y1 area
    for (int y = 0; y < ids.height; ++y)
      for (int x = 0; x < ids.width; ++x) {
        const auto id = ids.at(x, y);
        if (id == 0) continue;
        auto [it, fresh] = acc.try_emplace(id, std::array<long long, 5>{x, y, x, y, 0});
        auto& a = it->second;
        a[0] = std::min<long long>(a[0], x);
        a[1] = std::min<long long>(a[1], y);
        a[2] = std::max<long long>(a[2], x);
        a[3] = std::max<long long>(a[3], y);
        ++a[4];
      }
    InstanceMap m;
    m.ids = std::move(ids);
    for (const auto& [id, a] : acc)
      m.instances.push_back({id,
                             {static_cast<int>(a[0]), static_cast<int>(a[1]),
                              static_cast<int>(a[2] - a[0] + 1), static_cast<int>(a[3] - a[1] + 1)},
                             a[4]});
    return m;
  }

  static InstanceMap empty(int width, int height) {
    return from_ids(Grid<std::uint32_t>(width, height, 0));
  }
};

// ---------------------------------------------------------------------------
// Morphology

namespace detail {

// One separable pass of a (2r+1) box filter along rows (horizontal) or
// columns. With `erode` false the output is set when any in-bounds pixel of
// the window is set; with `erode` true it is set when no in-bounds pixel of
// the window is clear (out-of-bounds counts as set).
inline BitMask window_pass(const BitMask& in, int r, bool horizontal, bool erode) {
  BitMask out(in.width, in.height, 0);
  const int len = horizontal ? in.width : in.height;
  const int lines = horizontal ? in.height : in.width;
  std::vector<int> prefix(static_cast<std::size_t>(len) + 1);
  for (int line = 0; line < lines; ++line) {
    auto px = [&](int k) -> std::uint8_t {
      return horizontal ? in.at(k, line) : in.at(line, k);
    };
    prefix[0] = 0;
    for (int k = 0; k < len; ++k) prefix[k + 1] = prefix[k] + ((px(k) != 0) != erode ? 1 : 0);
    for (int k = 0; k < len; ++k) {
      const int lo = std::max(0, k - r), hi = std::min(len - 1, k + r);
      const int hits = prefix[hi + 1] - prefix[lo];
      const std::uint8_t v = erode ? (hits == 0) : (hits > 0);
      if (horizontal)
        out.at(k, line) = v;
      else
        out.at(line, k) = v;
    }
  }
  return out;
}

}  // namespace detail

inline BitMask dilate(const BitMask& mask, int radius) {
  if (radius <= 0) return mask;
  return detail::window_pass(detail::window_pass(mask, radius, true, false), radius, false, false);
}

inline BitMask erode(const BitMask& mask, int radius) {
  if (radius <= 0) return mask;
  return detail::window_pass(detail::window_pass(mask, radius, true, true), radius, false, true);
}

/// Square-element closing. Erosion treats the outside of the raster as
/// foreground, so the result always contains the input.
inline BitMask morphological_close(const BitMask& mask, int radius) {
  if (radius < 0) throw ValidationError("closing radius must be >= 0");
  return erode(dilate(mask, radius), radius);
}

// ---------------------------------------------------------------------------
// Connected components (union-find)

namespace detail {

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0u); }
  std::uint32_t find(std::uint32_t a) {
    while (parent_[a] != a) {
      parent_[a] = parent_[parent_[a]];
      a = parent_[a];
    }
    return a;
  }
  void unite(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (b < a) std::swap(a, b);
    parent_[b] = a;
  }

 private:
  std::vector<std::uint32_t> parent_;
};

}  // namespace detail

inline InstanceMap connected_components(const BitMask& mask, int connectivity = 4,
                                        long long min_area = 0) {
  if (connectivity != 4 && connectivity != 8)
    throw ValidationError("connectivity must be 4 or 8");
  const int w = mask.width, h = mask.height;
  detail::DisjointSets sets(mask.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!mask.at(x, y)) continue;
      const auto p = static_cast<std::uint32_t>(mask.index(x, y));
      if (x > 0 && mask.at(x - 1, y)) sets.unite(p, p - 1);
      if (y > 0 && mask.at(x, y - 1)) sets.unite(p, p - w);
      if (connectivity == 8 && y > 0) {
        if (x > 0 && mask.at(x - 1, y - 1)) sets.unite(p, p - w - 1);
        if (x + 1 < w && mask.at(x + 1, y - 1)) sets.unite(p, p - w + 1);
      }
    }

  std::vector<long long> area(mask.size(), 0);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask.data[i]) ++area[sets.find(static_cast<std::uint32_t>(i))];

  std::vector<std::uint32_t> label(mask.size(), 0);
  Grid<std::uint32_t> ids(w, h, 0);
  std::uint32_t next = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask.data[i]) continue;
    const auto root = sets.find(static_cast<std::uint32_t>(i));
    if (area[root] < min_area) continue;
    if (label[root] == 0) label[root] = ++next;
    ids.data[i] = label[root];
  }
  return InstanceMap::from_ids(std::move(ids));
}

struct BaselineParams {
  int closing_radius = 2;
  int connectivity = 4;
  long long min_area = 64;
};

/// Morphology + connected components, the non-annotated baseline.
inline InstanceMap derive_instances_cc(const BitMask& mask, const BaselineParams& p = {}) {
  return connected_components(morphological_close(mask, p.closing_radius), p.connectivity,
                              p.min_area);
}

// ---------------------------------------------------------------------------
// Weak (box-guided) derivation

enum class AssignmentPolicy { SmallestBox, NearestCenter, FirstBox };

inline std::string_view policy_name(AssignmentPolicy p) {
  switch (p) {
    case AssignmentPolicy::SmallestBox: return "smallest";
    case AssignmentPolicy::NearestCenter: return "nearest-center";
    case AssignmentPolicy::FirstBox: return "first";
  }
  return "?";
}

inline AssignmentPolicy parse_policy(std::string_view s) {
  for (auto p : {AssignmentPolicy::SmallestBox, AssignmentPolicy::NearestCenter,
                 AssignmentPolicy::FirstBox})
    if (policy_name(p) == s) return p;
  throw ValidationError("unknown assignment policy '" + std::string(s) + "'");
}

namespace detail {

// Squared distance from the pixel centre to the box centre, in half-pixels.
inline long long center_distance2(const BoundingBox& b, int px, int py) {
  const long long dx = 2LL * px + 1 - (2LL * b.x + b.w);
  const long long dy = 2LL * py + 1 - (2LL * b.y + b.h);
  return dx * dx + dy * dy;
}

// True when box `a` (index ia) should win pixel (px,py) over box `b`.
inline bool prefer(AssignmentPolicy policy, const BoundingBox& a, std::size_t ia,
                   const BoundingBox& b, std::size_t ib, int px, int py) {
  switch (policy) {
    case AssignmentPolicy::SmallestBox:
      if (a.area() != b.area()) return a.area() < b.area();
      break;
    case AssignmentPolicy::NearestCenter: {
      const auto da = center_distance2(a, px, py), db = center_distance2(b, px, py);
      if (da != db) return da < db;
      break;
    }
    case AssignmentPolicy::FirstBox:
      break;
  }
  return ia < ib;
}

}  // namespace detail

/// Each foreground pixel covered by at least one box goes to the box chosen
/// by `policy`. Ids follow input box order, skipping boxes that receive no
/// pixels.
inline InstanceMap derive_instances_weak(const BitMask& mask, const std::vector<BoundingBox>& boxes,
                                         AssignmentPolicy policy = AssignmentPolicy::SmallestBox) {
  constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  std::vector<std::size_t> owner(mask.size(), kNone);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto& b = boxes[i];
    if (b.w < 1 || b.h < 1 || b.x < 0 || b.y < 0 || b.right() > mask.width ||
        b.bottom() > mask.height)
      throw ValidationError("box " + std::to_string(i) + " lies outside the raster; clamp first");
    for (int y = b.y; y < b.bottom(); ++y)
      for (int x = b.x; x < b.right(); ++x) {
        const auto p = mask.index(x, y);
        if (!mask.data[p]) continue;
        auto& o = owner[p];
        if (o == kNone || detail::prefer(policy, b, i, boxes[o], o, x, y)) o = i;
      }
  }
  std::vector<std::uint32_t> id_of(boxes.size(), 0);
  for (auto o : owner)
    if (o != kNone) id_of[o] = 1;
  std::uint32_t next = 0;
  for (auto& id : id_of)
    if (id) id = ++next;
  Grid<std::uint32_t> ids(mask.width, mask.height, 0);
  for (std::size_t p = 0; p < owner.size(); ++p)
    if (owner[p] != kNone) ids.data[p] = id_of[owner[p]];
  return InstanceMap::from_ids(std::move(ids));
}

// ---------------------------------------------------------------------------
// Matching

struct MatchedPair {
  std::uint32_t id_a = 0;
  std::uint32_t id_b = 0;
  double iou = 0.0;
};

struct MatchReport {
  double mean_iou = 0.0;
  std::vector<MatchedPair> matched_pairs;
  std::size_t unmatched_a = 0;
  std::size_t unmatched_b = 0;
};

inline MatchReport match_instances(const InstanceMap& a, const InstanceMap& b, double iou_threshold = 0.5) {
  if (a.width() != b.width() || a.height() != b.height())
    throw DimensionError("instance maps differ in size");
  std::map<std::pair<std::uint32_t, std::uint32_t>, long long> inter;
  for (std::size_t p = 0; p < a.ids.size(); ++p) {
    const auto ia = a.ids.data[p], ib = b.ids.data[p];
    if (ia && ib) ++inter[{ia, ib}];
  }
  std::map<std::uint32_t, long long> area_a, area_b;
  for (const auto& i : a.instances) area_a[i.id] = i.area;
  for (const auto& i : b.instances) area_b[i.id] = i.area;

  std::vector<MatchedPair> candidates;
  for (const auto& [key, n] : inter) {
    const double iou = static_cast<double>(n) /
                       static_cast<double>(area_a[key.first] + area_b[key.second] - n);
    if (iou >= iou_threshold) candidates.push_back({key.first, key.second, iou});
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const MatchedPair& l, const MatchedPair& r) { return l.iou > r.iou; });

  MatchReport report;
  std::map<std::uint32_t, bool> used_a, used_b;
  double total = 0.0;
  for (const auto& c : candidates) {
    if (used_a[c.id_a] || used_b[c.id_b]) continue;
    used_a[c.id_a] = used_b[c.id_b] = true;
    report.matched_pairs.push_back(c);
    total += c.iou;
  }
  if (!report.matched_pairs.empty())
    report.mean_iou = total / static_cast<double>(report.matched_pairs.size());
  report.unmatched_a = a.count() - report.matched_pairs.size();
  report.unmatched_b = b.count() - report.matched_pairs.size();
  return report;
}

inline nlohmann::ordered_json match_report_to_json(const MatchReport& r) {
  nlohmann::ordered_json j;
  j["mean_iou"] = r.mean_iou;
  j["matched_pairs"] = nlohmann::ordered_json::array();
  for (const auto& p : r.matched_pairs)
    j["matched_pairs"].push_back({{"id_a", p.id_a}, {"id_b", p.id_b}, {"iou", p.iou}});
  j["unmatched_a"] = r.unmatched_a;
  j["unmatched_b"] = r.unmatched_b;
  return j;
}

// ---------------------------------------------------------------------------
// Persistence: 16-bit PGM plus a JSON sidecar with the instance summary.

inline nlohmann::ordered_json instance_summary_json(const InstanceMap& m) {
  nlohmann::ordered_json j;
  j["width"] = m.width();
  j["height"] = m.height();
  j["instances"] = nlohmann::ordered_json::array();
  for (const auto& i : m.instances)
    j["instances"].push_back({{"id", i.id},
                              {"box", {{"x", i.box.x}, {"y", i.box.y}, {"w", i.box.w}, {"h", i.box.h}}},
                              {"area", i.area}});
  return j;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& raster_path) {
  auto p = raster_path;
  p.replace_extension(".json");
  return p;
}

inline void write_instance_map(const InstanceMap& m, const std::filesystem::path& path) {
  IdRaster out(m.width(), m.height(), 0);
  for (std::size_t p = 0; p < m.ids.size(); ++p) {
    if (m.ids.data[p] > 65535) throw ValidationError("instance id exceeds 16-bit raster range");
    out.data[p] = static_cast<std::uint16_t>(m.ids.data[p]);
  }
  detail::write_file(path, encode_id_raster(out));
  detail::write_file(sidecar_path(path), instance_summary_json(m).dump(2) + "\n");
}

inline InstanceMap read_instance_map(const std::filesystem::path& path) {
  const auto raw = decode_id_raster(detail::read_file(path), path.string());
  Grid<std::uint32_t> ids(raw.width, raw.height, 0);
  std::copy(raw.data.begin(), raw.data.end(), ids.data.begin());
  return InstanceMap::from_ids(std::move(ids));
}

}  // namespace diop
