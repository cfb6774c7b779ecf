#pragma once

// Independent reference implementations used only by tests. They share no
// code paths with the library routines they check.

#include <cstdint>
#include <map>
#include <queue>
#include <set>
#include <vector>

#include "diop/instances.hpp"
#include "diop/raster.hpp"

namespace diop::oracle {

/// Components as sets of pixel indices via BFS flood fill, in raster-scan
/// order of each component's first pixel.
inline std::vector<std::set<std::size_t>> flood_fill(const BitMask& m, int connectivity) {
  std::vector<int> seen(m.size(), 0);
  std::vector<std::set<std::size_t>> out;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      if (!m.at(x, y) || seen[m.index(x, y)]) continue;
      std::set<std::size_t> comp;
      std::queue<std::pair<int, int>> q;
      q.push({x, y});
      seen[m.index(x, y)] = 1;
      while (!q.empty()) {
        auto [cx, cy] = q.front();
        q.pop();
        comp.insert(m.index(cx, cy));
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (dx == 0 && dy == 0) continue;
            if (connectivity == 4 && dx != 0 && dy != 0) continue;
            const int nx = cx + dx, ny = cy + dy;
            if (nx < 0 || ny < 0 || nx >= m.width || ny >= m.height) continue;
            if (!m.at(nx, ny) || seen[m.index(nx, ny)]) continue;
            seen[m.index(nx, ny)] = 1;
            q.push({nx, ny});
          }
      }
      out.push_back(std::move(comp));
    }
  return out;
}

/// Partition of an id grid as pixel sets ordered by id.
template <typename Id>
std::vector<std::set<std::size_t>> partition_of(const Grid<Id>& ids) {
  std::map<Id, std::set<std::size_t>> by_id;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids.data[i]) by_id[ids.data[i]].insert(i);
  std::vector<std::set<std::size_t>> out;
  for (auto& [id, s] : by_id) out.push_back(std::move(s));
  return out;
}

/// Weak derivation evaluated pixel by pixel: collect every covering box,
/// then pick with the policy's rule written out directly.
inline Grid<std::uint32_t> weak_assignment(const BitMask& mask, const std::vector<BoundingBox>& boxes,
                                           AssignmentPolicy policy) {
  std::vector<long> owner(mask.size(), -1);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(x, y)) continue;
      std::vector<std::size_t> covering;
      for (std::size_t i = 0; i < boxes.size(); ++i) {
        const auto& b = boxes[i];
        if (x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h) covering.push_back(i);
      }
      if (covering.empty()) continue;
      std::size_t best = covering[0];
      for (auto i : covering) {
        const auto& bi = boxes[i];
        const auto& bb = boxes[best];
        if (policy == AssignmentPolicy::SmallestBox) {
          if (static_cast<long>(bi.w) * bi.h < static_cast<long>(bb.w) * bb.h) best = i;
        } else if (policy == AssignmentPolicy::NearestCenter) {
          auto d = [&](const BoundingBox& b) {
            const double cx = b.x + b.w / 2.0, cy = b.y + b.h / 2.0;
            return (x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy);
          };
          if (d(bi) < d(bb)) best = i;
        }
      }
      owner[mask.index(x, y)] = static_cast<long>(best);
    }
  std::map<long, std::uint32_t> id_of;
  for (std::size_t i = 0; i < boxes.size(); ++i)
    for (auto o : owner)
      if (o == static_cast<long>(i)) {
        const auto next = static_cast<std::uint32_t>(id_of.size() + 1);
        id_of[o] = next;
        break;
      }
  Grid<std::uint32_t> ids(mask.width, mask.height, 0);
  for (std::size_t p = 0; p < owner.size(); ++p)
    if (owner[p] >= 0) ids.data[p] = id_of[owner[p]];
  return ids;
}

/// Label frequencies over pixels accepted by `member`, tallied one pixel at a time.
template <typename Member>
std::vector<double> tally(const LabelRaster& r, Member member) {
  std::vector<double> counts(kNumLabels, 0.0);
  double total = 0;
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x)
      if (member(x, y)) {
        counts[static_cast<int>(r.at(x, y))] += 1;
        total += 1;
      }
  for (auto& c : counts) c /= total;
  return counts;
}

/// Upper-triangle co-occurrence frequencies from an explicit list of
/// directed neighbour events. Label index 8 stands for BD.
template <typename Member>
std::vector<double> events(const LabelRaster& r, Member member, bool include_bd, int connectivity) {
  std::map<std::pair<int, int>, double> pairs;
  double total = 0;
  const std::vector<std::pair<int, int>> offsets =
      connectivity == 4 ? std::vector<std::pair<int, int>>{{1, 0}, {-1, 0}, {0, 1}, {0, -1}}
                        : std::vector<std::pair<int, int>>{{1, 0}, {-1, 0}, {0, 1}, {0, -1},
                                                           {1, 1}, {1, -1}, {-1, 1}, {-1, -1}};
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x) {
      if (!member(x, y)) continue;
      const int a = static_cast<int>(r.at(x, y));
      for (auto [dx, dy] : offsets) {
        const int nx = x + dx, ny = y + dy;
        const bool in = nx >= 0 && ny >= 0 && nx < r.width && ny < r.height && member(nx, ny);
        int b;
        if (in)
          b = static_cast<int>(r.at(nx, ny));
        else if (include_bd)
          b = kNumLabels;
        else
          continue;
        pairs[{std::min(a, b), std::max(a, b)}] += 1;
        total += 1;
      }
    }
  const int n = include_bd ? kNumLabels + 1 : kNumLabels;
  std::vector<double> out;
  for (int a = 0; a < n; ++a)
    for (int b = a; b < n; ++b) {
      auto it = pairs.find({a, b});
      out.push_back(it == pairs.end() || total == 0 ? 0.0 : it->second / total);
    }
  return out;
}

}  // namespace diop::oracle
