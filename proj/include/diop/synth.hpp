#pragma once

// Synthetic ROIs with class-conditional duct morphology: label rasters, one
// annotation box per duct, and a stratified manifest.

#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "diop/common.hpp"
#include "diop/raster.hpp"

namespace diop {

struct Range {
  double lo = 0;
  double hi = 0;
  bool operator==(const Range&) const = default;
};

struct IntRange {
  int lo = 0;
  int hi = 0;
  bool operator==(const IntRange&) const = default;
};

/// Morphology of one diagnostic class. Probabilities are per duct unless
/// noted; counts are per ROI.
struct MorphologyParams {
  IntRange duct_count{6, 14};
  IntRange outer_radius{14, 28};
  IntRange ring_thickness{4, 8};
  Range me_fraction{0.0, 0.1};   // per ROI: share of epithelium that is ME
  double lumen_secretion = 0.6;  // lumen is SC (else BG)
  double fill_prob = 0.0;        // lumen filled by proliferating epithelium
  Range fill_extent{0.0, 0.0};   // filled share of the lumen radius, from the ring inward
  double necrosis_prob = 0.0;    // NC core in the lumen centre
  Range necrosis_extent{0.3, 0.5};
  double periductal_ds = 0.1;    // stroma inside the box is DS rather than NS
  IntRange ds_patches{2, 6};     // desmoplastic patches in the open stroma
  IntRange invasive_blobs{0, 0}; // ME clusters in DS stroma outside every box
  bool operator==(const MorphologyParams&) const = default;
};

struct SynthConfig {
  int width = 512;
  int height = 512;
  std::array<int, kNumDiagnoses> counts{100, 100, 100, 100};
  std::array<MorphologyParams, kNumDiagnoses> classes;
  // Class-independent clutter outside the ducts (per ROI).
  IntRange fat_holes{0, 16};
  IntRange blood_spots{0, 16};
  IntRange necrotic_debris{0, 14};
  IntRange secretion_pools{0, 14};
  IntRange epithelial_clusters{0, 20};  // unannotated BE clusters
  int placement_retries = 2000;
  std::uint64_t seed = 1;

  SynthConfig() {
    auto& benign = classes[0];
    benign.me_fraction = {0.0, 0.2};
    benign.fill_prob = 0.05;
    benign.fill_extent = {0.1, 0.3};
    benign.periductal_ds = 0.05;
    benign.ds_patches = {0, 4};

    auto& atypia = classes[1];
    atypia.me_fraction = {0.05, 0.45};
    atypia.fill_prob = 0.85;
    atypia.fill_extent = {0.3, 0.7};
    atypia.lumen_secretion = 0.5;
    atypia.periductal_ds = 0.15;
    atypia.ds_patches = {1, 5};

    auto& dcis = classes[2];
    dcis.me_fraction = {0.25, 0.75};
    dcis.fill_prob = 0.9;
    dcis.fill_extent = {0.8, 1.0};
    dcis.necrosis_prob = 0.6;
    dcis.lumen_secretion = 0.3;
    dcis.periductal_ds = 0.1;
    dcis.ds_patches = {2, 7};

    // Invasive ducts look like DCIS ducts inside; the surrounding stroma differs.
    auto& invasive = classes[3];
    invasive = dcis;
    invasive.periductal_ds = 0.7;
    invasive.invasive_blobs = {40, 80};
  }

  void validate() const {
    if (width < 16 || height < 16) throw ValidationError("synthetic rasters must be at least 16x16");
    auto prob = [](double p, const char* what) {
      if (!(p >= 0.0 && p <= 1.0)) throw ValidationError(std::string(what) + " must lie in [0, 1]");
    };
    auto range = [](double lo, double hi, const char* what) {
      if (!(lo <= hi)) throw ValidationError(std::string(what) + " range is empty");
    };
    for (const auto& c : classes) {
      range(c.duct_count.lo, c.duct_count.hi, "duct_count");
      range(c.outer_radius.lo, c.outer_radius.hi, "outer_radius");
      range(c.ring_thickness.lo, c.ring_thickness.hi, "ring_thickness");
      range(c.me_fraction.lo, c.me_fraction.hi, "me_fraction");
      range(c.fill_extent.lo, c.fill_extent.hi, "fill_extent");
      range(c.necrosis_extent.lo, c.necrosis_extent.hi, "necrosis_extent");
      range(c.ds_patches.lo, c.ds_patches.hi, "ds_patches");
      range(c.invasive_blobs.lo, c.invasive_blobs.hi, "invasive_blobs");
      prob(c.me_fraction.lo, "me_fraction");
      prob(c.me_fraction.hi, "me_fraction");
      prob(c.lumen_secretion, "lumen_secretion");
      prob(c.fill_prob, "fill_prob");
      prob(c.fill_extent.lo, "fill_extent");
      prob(c.fill_extent.hi, "fill_extent");
      prob(c.necrosis_prob, "necrosis_prob");
      prob(c.necrosis_extent.lo, "necrosis_extent");
      prob(c.necrosis_extent.hi, "necrosis_extent");
      prob(c.periductal_ds, "periductal_ds");
      if (c.duct_count.lo < 0 || c.ds_patches.lo < 0 || c.invasive_blobs.lo < 0)
        throw ValidationError("counts must be non-negative");
      if (c.ring_thickness.lo < 1 || c.outer_radius.lo < 2)
        throw ValidationError("ducts need radius >= 2 and ring thickness >= 1");
    }
    for (int n : counts)
      if (n < 0) throw ValidationError("per-class counts must be non-negative");
    for (auto r : {fat_holes, blood_spots, necrotic_debris, secretion_pools, epithelial_clusters}) range(r.lo, r.hi, "clutter");
  }
};

struct SyntheticRoi {
  LabelRaster raster;
  std::vector<BoundingBox> boxes;
  Diagnosis diagnosis = Diagnosis::Benign;
};

struct PlacementError : Error {
  explicit PlacementError(const std::string& m) : Error("placement", m) {}
};

namespace detail {

class Painter {
 public:
  Painter(LabelRaster& r, Rng& rng) : r_(r), rng_(rng) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  double uniform(const Range& r) { return r.lo == r.hi ? r.lo : uniform(r.lo, r.hi); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  int integer(const IntRange& r) { return integer(r.lo, r.hi); }
  bool chance(double p) { return uniform(0.0, 1.0) < p; }

  /// Irregular blob: disc whose radius wobbles with angle.
  template <typename Paint>
  void blob(double cx, double cy, double radius, Paint&& paint) {
    const double a1 = uniform(0.0, 0.35), a2 = uniform(0.0, 0.2);
    const double p1 = uniform(0.0, 6.283185307179586), p2 = uniform(0.0, 6.283185307179586);
    const int reach = static_cast<int>(std::ceil(radius * 1.6)) + 1;
    for (int y = static_cast<int>(cy) - reach; y <= static_cast<int>(cy) + reach; ++y)
      for (int x = static_cast<int>(cx) - reach; x <= static_cast<int>(cx) + reach; ++x) {
        if (!r_.inside(x, y)) continue;
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double t = std::atan2(dy, dx);
        const double edge = radius * (1.0 + a1 * std::sin(2 * t + p1) + a2 * std::sin(3 * t + p2));
        if (dx * dx + dy * dy <= edge * edge) paint(x, y);
      }
  }

 private:
  LabelRaster& r_;
  Rng& rng_;
};

struct DuctGeometry {
  double cx = 0, cy = 0;
  int outer = 0, thickness = 0;
  BoundingBox box;
};

}  // namespace detail

/// One ROI of the given class. Stroma and clutter are painted first, outside
/// every annotation box; ducts are drawn inside their boxes; invasive ME
/// clusters go outside all boxes.
inline SyntheticRoi generate_roi(Diagnosis diagnosis, const SynthConfig& cfg, Rng& rng) {
  using L = TissueLabel;
  const auto& p = cfg.classes[static_cast<int>(diagnosis)];
  SyntheticRoi roi;
  roi.diagnosis = diagnosis;
  roi.raster = LabelRaster(cfg.width, cfg.height, L::NS);
  auto& r = roi.raster;
  detail::Painter paint(r, rng);

  // Duct layout: boxes (ring bounds dilated by 2 px) must not overlap.
  std::vector<detail::DuctGeometry> ducts;
  const int wanted = paint.integer(p.duct_count);
  for (int d = 0; d < wanted; ++d) {
    bool placed = false;
    for (int attempt = 0; attempt < cfg.placement_retries && !placed; ++attempt) {
      detail::DuctGeometry g;
      g.outer = paint.integer(p.outer_radius);
      g.thickness = std::min(paint.integer(p.ring_thickness), g.outer);
      const int half = g.outer + 2;
      if (2 * half + 1 > std::min(cfg.width, cfg.height)) break;
      const int cx = paint.integer(half, cfg.width - half - 1);
      const int cy = paint.integer(half, cfg.height - half - 1);
      g.cx = cx + 0.5;
      g.cy = cy + 0.5;
      g.box = {cx - half, cy - half, 2 * half + 1, 2 * half + 1};
      bool clash = false;
      for (const auto& o : ducts) {
        const auto& a = g.box;
        const auto& b = o.box;
        if (a.x < b.right() + 1 && b.x < a.right() + 1 && a.y < b.bottom() + 1 && b.y < a.bottom() + 1) {
          clash = true;
          break;
        }
      }
      if (clash) continue;
      ducts.push_back(g);
      placed = true;
    }
    if (!placed) throw PlacementError("could not place duct " + std::to_string(d) + " without overlap");
  }
  for (const auto& g : ducts) roi.boxes.push_back(g.box);

  auto in_any_box = [&](int x, int y) {
    for (const auto& b : roi.boxes)
      if (b.contains(x, y)) return true;
    return false;
  };
  auto paint_open = [&](L label) {
    return [&, label](int x, int y) {
      if (!in_any_box(x, y)) r.at(x, y) = label;
    };
  };
  auto anywhere = [&] { return std::pair{paint.uniform(0.0, cfg.width), paint.uniform(0.0, cfg.height)}; };

  const int n_ds = paint.integer(p.ds_patches);
  for (int i = 0; i < n_ds; ++i) {
    auto [x, y] = anywhere();
    paint.blob(x, y, paint.uniform(15.0, 45.0), paint_open(L::DS));
  }
  struct Clutter {
    IntRange count;
    L label;
    double lo, hi;
  };
  for (const auto& c : {Clutter{cfg.fat_holes, L::BG, 5.0, 22.0}, Clutter{cfg.blood_spots, L::BL, 2.0, 8.0},
                        Clutter{cfg.necrotic_debris, L::NC, 3.0, 12.0},
                        Clutter{cfg.secretion_pools, L::SC, 3.0, 12.0},
                        Clutter{cfg.epithelial_clusters, L::BE, 3.0, 10.0}}) {
    const int n = paint.integer(c.count);
    for (int i = 0; i < n; ++i) {
      auto [x, y] = anywhere();
      paint.blob(x, y, paint.uniform(c.lo, c.hi), paint_open(c.label));
    }
  }

  const double me_fraction = paint.uniform(p.me_fraction);
  auto epithelium = [&] { return paint.chance(me_fraction) ? L::ME : L::BE; };
  for (const auto& g : ducts) {
    const L stroma = paint.chance(p.periductal_ds) ? L::DS : L::NS;
    const L lumen = paint.chance(p.lumen_secretion) ? L::SC : L::BG;
    const double inner = g.outer - g.thickness;
    const bool filled = paint.chance(p.fill_prob);
    const double fill_to = filled ? inner * (1.0 - paint.uniform(p.fill_extent)) : inner;
    const bool necrotic = paint.chance(p.necrosis_prob);
    const double necrosis_r = necrotic ? std::max(1.0, inner * paint.uniform(p.necrosis_extent)) : -1.0;
    for (int y = g.box.y; y < g.box.bottom(); ++y)
      for (int x = g.box.x; x < g.box.right(); ++x) {
        const double dist = std::hypot(x + 0.5 - g.cx, y + 0.5 - g.cy);
        L v = stroma;
        if (dist <= necrosis_r)
          v = L::NC;
        else if (dist < fill_to)
          v = lumen;
        else if (dist < inner)
          v = epithelium();
        else if (dist <= g.outer)
          v = epithelium();
        r.at(x, y) = v;
      }
    // The ring must never be empty of foreground: force the rightmost ring pixel.
    const int ex = static_cast<int>(g.cx + g.outer - 0.5), ey = static_cast<int>(g.cy);
    if (r.inside(ex, ey) && r.at(ex, ey) != L::BE && r.at(ex, ey) != L::ME) r.at(ex, ey) = L::BE;
  }

  const int blobs = paint.integer(p.invasive_blobs);
  for (int i = 0; i < blobs; ++i) {
    auto [x, y] = anywhere();
    const double rad = paint.uniform(2.0, 6.0);
    paint.blob(x, y, rad + 3.0, paint_open(L::DS));
    paint.blob(x, y, rad, paint_open(L::ME));
  }
  return roi;
}

inline std::string synthetic_roi_id(Diagnosis d, int index) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s-%04d", std::string(diagnosis_name(d)).c_str(), index);
  std::string id(buf);
  for (auto& c : id) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return id;
}

inline std::uint64_t synthetic_roi_seed(std::uint64_t master, Diagnosis d, int index) {
  return derive_seed(master, static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(index));
}

/// Stratified 60/20/20 assignment per class, shuffled with the master seed.
inline std::vector<Split> stratified_splits(int count, std::uint64_t seed) {
  std::vector<int> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (int i = count - 1; i > 0; --i) std::swap(order[i], order[std::uniform_int_distribution<int>(0, i)(rng)]);
  const int n_train = static_cast<int>(std::lround(0.6 * count));
  const int n_val = static_cast<int>(std::lround(0.2 * count));
  std::vector<Split> out(static_cast<std::size_t>(count), Split::Test);
  for (int k = 0; k < count; ++k) {
    const int i = order[k];
    out[i] = k < n_train ? Split::Train : (k < n_train + n_val ? Split::Val : Split::Test);
  }
  return out;
}

/// Writes rasters/, boxes/ and manifest.json under `dir`; returns the records.
inline std::vector<RoiRecord> generate_dataset(const SynthConfig& cfg, const std::filesystem::path& dir,
                                               unsigned jobs = 1) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir / "rasters", ec);
  std::filesystem::create_directories(dir / "boxes", ec);
  if (ec) throw IoError("cannot create dataset directory '" + dir.string() + "': " + ec.message());

  struct Job {
    Diagnosis d;
    int index;
    Split split;
  };
  std::vector<Job> work;
  for (int c = 0; c < kNumDiagnoses; ++c) {
    const auto d = static_cast<Diagnosis>(c);
    const auto splits = stratified_splits(cfg.counts[c], derive_seed(cfg.seed, 0x5b1177, c));
    for (int i = 0; i < cfg.counts[c]; ++i) work.push_back({d, i, splits[i]});
  }
  std::vector<RoiRecord> records(work.size());
  parallel_for(work.size(), jobs, [&](std::size_t k) {
    const auto& job = work[k];
    Rng rng(synthetic_roi_seed(cfg.seed, job.d, job.index));
    const auto roi = generate_roi(job.d, cfg, rng);
    RoiRecord rec;
    rec.id = synthetic_roi_id(job.d, job.index);
    rec.raster = "rasters/" + rec.id + ".pgm";
    rec.boxes = "boxes/" + rec.id + ".json";
    rec.diagnosis = job.d;
    rec.split = job.split;
    write_label_raster(roi.raster, dir / rec.raster);
    write_boxes({rec.id, roi.boxes}, dir / *rec.boxes);
    records[k] = std::move(rec);
  });
  write_manifest(records, dir / "manifest.json");
  return records;
}

}  // namespace diop
