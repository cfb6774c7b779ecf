#include "diop/features.hpp"

#include <gtest/gtest.h>

#include <numeric>
#include <random>
#include <set>

#include "oracles.hpp"
#include "test_util.hpp"

namespace diop {
namespace {

constexpr int BG = 0, BE = 1, ME = 2, NS = 3, DS = 4, SC = 5, BL = 6, NC = 7;

std::size_t upper_index(int n, int a, int b) {
  std::size_t idx = 0;
  for (int i = 0; i < a; ++i) idx += n - i;
  return idx + (b - a);
}

void expect_near_all(const std::vector<double>& got, const std::vector<double>& want, double tol = 1e-12) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], tol) << "entry " << i;
}

double sum(const std::vector<double>& v, std::size_t from, std::size_t n) {
  return std::accumulate(v.begin() + from, v.begin() + from + n, 0.0);
}

TEST(Histogram, UniformRegion) {
  const auto r = testing::raster_of(3, 3, {BE, BE, BE, BE, BE, BE, BE, BE, BE});
  const auto h = histogram_features(r, Region::roi(r));
  EXPECT_DOUBLE_EQ(h[BE], 1.0);
  EXPECT_DOUBLE_EQ(std::accumulate(h.begin(), h.end(), 0.0), 1.0);
}

TEST(Histogram, TwoByTwoCounts) {
  const auto r = testing::raster_of(2, 2, {BE, BE, ME, NS});
  const auto h = histogram_features(r, Region::roi(r));
  EXPECT_DOUBLE_EQ(h[BE], 0.5);
  EXPECT_DOUBLE_EQ(h[ME], 0.25);
  EXPECT_DOUBLE_EQ(h[NS], 0.25);
  EXPECT_DOUBLE_EQ(h[BG], 0.0);
}

TEST(Histogram, EmptyRegionThrows) {
  const auto r = testing::raster_of(2, 2, {BE, BE, ME, NS});
  Grid<std::uint32_t> ids(2, 2, 0);
  EXPECT_THROW(histogram_features(r, Region::mask(ids, 1, {0, 0, 2, 2})), EmptyRegionError);
  EXPECT_THROW(cooccurrence_features(r, Region::mask(ids, 1, {0, 0, 2, 2}), true), EmptyRegionError);
}

TEST(Histogram, MatchesTallyOracle) {
  std::mt19937_64 rng(31);
  const auto r = testing::random_raster(32, 32, rng);
  Grid<std::uint32_t> ids(32, 32, 0);
  std::bernoulli_distribution coin(0.5);
  for (auto& v : ids.data) v = coin(rng) ? 3 : 0;
  const BoundingBox box{5, 7, 20, 11};
  const auto h_box = histogram_features(r, Region::box(box));
  expect_near_all({h_box.begin(), h_box.end()}, oracle::tally(r, [&](int x, int y) { return box.contains(x, y); }));
  const auto h_mask = histogram_features(r, Region::mask(ids, 3, {0, 0, 32, 32}));
  expect_near_all({h_mask.begin(), h_mask.end()}, oracle::tally(r, [&](int x, int y) { return ids.at(x, y) == 3; }));
}

TEST(Cooccurrence, SinglePixelIsAllBoundary) {
  const auto r = testing::raster_of(1, 1, {SC});
  const auto m = cooccurrence_features(r, Region::roi(r), true);
  EXPECT_DOUBLE_EQ(m.frequency(SC, kBoundary), 1.0);
  EXPECT_EQ(m.events, 4);
  const auto none = cooccurrence_features(r, Region::roi(r), false);
  EXPECT_EQ(none.events, 0);
  for (double v : none.upper(kNumLabels)) EXPECT_EQ(v, 0.0);
}

TEST(Cooccurrence, OneByTwoHandEnumeration) {
  const auto r = testing::raster_of(2, 1, {BE, ME});
  const auto m = cooccurrence_features(r, Region::roi(r), true);
  EXPECT_EQ(m.events, 8);
  EXPECT_DOUBLE_EQ(m.frequency(BE, ME), 2.0 / 8);
  EXPECT_DOUBLE_EQ(m.frequency(BE, kBoundary), 3.0 / 8);
  EXPECT_DOUBLE_EQ(m.frequency(ME, kBoundary), 3.0 / 8);
  EXPECT_DOUBLE_EQ(sum(m.upper(kCoLabels), 0, 45), 1.0);
}

TEST(Cooccurrence, UniformFullRasterWithoutBoundary) {
  const auto r = testing::raster_of(2, 2, {BE, BE, BE, BE});
  const auto m = cooccurrence_features(r, Region::roi(r), false);
  EXPECT_EQ(m.events, 8);
  EXPECT_DOUBLE_EQ(m.frequency(BE, BE), 1.0);
}

TEST(Cooccurrence, MatchesEventOracleBothConnectivities) {
  std::mt19937_64 rng(32);
  for (int trial = 0; trial < 20; ++trial) {
    const auto r = testing::random_raster(17 + trial, 13, rng);
    Grid<std::uint32_t> ids(r.width, r.height, 0);
    std::bernoulli_distribution coin(0.6);
    for (auto& v : ids.data) v = coin(rng) ? 2 : 0;
    if (std::count(ids.data.begin(), ids.data.end(), 2u) == 0) ids.data[0] = 2;
    const auto in_mask = [&](int x, int y) { return ids.at(x, y) == 2; };
    for (int conn : {4, 8}) {
      const auto full = cooccurrence_features(r, Region::roi(r), false, conn).upper(kNumLabels);
      expect_near_all(full, oracle::events(r, [](int, int) { return true; }, false, conn));
      const auto mask =
          cooccurrence_features(r, Region::mask(ids, 2, {0, 0, r.width, r.height}), true, conn).upper(kCoLabels);
      expect_near_all(mask, oracle::events(r, in_mask, true, conn));
    }
  }
}

TEST(Cooccurrence, BlockInvariants) {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 50; ++trial) {
    const auto r = testing::random_raster(1 + trial % 9, 1 + trial % 7, rng);
    const auto m = cooccurrence_features(r, Region::roi(r), true);
    for (int a = 0; a < kCoLabels; ++a)
      for (int b = 0; b < kCoLabels; ++b) ASSERT_EQ(m.counts[a][b], m.counts[b][a]);
    EXPECT_EQ(m.counts[kBoundary][kBoundary], 0);
    EXPECT_NEAR(sum(m.upper(kCoLabels), 0, 45), 1.0, 1e-9);
  }
}

TEST(RoiFeatures, UniformNs) {
  const auto r = testing::raster_of(3, 2, {NS, NS, NS, NS, NS, NS});
  const auto v = roi_features(r);
  ASSERT_EQ(v.size(), kRoiBlock);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const bool hot = i == static_cast<std::size_t>(NS) || i == kNumLabels + upper_index(kNumLabels, NS, NS);
    EXPECT_EQ(v[i], hot ? 1.0 : 0.0) << feature_names()[i];
  }
}

TEST(RoiFeatures, SinglePixel) {
  const auto v = roi_features(testing::raster_of(1, 1, {BL}));
  EXPECT_EQ(v[BL], 1.0);
  EXPECT_EQ(sum(v, 0, kNumLabels), 1.0);
  EXPECT_EQ(sum(v, kNumLabels, 36), 0.0);
}

TEST(RoiFeatures, LargeRandomRasterMatchesOracles) {
  std::mt19937_64 rng(34);
  const auto r = testing::random_raster(512, 512, rng);
  const auto v = roi_features(r);
  const auto all = [](int, int) { return true; };
  auto want = oracle::tally(r, all);
  const auto co = oracle::events(r, all, false, 4);
  want.insert(want.end(), co.begin(), co.end());
  expect_near_all(v, want, 1e-12);
}

TEST(DuctFeatures, ZeroInstancesGiveEmptyList) {
  const auto r = testing::raster_of(2, 2, {BE, BE, ME, NS});
  EXPECT_TRUE(duct_features(r, InstanceMap::empty(2, 2), FeatureLevel::Box).empty());
}

TEST(DuctFeatures, FullRasterBoxMatchesRoiHistogram) {
  std::mt19937_64 rng(35);
  const auto r = testing::random_raster(10, 8, rng);
  const auto inst = InstanceMap::from_ids(Grid<std::uint32_t>(10, 8, 1));
  const auto box = duct_features(r, inst, FeatureLevel::Box);
  ASSERT_EQ(box.size(), 1u);
  const auto roi = roi_features(r);
  for (int l = 0; l < kNumLabels; ++l) EXPECT_DOUBLE_EQ(box[0][l], roi[l]);
  // Same in-region tallies, renormalised by the extra BD events.
  const auto m = cooccurrence_features(r, Region::roi(r), true);
  const auto m_roi = cooccurrence_features(r, Region::roi(r), false);
  for (int a = 0; a < kNumLabels; ++a)
    for (int b = 0; b < kNumLabels; ++b) EXPECT_EQ(m.counts[a][b], m_roi.counts[a][b]);
  EXPECT_EQ(m.events - m_roi.events, 2 * (10 + 8));
}

TEST(DuctFeatures, HandBuiltDuctMatchesEnumeration) {
  // 8x8 stroma with one 3x3 duct: BE ring around an ME centre, plus one BE
  // pixel inside the box that belongs to no instance.
  LabelRaster r(8, 8, TissueLabel::NS);
  Grid<std::uint32_t> ids(8, 8, 0);
  for (int y = 2; y < 5; ++y)
    for (int x = 3; x < 6; ++x) {
      r.at(x, y) = TissueLabel::BE;
      ids.at(x, y) = 1;
    }
  r.at(4, 3) = TissueLabel::ME;
  ids.at(5, 4) = 0;
  r.at(5, 4) = TissueLabel::DS;
  const auto inst = InstanceMap::from_ids(ids);
  ASSERT_EQ(inst.count(), 1u);
  const auto& box = inst.instances[0].box;
  EXPECT_EQ(box, (BoundingBox{3, 2, 3, 3}));

  const auto in_box = [&](int x, int y) { return box.contains(x, y); };
  const auto in_mask = [&](int x, int y) { return ids.at(x, y) == 1; };
  for (auto [level, member] : {std::pair{FeatureLevel::Box, std::function<bool(int, int)>(in_box)},
                               std::pair{FeatureLevel::Mask, std::function<bool(int, int)>(in_mask)}}) {
    const auto got = duct_features(r, inst, level);
    ASSERT_EQ(got.size(), 1u);
    auto want = oracle::tally(r, member);
    const auto co = oracle::events(r, member, true, 4);
    want.insert(want.end(), co.begin(), co.end());
    expect_near_all(got[0], want);
  }
  const auto mask = duct_features(r, inst, FeatureLevel::Mask)[0];
  EXPECT_DOUBLE_EQ(mask[BE], 7.0 / 8);
  EXPECT_DOUBLE_EQ(mask[DS], 0.0);
}

TEST(Aggregate, OneDuctCopiesBlocks) {
  std::vector<double> roi(kRoiBlock, 0.5), b(kDuctBlock), m(kDuctBlock);
  std::iota(b.begin(), b.end(), 1.0);
  std::iota(m.begin(), m.end(), 100.0);
  const auto fv = aggregate_features(roi, {b}, {m});
  EXPECT_EQ(fv.duct_count, 1);
  EXPECT_TRUE(std::equal(b.begin(), b.end(), fv.values.begin() + kRoiBlock));
  EXPECT_TRUE(std::equal(m.begin(), m.end(), fv.values.begin() + kRoiBlock + kDuctBlock));
}

TEST(Aggregate, TwoDuctsMean) {
  std::vector<double> roi(kRoiBlock, 0.0), b1(kDuctBlock, 1.0), b2(kDuctBlock, 3.0);
  const auto fv = aggregate_features(roi, {b1, b2}, {b2, b2});
  EXPECT_EQ(fv.duct_count, 2);
  EXPECT_EQ(fv.values[kRoiBlock], 2.0);
  EXPECT_EQ(fv.values[kRoiBlock + kDuctBlock], 3.0);
  const auto weighted =
      aggregate_features(roi, {b1, b2}, {b1, b2}, FeatureOptions::Pooling::AreaWeighted, {3.0, 1.0});
  EXPECT_DOUBLE_EQ(weighted.values[kRoiBlock], 1.5);
}

TEST(Aggregate, ZeroDucts) {
  std::vector<double> roi(kRoiBlock);
  std::iota(roi.begin(), roi.end(), 0.0);
  const auto fv = aggregate_features(roi, {}, {});
  ASSERT_EQ(fv.values.size(), kFeatureCount);
  EXPECT_EQ(fv.duct_count, 0);
  EXPECT_TRUE(std::equal(roi.begin(), roi.end(), fv.values.begin()));
  EXPECT_EQ(std::count(fv.values.begin() + kRoiBlock, fv.values.end(), 0.0), static_cast<long>(2 * kDuctBlock));
}

TEST(Aggregate, RejectsWrongBlockSizes) {
  EXPECT_THROW(aggregate_features(std::vector<double>(10), {}, {}), DimensionError);
  EXPECT_THROW(aggregate_features(std::vector<double>(kRoiBlock), {std::vector<double>(kDuctBlock)}, {}),
               DimensionError);
}

TEST(FeatureNames, LayoutAndUniqueness) {
  const auto& names = feature_names();
  ASSERT_EQ(names.size(), 150u);
  EXPECT_EQ(std::set<std::string>(names.begin(), names.end()).size(), 150u);
  EXPECT_EQ(names[0], "BG freq in ROI");
  EXPECT_EQ(names[kNumLabels], "BG & BG in ROI");
  EXPECT_EQ(names[kRoiBlock + NC], "NC freq in bounding box");
  EXPECT_EQ(names[kRoiBlock + kDuctBlock + kNumLabels + upper_index(kCoLabels, BE, kBoundary)],
            "BD & BE in duct mask");
  EXPECT_EQ(names[kRoiBlock + kNumLabels + upper_index(kCoLabels, BE, ME)], "BE & ME in bounding box");
  EXPECT_EQ(level_columns({FeatureLevel::Mask}).front(), kRoiBlock + kDuctBlock);
  EXPECT_EQ(level_columns({FeatureLevel::Roi, FeatureLevel::Box}).size(), kRoiBlock + kDuctBlock);
}

InstanceMap random_instances(int w, int h, std::mt19937_64& rng) {
  return connected_components(testing::random_mask(w, h, 0.55, rng), 4, 3);
}

TEST(ExtractFeatures, BlocksSumToOne) {
  std::mt19937_64 rng(36);
  for (int trial = 0; trial < 30; ++trial) {
    const auto r = testing::random_raster(40, 30, rng);
    const auto inst = random_instances(40, 30, rng);
    const auto fv = extract_features(r, inst);
    ASSERT_EQ(fv.values.size(), kFeatureCount);
    EXPECT_EQ(fv.duct_count, static_cast<int>(inst.count()));
    EXPECT_NEAR(sum(fv.values, 0, kNumLabels), 1.0, 1e-9);
    EXPECT_NEAR(sum(fv.values, kNumLabels, 36), 1.0, 1e-9);
    for (std::size_t off : {kRoiBlock, kRoiBlock + kDuctBlock}) {
      EXPECT_NEAR(sum(fv.values, off, kNumLabels), inst.count() ? 1.0 : 0.0, 1e-9);
      EXPECT_NEAR(sum(fv.values, off + kNumLabels, 45), inst.count() ? 1.0 : 0.0, 1e-9);
      EXPECT_EQ(fv.values[off + kNumLabels + upper_index(kCoLabels, kBoundary, kBoundary)], 0.0);
    }
  }
}

TEST(ExtractFeatures, DeterministicAndIdPermutationInvariant) {
  std::mt19937_64 rng(37);
  const auto r = testing::random_raster(48, 48, rng);
  const auto inst = random_instances(48, 48, rng);
  ASSERT_GT(inst.count(), 2u);
  const auto a = extract_features(r, inst);
  EXPECT_EQ(a, extract_features(r, inst));

  std::vector<std::uint32_t> perm(inst.count());
  std::iota(perm.begin(), perm.end(), 1u);
  std::shuffle(perm.begin(), perm.end(), rng);
  auto ids = inst.ids;
  for (auto& v : ids.data)
    if (v) v = perm[v - 1];
  const auto b = extract_features(r, InstanceMap::from_ids(ids));
  for (std::size_t i = 0; i < kFeatureCount; ++i) EXPECT_NEAR(a.values[i], b.values[i], 1e-12);
}

TEST(ExtractFeatures, DimensionMismatchThrows) {
  std::mt19937_64 rng(38);
  EXPECT_THROW(extract_features(testing::random_raster(4, 4, rng), InstanceMap::empty(4, 5)), DimensionError);
}

TEST(FeatureTable, RoundTripIsExact) {
  std::mt19937_64 rng(39);
  std::vector<FeatureRow> rows;
  for (int i = 0; i < 5; ++i) {
    FeatureRow row;
    row.roi_id = "roi-" + std::to_string(i);
    if (i % 2) row.diagnosis = static_cast<Diagnosis>(i % 4);
    row.features = extract_features(testing::random_raster(20, 20, rng), random_instances(20, 20, rng));
    rows.push_back(std::move(row));
  }
  testing::TempDir dir("ft");
  write_feature_table(rows, dir / "f.csv");
  EXPECT_EQ(read_feature_table(dir / "f.csv"), rows);
}

TEST(FeatureTable, RejectsBadInput) {
  EXPECT_THROW(decode_feature_table("roi_id,diagnosis,duct_count,bogus\n"), FormatError);
  EXPECT_THROW(decode_feature_table(""), FormatError);
  auto text = encode_feature_table({});
  EXPECT_THROW(decode_feature_table(text + "a,benign,1,2\n"), FormatError);
  FeatureRow bad;
  bad.roi_id = "a,b";
  bad.features.values.assign(kFeatureCount, 0.0);
  EXPECT_THROW(encode_feature_table({bad}), ValidationError);
}

}  // namespace
}  // namespace diop
