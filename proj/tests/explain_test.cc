#include "diop/explain.hpp"

#include <gtest/gtest.h>

#include <random>

namespace diop {
namespace {

TreeNode split(int feature, double threshold, int left, int right) { return {feature, threshold, left, right, 0, {}}; }
TreeNode leaf(std::vector<double> counts) { return {-1, 0.0, -1, -1, 0, std::move(counts)}; }

// f = 1 exactly when x0 > 0.5 and x1 > 0.5.
Forest and_forest() {
  Tree t;
  t.nodes = {split(0, 0.5, 1, 2), leaf({1, 0}), split(1, 0.5, 3, 4), leaf({1, 0}), leaf({0, 1})};
  Forest f;
  f.num_features = 2;
  f.trees = {t};
  return f;
}

Matrix rows(std::initializer_list<std::initializer_list<double>> values) {
  Matrix m(static_cast<Eigen::Index>(values.size()), static_cast<Eigen::Index>(values.begin()->size()));
  Eigen::Index r = 0;
  for (const auto& row : values) {
    Eigen::Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

Forest random_forest(int d, int trees, int depth, int classes, std::mt19937_64& rng) {
  const int n = 40;
  Matrix X(n, d);
  std::vector<int> y(n);
  std::normal_distribution<double> g;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) X(i, j) = std::round(g(rng) * 4) / 4;
    y[i] = i % classes;
  }
  ForestParams p;
  p.n_trees = trees;
  p.max_depth = depth;
  return train_forest(X, y, classes, p, rng());
}

Matrix random_rows(int n, int d, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Matrix m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::round(g(rng) * 4) / 4;
  return m;
}

double total(const Explanation& e) { return e.base_value + std::accumulate(e.phi.begin(), e.phi.end(), 0.0); }

TEST(ShapBrute, ConstantModelGivesZero) {
  Forest f;
  f.num_features = 3;
  Tree t;
  t.nodes = {leaf({2, 6})};
  f.trees = {t};
  const std::vector<double> x = {1, 2, 3};
  const auto e = shap_brute(f, x, rows({{0, 0, 0}, {5, 5, 5}}));
  for (double v : e.phi) EXPECT_EQ(v, 0.0);
  EXPECT_DOUBLE_EQ(e.base_value, 0.75);
}

TEST(ShapBrute, SingleFeatureStump) {
  Tree t;
  t.nodes = {split(0, 0.0, 1, 2), leaf({3, 1}), leaf({1, 4})};
  Forest f;
  f.num_features = 1;
  f.trees = {t};
  const std::vector<double> x = {1.0};
  const auto e = shap_brute(f, x, rows({{-1.0}, {-2.0}}));
  EXPECT_EQ(e.target_class, 1);
  EXPECT_DOUBLE_EQ(e.phi[0], e.output - e.base_value);
  EXPECT_DOUBLE_EQ(e.phi[0], 0.8 - 0.25);
}

TEST(ShapBrute, AndTreeByHand) {
  const auto f = and_forest();
  const std::vector<double> x = {1, 1};
  const auto bg = rows({{0, 0}, {1, 0}});
  const auto e = shap_brute(f, x, bg);
  EXPECT_EQ(e.target_class, 1);
  EXPECT_DOUBLE_EQ(e.base_value, 0.0);
  EXPECT_DOUBLE_EQ(e.phi[0], 0.25);
  EXPECT_DOUBLE_EQ(e.phi[1], 0.75);
  const auto fast = shap_fast(f, x, bg);
  EXPECT_NEAR(fast.phi[0], 0.25, 1e-12);
  EXPECT_NEAR(fast.phi[1], 0.75, 1e-12);
}

TEST(ShapBrute, TooManyFeaturesThrows) {
  Forest f;
  f.num_features = kMaxBruteFeatures + 1;
  Tree t;
  t.nodes = {leaf({1, 1})};
  f.trees = {t};
  const std::vector<double> x(kMaxBruteFeatures + 1, 0.0);
  EXPECT_THROW(shap_brute(f, x, Matrix::Zero(1, kMaxBruteFeatures + 1)), ValidationError);
  EXPECT_THROW(shap_fast(f, x, Matrix::Zero(0, kMaxBruteFeatures + 1)), ValidationError);
}

TEST(ShapProperties, SymmetryAndDummy) {
  // Symmetric AND over features 0 and 2; feature 1 never splits.
  Tree t;
  t.nodes = {split(0, 0.5, 1, 2), leaf({1, 0}), split(2, 0.5, 3, 4), leaf({1, 0}), leaf({0, 1})};
  Forest f;
  f.num_features = 3;
  f.trees = {t};
  const std::vector<double> x = {1, 7, 1};
  const auto bg = rows({{0, -3, 0}, {0, 4, 0}});
  for (const auto& e : {shap_brute(f, x, bg), shap_fast(f, x, bg)}) {
    EXPECT_NEAR(e.phi[0], e.phi[2], 1e-12);
    EXPECT_EQ(e.phi[1], 0.0);
    EXPECT_NEAR(e.phi[0], 0.5, 1e-12);
  }
}

TEST(ShapFast, MatchesBruteForceSweep) {
  std::mt19937_64 rng(51);
  double worst = 0;
  for (int point = 0; point < 50; ++point) {
    const int d = 1 + point % 8;
    const auto forest = random_forest(d, 1 + point % 5, 1 + point % 3, 2 + point % 2, rng);
    const auto bg = random_rows(1 + point % 6, d, rng);
    auto x = random_rows(1, d, rng);
    if (point % 4 == 0) x.row(0).head(d / 2) = bg.row(0).head(d / 2);  // shared values exercise the no-branch path
    const std::span<const double> xs(x.data(), static_cast<std::size_t>(d));
    const auto brute = shap_brute(forest, xs, bg);
    const auto fast = shap_fast(forest, xs, bg);
    ASSERT_EQ(brute.target_class, fast.target_class);
    EXPECT_NEAR(brute.base_value, fast.base_value, 1e-12);
    for (int j = 0; j < d; ++j) worst = std::max(worst, std::abs(brute.phi[j] - fast.phi[j]));
    EXPECT_NEAR(total(brute), brute.output, 1e-9);
  }
  EXPECT_LE(worst, 1e-9);
}

TEST(ShapFast, LocalAccuracyAtFullWidth) {
  std::mt19937_64 rng(52);
  const auto forest = random_forest(150, 30, 0, 4, rng);
  const auto bg = random_rows(16, 150, rng);
  for (int k = 0; k < 5; ++k) {
    const auto x = random_rows(1, 150, rng);
    const auto e = shap_fast(forest, std::span<const double>(x.data(), 150), bg);
    EXPECT_NEAR(total(e), e.output, 1e-9);
  }
}

TEST(ShapFast, ExplicitTargetClass) {
  const auto f = and_forest();
  const std::vector<double> x = {1, 1};
  const auto e = shap_fast(f, x, rows({{0, 0}}), 0);
  EXPECT_EQ(e.target_class, 0);
  EXPECT_DOUBLE_EQ(e.output, 0.0);
  EXPECT_NEAR(e.phi[0], -0.5, 1e-12);
}

TEST(GlobalImportance, SingleUsedFeatureRanksFirst) {
  Tree t;
  t.nodes = {split(2, 0.0, 1, 2), leaf({1, 0}), leaf({0, 1})};
  Forest f;
  f.num_features = 4;
  f.trees = {t};
  std::mt19937_64 rng(53);
  const auto X = random_rows(20, 4, rng);
  const auto r = global_importance(f, X, sample_background(X, 8, 1), {"d", "c", "b", "a"});
  EXPECT_EQ(r.ranking[0].name, "b");
  EXPECT_GT(r.ranking[0].mean_abs_phi, 0.0);
  for (std::size_t i = 1; i < 4; ++i) EXPECT_EQ(r.ranking[i].mean_abs_phi, 0.0);
  EXPECT_EQ(r.ranking[1].name, "a") << "zero-importance ties are ordered by name";
}

TEST(GlobalImportance, ConstantModelTiesAreNameOrdered) {
  Forest f;
  f.num_features = 3;
  Tree t;
  t.nodes = {leaf({1, 3})};
  f.trees = {t};
  const Matrix X = Matrix::Zero(4, 3);
  const auto r = global_importance(f, X, X, {"zeta", "alpha", "mid"});
  EXPECT_EQ(r.ranking[0].name, "alpha");
  EXPECT_EQ(r.ranking[1].name, "mid");
  EXPECT_EQ(r.ranking[2].name, "zeta");
  const auto j = shap_report_to_json(r, {"zeta", "alpha", "mid"}, {"no", "yes"}, 2);
  EXPECT_EQ(j["top_features"].size(), 2u);
  EXPECT_EQ(j["instances"][0]["target_class"], "yes");
}

TEST(SampleBackground, DistinctRowsAndDeterministic) {
  Matrix X(10, 1);
  for (int i = 0; i < 10; ++i) X(i, 0) = i;
  const auto a = sample_background(X, 6, 3);
  EXPECT_EQ(a, sample_background(X, 6, 3));
  std::set<double> seen(a.data(), a.data() + a.size());
  EXPECT_EQ(seen.size(), 6u);
  EXPECT_EQ(sample_background(X, 64, 3).rows(), 10);
}

}  // namespace
}  // namespace diop
