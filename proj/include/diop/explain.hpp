#pragma once

// Interventional Shapley values for forest predictions. The explained
// quantity is the forest probability of one class; a coalition S takes x on
// S and a background row elsewhere, averaged over the background.

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "diop/common.hpp"
#include "diop/learn/forest.hpp"

namespace diop {

inline constexpr int kMaxBruteFeatures = 15;

struct Explanation {
  int target_class = 0;
  double base_value = 0.0;  // mean model output over the background
  double output = 0.0;      // model output at x
  std::vector<double> phi;
};

namespace detail {

inline double class_output(const Forest& f, std::span<const double> z, int target) {
  return predict(f, z).probabilities.at(static_cast<std::size_t>(target));
}

inline void check_background(const Forest& f, const Matrix& background) {
  if (background.rows() == 0) throw ValidationError("background must be non-empty");
  if (background.cols() != f.num_features) throw DimensionError("background width differs from forest");
}

inline std::span<const double> row_span(const Matrix& m, Eigen::Index r) {
  return {m.row(r).data(), static_cast<std::size_t>(m.cols())};
}

}  // namespace detail

/// Reference implementation: evaluates the coalition value for all 2^d
/// subsets and applies the Shapley weighting directly.
inline Explanation shap_brute(const Forest& forest, std::span<const double> x, const Matrix& background,
                              std::optional<int> target = std::nullopt) {
  const int d = forest.num_features;
  if (static_cast<int>(x.size()) != d) throw DimensionError("input width differs from forest");
  if (d > kMaxBruteFeatures) throw ValidationError("too many features for subset enumeration");
  detail::check_background(forest, background);
  Explanation e;
  e.target_class = target ? *target : predict(forest, x).label;

  const std::size_t subsets = std::size_t{1} << d;
  std::vector<double> value(subsets, 0.0);
  std::vector<double> z(static_cast<std::size_t>(d));
  for (std::size_t s = 0; s < subsets; ++s) {
    double acc = 0.0;
    for (Eigen::Index b = 0; b < background.rows(); ++b) {
      for (int j = 0; j < d; ++j) z[j] = (s >> j) & 1u ? x[j] : background(b, j);
      acc += detail::class_output(forest, z, e.target_class);
    }
    value[s] = acc / static_cast<double>(background.rows());
  }

  // weight[k] = k! (d-k-1)! / d!
  std::vector<double> weight(static_cast<std::size_t>(d), 0.0);
  for (int k = 0; k < d; ++k)
    weight[k] = std::exp(std::lgamma(k + 1.0) + std::lgamma(static_cast<double>(d - k)) - std::lgamma(d + 1.0));

  e.phi.assign(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < d; ++i) {
    const std::size_t bit = std::size_t{1} << i;
    for (std::size_t s = 0; s < subsets; ++s) {
      if (s & bit) continue;
      const int k = std::popcount(s);
      e.phi[i] += weight[k] * (value[s | bit] - value[s]);
    }
  }
  e.base_value = value[0];
  e.output = detail::class_output(forest, x, e.target_class);
  return e;
}

namespace detail {

// For one tree and one background row, every reachable leaf is reached by
// the coalitions that contain a fixed set A of features (where x decided the
// branch) and exclude a disjoint set B (where the background row decided).
// The Shapley value of that indicator game is 1/(|A| C(|A|+|B|, |A|)) for
// members of A and -1/(|B| C(|A|+|B|, |B|)) for members of B.
class InterventionalTreeWalker {
 public:
  InterventionalTreeWalker(const Tree& tree, std::span<const double> x, int target, std::vector<double>& phi)
      : tree_(tree), x_(x), target_(target), phi_(phi), side_(x.size(), 0) {}

  void walk(std::span<const double> background_row) {
    bg_ = background_row;
    visit(0);
  }

 private:
  static double binomial(int n, int k) {
    double r = 1.0;
    for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
  }

  void visit(int index) {
    const auto& node = tree_.nodes[index];
    if (node.feature < 0) {
      const int a = in_x_, b = in_bg_;
      if (a + b == 0) return;
      const double v = leaf_value(node, target_);
      const double wa = a > 0 ? 1.0 / (a * binomial(a + b, a)) : 0.0;
      const double wb = b > 0 ? 1.0 / (b * binomial(a + b, b)) : 0.0;
      for (int f : path_) phi_[f] += side_[f] == 1 ? v * wa : -v * wb;
      return;
    }
    const int f = node.feature;
    const bool x_left = x_[f] <= node.threshold;
    const bool b_left = bg_[f] <= node.threshold;
    auto child = [&](bool left) { return left ? node.left : node.right; };
    if (side_[f] == 1) return visit(child(x_left));
    if (side_[f] == 2) return visit(child(b_left));
    if (x_left == b_left) return visit(child(x_left));

    path_.push_back(f);
    side_[f] = 1;
    ++in_x_;
    visit(child(x_left));
    --in_x_;
    side_[f] = 2;
    ++in_bg_;
    visit(child(b_left));
    --in_bg_;
    side_[f] = 0;
    path_.pop_back();
  }

  const Tree& tree_;
  std::span<const double> x_;
  std::span<const double> bg_;
  int target_;
  std::vector<double>& phi_;
  std::vector<unsigned char> side_;  // 0 free, 1 taken from x, 2 from background
  std::vector<int> path_;
  int in_x_ = 0;
  int in_bg_ = 0;
};

}  // namespace detail

/// Exact interventional attribution by walking each tree once per background
/// row; agrees with `shap_brute` and has no limit on the feature count.
inline Explanation shap_fast(const Forest& forest, std::span<const double> x, const Matrix& background,
                             std::optional<int> target = std::nullopt) {
  if (static_cast<int>(x.size()) != forest.num_features) throw DimensionError("input width differs from forest");
  detail::check_background(forest, background);
  Explanation e;
  e.target_class = target ? *target : predict(forest, x).label;
  e.phi.assign(x.size(), 0.0);
  for (const auto& tree : forest.trees) {
    detail::InterventionalTreeWalker walker(tree, x, e.target_class, e.phi);
    for (Eigen::Index b = 0; b < background.rows(); ++b) walker.walk(detail::row_span(background, b));
  }
  const double scale = 1.0 / (static_cast<double>(background.rows()) * static_cast<double>(forest.trees.size()));
  for (auto& v : e.phi) v *= scale;
  double base = 0.0;
  for (Eigen::Index b = 0; b < background.rows(); ++b)
    base += detail::class_output(forest, detail::row_span(background, b), e.target_class);
  e.base_value = base / static_cast<double>(background.rows());
  e.output = detail::class_output(forest, x, e.target_class);
  return e;
}

/// Up to `count` distinct rows drawn without replacement, in drawn order.
inline Matrix sample_background(const Matrix& X, std::size_t count, std::uint64_t seed) {
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(X.rows()));
  std::iota(rows.begin(), rows.end(), 0);
  Rng rng(seed);
  const std::size_t k = std::min(count, rows.size());
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, rows.size() - 1);
    std::swap(rows[i], rows[pick(rng)]);
  }
  Matrix out(static_cast<Eigen::Index>(k), X.cols());
  for (std::size_t i = 0; i < k; ++i) out.row(static_cast<Eigen::Index>(i)) = X.row(rows[i]);
  return out;
}

struct RankedFeature {
  int rank = 0;
  std::size_t index = 0;
  std::string name;
  double mean_abs_phi = 0.0;
};

struct ShapReport {
  std::vector<std::string> row_ids;
  std::vector<Explanation> explanations;
  std::vector<RankedFeature> ranking;
};

/// Ranks features by mean |phi| over all rows, ties broken by name.
inline std::vector<RankedFeature> rank_features(const std::vector<Explanation>& explanations,
                                                const std::vector<std::string>& names) {
  std::vector<RankedFeature> out(names.size());
  for (std::size_t i = 0; i < names.size(); ++i) {
    out[i].index = i;
    out[i].name = names[i];
    for (const auto& e : explanations) out[i].mean_abs_phi += std::abs(e.phi.at(i));
    if (!explanations.empty()) out[i].mean_abs_phi /= static_cast<double>(explanations.size());
  }
  std::sort(out.begin(), out.end(), [](const RankedFeature& a, const RankedFeature& b) {
    if (a.mean_abs_phi != b.mean_abs_phi) return a.mean_abs_phi > b.mean_abs_phi;
    return a.name < b.name;
  });
  for (std::size_t i = 0; i < out.size(); ++i) out[i].rank = static_cast<int>(i) + 1;
  return out;
}

inline ShapReport global_importance(const Forest& forest, const Matrix& X, const Matrix& background,
                                    const std::vector<std::string>& names, unsigned jobs = 1) {
  if (X.rows() == 0) throw ValidationError("global importance needs at least one row");
  if (names.size() != static_cast<std::size_t>(forest.num_features)) throw DimensionError("one name per feature");
  ShapReport report;
  report.explanations.resize(static_cast<std::size_t>(X.rows()));
  parallel_for(report.explanations.size(), jobs, [&](std::size_t i) {
    report.explanations[i] = shap_fast(forest, detail::row_span(X, static_cast<Eigen::Index>(i)), background);
  });
  report.ranking = rank_features(report.explanations, names);
  return report;
}

inline nlohmann::ordered_json shap_report_to_json(const ShapReport& r, const std::vector<std::string>& names,
                                                  const std::vector<std::string>& class_names, std::size_t top_k) {
  nlohmann::ordered_json j;
  auto top = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < std::min(top_k, r.ranking.size()); ++i)
    top.push_back({{"rank", r.ranking[i].rank}, {"feature", r.ranking[i].name},
                   {"mean_abs_phi", r.ranking[i].mean_abs_phi}});
  j["top_features"] = std::move(top);
  auto rows = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < r.explanations.size(); ++i) {
    const auto& e = r.explanations[i];
    nlohmann::ordered_json row;
    if (i < r.row_ids.size()) row["roi_id"] = r.row_ids[i];
    row["target_class"] = e.target_class < static_cast<int>(class_names.size())
                              ? nlohmann::ordered_json(class_names[e.target_class])
                              : nlohmann::ordered_json(e.target_class);
    row["base_value"] = e.base_value;
    row["output"] = e.output;
    nlohmann::ordered_json phi;
    for (std::size_t k = 0; k < e.phi.size(); ++k) phi[names[k]] = e.phi[k];
    row["phi"] = std::move(phi);
    rows.push_back(std::move(row));
  }
  j["instances"] = std::move(rows);
  return j;
}

}  // namespace diop
