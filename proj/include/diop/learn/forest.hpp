#pragma once

// CART trees grown on class-balanced bootstraps, bagged into a forest whose
// output is the mean of per-tree leaf class frequencies.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "diop/common.hpp"
#include "diop/learn/pca.hpp"

namespace diop {

/// Indices drawn with replacement, each example weighted by the inverse of
/// its class frequency so classes are equally likely. Labels must lie in
/// [0, num_classes) and every class must occur.
inline std::vector<std::size_t> balanced_sample(std::span<const int> labels, int num_classes,
                                                std::size_t n_out, Rng& rng) {
  if (num_classes < 2) throw ValidationError("balanced sampling needs at least 2 classes");
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw ValidationError("label out of range");
    ++counts[y];
  }
  for (int c = 0; c < num_classes; ++c)
    if (counts[c] == 0) throw ValidationError("class " + std::to_string(c) + " absent from sample");
  std::vector<double> weights(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) weights[i] = 1.0 / static_cast<double>(counts[labels[i]]);
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  std::vector<std::size_t> out(n_out);
  for (auto& i : out) i = pick(rng);
  return out;
}

struct ForestParams {
  int n_trees = 100;
  int max_depth = 0;          // 0 = unlimited
  int min_leaf = 1;
  int features_per_split = 0; // 0 = ceil(sqrt(d))
  bool bootstrap = true;      // balanced bootstrap of size n; otherwise all rows once
};

struct TreeNode {
  int feature = -1;  // -1 for leaves
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  int samples = 0;
  std::vector<double> counts;  // class counts, leaves only
};

/// Rows with x[feature] <= threshold go left.
struct Tree {
  std::vector<TreeNode> nodes;  // root at 0

  const TreeNode& leaf_for(std::span<const double> x) const {
    const TreeNode* n = &nodes[0];
    while (n->feature >= 0) n = &nodes[x[n->feature] <= n->threshold ? n->left : n->right];
    return *n;
  }

  std::size_t depth() const {
    std::vector<std::pair<int, std::size_t>> stack{{0, 0}};
    std::size_t best = 0;
    while (!stack.empty()) {
      auto [i, d] = stack.back();
      stack.pop_back();
      best = std::max(best, d);
      if (nodes[i].feature >= 0) {
        stack.push_back({nodes[i].left, d + 1});
        stack.push_back({nodes[i].right, d + 1});
      }
    }
    return best;
  }
};

inline std::vector<double> leaf_distribution(const TreeNode& leaf) {
  std::vector<double> p(leaf.counts);
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  if (total > 0)
    for (auto& v : p) v /= total;
  return p;
}

inline double leaf_value(const TreeNode& leaf, int c) {
  const double total = std::accumulate(leaf.counts.begin(), leaf.counts.end(), 0.0);
  return total > 0 ? leaf.counts[c] / total : 0.0;
}

struct Forest {
  std::vector<Tree> trees;
  int num_classes = 2;
  int num_features = 0;
  ForestParams params;
};

struct Prediction {
  int label = 0;
  std::vector<double> probabilities;
};

/// Mean of leaf class frequencies over trees; argmax ties go to the lower
/// class index.
inline Prediction predict(const Forest& forest, std::span<const double> x) {
  if (static_cast<int>(x.size()) != forest.num_features)
    throw DimensionError("input has " + std::to_string(x.size()) + " features, forest expects " +
                         std::to_string(forest.num_features));
  Prediction p;
  p.probabilities.assign(static_cast<std::size_t>(forest.num_classes), 0.0);
  for (const auto& t : forest.trees) {
    const auto& leaf = t.leaf_for(x);
    for (int c = 0; c < forest.num_classes; ++c) p.probabilities[c] += leaf_value(leaf, c);
  }
  for (auto& v : p.probabilities) v /= static_cast<double>(forest.trees.size());
  p.label = static_cast<int>(std::max_element(p.probabilities.begin(), p.probabilities.end()) -
                             p.probabilities.begin());
  return p;
}

namespace detail {

inline double gini(const std::vector<double>& counts, double total) {
  if (total <= 0) return 0.0;
  double s = 1.0;
  for (double c : counts) s -= (c / total) * (c / total);
  return s;
}

struct SplitChoice {
  int feature = -1;
  double threshold = 0.0;
  double impurity = 0.0;  // weighted child impurity (sum of n_child * gini)
};

class TreeBuilder {
 public:
  TreeBuilder(const Matrix& X, std::span<const int> y, int num_classes, const ForestParams& p, Rng& rng)
      : X_(X), y_(y), num_classes_(num_classes), p_(p), rng_(rng) {
    const int d = static_cast<int>(X.cols());
    mtry_ = p.features_per_split > 0 ? std::min(p.features_per_split, d)
                                     : static_cast<int>(std::ceil(std::sqrt(static_cast<double>(d))));
    mtry_ = std::max(mtry_, 1);
  }

  Tree build(std::vector<std::size_t> rows) {
    Tree t;
    grow(t, rows, 0);
    return t;
  }

 private:
  std::vector<double> class_counts(const std::vector<std::size_t>& rows) const {
    std::vector<double> c(static_cast<std::size_t>(num_classes_), 0.0);
    for (auto r : rows) c[y_[r]] += 1.0;
    return c;
  }

  int grow(Tree& t, std::vector<std::size_t>& rows, int depth) {
    const int index = static_cast<int>(t.nodes.size());
    t.nodes.emplace_back();
    t.nodes[index].samples = static_cast<int>(rows.size());
    auto counts = class_counts(rows);
    const bool pure = std::count_if(counts.begin(), counts.end(), [](double c) { return c > 0; }) <= 1;
    const bool depth_capped = p_.max_depth > 0 && depth >= p_.max_depth;
    SplitChoice split;
    if (!pure && !depth_capped && rows.size() >= 2 * static_cast<std::size_t>(p_.min_leaf))
      split = best_split(rows, counts);
    if (split.feature < 0) {
      t.nodes[index].counts = std::move(counts);
      return index;
    }
    std::vector<std::size_t> left, right;
    for (auto r : rows) (X_(r, split.feature) <= split.threshold ? left : right).push_back(r);
    rows.clear();
    rows.shrink_to_fit();
    const int l = grow(t, left, depth + 1);
    const int r = grow(t, right, depth + 1);
    auto& node = t.nodes[index];
    node.feature = split.feature;
    node.threshold = split.threshold;
    node.left = l;
    node.right = r;
    return index;
  }

  // Candidate features are visited in a random order; the first `mtry_` are
  // always scored and further ones only until some valid split turns up.
  SplitChoice best_split(const std::vector<std::size_t>& rows, const std::vector<double>& counts) {
    const int d = static_cast<int>(X_.cols());
    std::vector<int> order(static_cast<std::size_t>(d));
    std::iota(order.begin(), order.end(), 0);
    SplitChoice best;
    double best_score = std::numeric_limits<double>::infinity();
    std::vector<std::pair<double, int>> vals(rows.size());
    for (int k = 0; k < d; ++k) {
      if (k >= mtry_ && best.feature >= 0) break;
      std::uniform_int_distribution<int> pick(k, d - 1);
      std::swap(order[k], order[pick(rng_)]);
      const int f = order[k];
      for (std::size_t i = 0; i < rows.size(); ++i) vals[i] = {X_(rows[i], f), y_[rows[i]]};
      std::sort(vals.begin(), vals.end());
      std::vector<double> left(counts.size(), 0.0), right(counts);
      const std::size_t min_leaf = static_cast<std::size_t>(p_.min_leaf);
      for (std::size_t i = 0; i + 1 < vals.size(); ++i) {
        left[vals[i].second] += 1.0;
        right[vals[i].second] -= 1.0;
        if (vals[i].first == vals[i + 1].first) continue;
        const std::size_t nl = i + 1, nr = vals.size() - nl;
        if (nl < min_leaf || nr < min_leaf) continue;
        const double score = static_cast<double>(nl) * gini(left, static_cast<double>(nl)) +
                             static_cast<double>(nr) * gini(right, static_cast<double>(nr));
        if (score < best_score) {
          best_score = score;
          double mid = vals[i].first + (vals[i + 1].first - vals[i].first) / 2.0;
          if (!(mid < vals[i + 1].first)) mid = vals[i].first;
          best = {f, mid, score};
        }
      }
    }
    return best;
  }

  const Matrix& X_;
  std::span<const int> y_;
  int num_classes_;
  const ForestParams& p_;
  Rng& rng_;
  int mtry_ = 1;
};

}  // namespace detail

/// Trains one CART tree on the given rows (duplicates allowed).
inline Tree train_tree(const Matrix& X, std::span<const int> y, int num_classes,
                       std::vector<std::size_t> rows, const ForestParams& params, Rng& rng) {
  return detail::TreeBuilder(X, y, num_classes, params, rng).build(std::move(rows));
}

/// Tree t draws from its own stream derived from (seed, t), so the result
/// does not depend on `jobs`.
inline Forest train_forest(const Matrix& X, std::span<const int> y, int num_classes,
                           const ForestParams& params, std::uint64_t seed, unsigned jobs = 1) {
  const auto n = static_cast<std::size_t>(X.rows());
  if (n < 2) throw ValidationError("forest training needs at least 2 rows");
  if (y.size() != n) throw DimensionError("label count differs from row count");
  if (params.n_trees < 1) throw ValidationError("n_trees must be >= 1");
  if (params.min_leaf < 1) throw ValidationError("min_leaf must be >= 1");
  std::vector<int> present(static_cast<std::size_t>(num_classes), 0);
  for (int v : y) {
    if (v < 0 || v >= num_classes) throw ValidationError("label out of range");
    present[v] = 1;
  }
  if (std::accumulate(present.begin(), present.end(), 0) < 2)
    throw ValidationError("degenerate training data: fewer than 2 classes present");

  // Classes missing from this training set are simply never sampled.
  std::vector<int> local_of(static_cast<std::size_t>(num_classes), -1);
  int local_classes = 0;
  for (int c = 0; c < num_classes; ++c)
    if (present[c]) local_of[c] = local_classes++;
  std::vector<int> local_y(n);
  for (std::size_t i = 0; i < n; ++i) local_y[i] = local_of[y[i]];

  Forest forest;
  forest.num_classes = num_classes;
  forest.num_features = static_cast<int>(X.cols());
  forest.params = params;
  forest.trees.resize(static_cast<std::size_t>(params.n_trees));
  parallel_for(forest.trees.size(), jobs, [&](std::size_t t) {
    Rng rng(derive_seed(seed, t));
    std::vector<std::size_t> rows(n);
    if (params.bootstrap)
      rows = balanced_sample(local_y, local_classes, n, rng);
    else
      std::iota(rows.begin(), rows.end(), 0);
    forest.trees[t] = train_tree(X, y, num_classes, std::move(rows), params, rng);
  });
  return forest;
}

inline nlohmann::ordered_json forest_to_json(const Forest& f) {
  nlohmann::ordered_json j;
  j["num_classes"] = f.num_classes;
  j["num_features"] = f.num_features;
  j["params"] = {{"n_trees", f.params.n_trees},
                 {"max_depth", f.params.max_depth},
                 {"min_leaf", f.params.min_leaf},
                 {"features_per_split", f.params.features_per_split},
                 {"bootstrap", f.params.bootstrap}};
  auto trees = nlohmann::ordered_json::array();
  for (const auto& t : f.trees) {
    auto nodes = nlohmann::ordered_json::array();
    for (const auto& n : t.nodes) {
      if (n.feature >= 0)
        nodes.push_back({{"feature", n.feature},
                         {"threshold", n.threshold},
                         {"left", n.left},
                         {"right", n.right},
                         {"samples", n.samples}});
      else
        nodes.push_back({{"samples", n.samples}, {"counts", n.counts}});
    }
    trees.push_back(std::move(nodes));
  }
  j["trees"] = std::move(trees);
  return j;
}

inline Forest forest_from_json(const nlohmann::json& j) {
  Forest f;
  f.num_classes = j.at("num_classes").get<int>();
  f.num_features = j.at("num_features").get<int>();
  const auto& p = j.at("params");
  f.params = {p.at("n_trees").get<int>(), p.at("max_depth").get<int>(), p.at("min_leaf").get<int>(),
              p.at("features_per_split").get<int>(), p.at("bootstrap").get<bool>()};
  for (const auto& jt : j.at("trees")) {
    Tree t;
    for (const auto& jn : jt) {
      TreeNode n;
      n.samples = jn.at("samples").get<int>();
      if (jn.contains("feature")) {
        n.feature = jn["feature"].get<int>();
        n.threshold = jn.at("threshold").get<double>();
        n.left = jn.at("left").get<int>();
        n.right = jn.at("right").get<int>();
      } else {
        n.counts = jn.at("counts").get<std::vector<double>>();
      }
      t.nodes.push_back(std::move(n));
    }
    const int size = static_cast<int>(t.nodes.size());
    for (const auto& n : t.nodes) {
      if (n.feature >= f.num_features || (n.feature >= 0 && (n.left <= 0 || n.right <= 0 ||
                                                             n.left >= size || n.right >= size)))
        throw FormatError("forest: malformed tree node");
      if (n.feature < 0 && static_cast<int>(n.counts.size()) != f.num_classes)
        throw FormatError("forest: leaf class counts have the wrong length");
      if (n.feature >= 0 && !std::isfinite(n.threshold)) throw FormatError("forest: non-finite threshold");
    }
    if (t.nodes.empty()) throw FormatError("forest: empty tree");
    f.trees.push_back(std::move(t));
  }
  if (f.trees.empty()) throw FormatError("forest: no trees");
  return f;
}

}  // namespace diop
