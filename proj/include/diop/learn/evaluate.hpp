#pragma once

// Classifier pipeline (optional PCA + forest), diagnostic tasks, metrics and
// the two evaluation protocols: leave-one-out for binary tasks and a
// manifest-declared train/val/test split for the four-way task.

#include <cmath>
#include <numeric>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "diop/common.hpp"
#include "diop/features.hpp"
#include "diop/learn/forest.hpp"
#include "diop/learn/pca.hpp"
#include "diop/raster.hpp"

namespace diop {

// ---------------------------------------------------------------------------
// Tasks

struct TaskSpec {
  std::string name;
  // Binary tasks: classes[0] = negative set, classes[1] = positive set.
  // Four-way: one diagnosis per class.
  std::vector<std::vector<Diagnosis>> classes;
  std::vector<std::string> class_names;
  int positive_class = 1;

  /// Class index for a diagnosis, or -1 when the task excludes it.
  int class_of(Diagnosis d) const {
    for (std::size_t c = 0; c < classes.size(); ++c)
      if (std::find(classes[c].begin(), classes[c].end(), d) != classes[c].end()) return static_cast<int>(c);
    return -1;
  }
  int num_classes() const { return static_cast<int>(classes.size()); }
};

inline const std::vector<std::string>& task_names() {
  static const std::vector<std::string> names = {"invasive-vs-noninvasive", "atypia-dcis-vs-benign",
                                                 "dcis-vs-atypia", "fourway"};
  return names;
}

inline TaskSpec task_by_name(const std::string& name) {
  using D = Diagnosis;
  if (name == "invasive-vs-noninvasive")
    return {name, {{D::Benign, D::Atypia, D::DCIS}, {D::Invasive}}, {"Non-invasive", "Invasive"}, 1};
  if (name == "atypia-dcis-vs-benign")
    return {name, {{D::Benign}, {D::Atypia, D::DCIS}}, {"Benign", "Atypia+DCIS"}, 1};
  if (name == "dcis-vs-atypia") return {name, {{D::Atypia}, {D::DCIS}}, {"Atypia", "DCIS"}, 1};
  if (name == "fourway")
    return {name, {{D::Benign}, {D::Atypia}, {D::DCIS}, {D::Invasive}}, {"Benign", "Atypia", "DCIS", "Invasive"}, 3};
  throw ValidationError("unknown task '" + name + "'");
}

// ---------------------------------------------------------------------------
// Learning sets

struct LabeledData {
  Matrix X;
  std::vector<int> y;
  std::vector<std::string> ids;
  std::vector<std::string> feature_names;
  int num_classes = 2;
};

struct ColumnSelection {
  std::vector<std::size_t> columns = level_columns({FeatureLevel::Roi, FeatureLevel::Box, FeatureLevel::Mask});
  bool include_duct_count = false;

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (auto c : columns) out.push_back(feature_names().at(c));
    if (include_duct_count) out.push_back("duct count");
    return out;
  }
};

/// Rows of the task's diagnoses only; other diagnoses are dropped.
inline LabeledData make_learning_set(const std::vector<FeatureRow>& rows, const TaskSpec& task,
                                     const ColumnSelection& sel = {}) {
  LabeledData data;
  data.feature_names = sel.names();
  data.num_classes = task.num_classes();
  std::vector<const FeatureRow*> kept;
  for (const auto& r : rows) {
    if (!r.diagnosis) throw ValidationError("ROI '" + r.roi_id + "' has no diagnosis");
    const int c = task.class_of(*r.diagnosis);
    if (c < 0) continue;
    kept.push_back(&r);
    data.y.push_back(c);
    data.ids.push_back(r.roi_id);
  }
  data.X.resize(static_cast<Eigen::Index>(kept.size()), static_cast<Eigen::Index>(data.feature_names.size()));
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const auto& v = kept[i]->features.values;
    std::size_t k = 0;
    for (auto c : sel.columns) data.X(i, k++) = v.at(c);
    if (sel.include_duct_count) data.X(i, k) = kept[i]->features.duct_count;
  }
  return data;
}

inline LabeledData subset(const LabeledData& d, const std::vector<std::size_t>& rows) {
  LabeledData out;
  out.feature_names = d.feature_names;
  out.num_classes = d.num_classes;
  out.X.resize(static_cast<Eigen::Index>(rows.size()), d.X.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.X.row(i) = d.X.row(rows[i]);
    out.y.push_back(d.y[rows[i]]);
    out.ids.push_back(d.ids[rows[i]]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Classifier pipeline

struct EvalConfig {
  ForestParams forest;
  int pca_k = 20;
  enum class PcaMode { Auto, Never, Always } pca_mode = PcaMode::Auto;
  std::vector<int> forest_size_candidates;  // empty: no validation-based selection
  unsigned jobs = 1;
};

struct Classifier {
  std::string task;
  std::vector<std::string> feature_names;
  std::vector<std::string> class_names;
  std::optional<PcaModel> pca;
  Forest forest;

  /// Forest-space representation of raw rows.
  Matrix model_inputs(const Matrix& X) const { return pca ? pca_transform(*pca, X) : X; }

  Prediction predict_row(const Matrix& row) const {
    const Matrix z = model_inputs(row);
    return predict(forest, std::span<const double>(z.data(), static_cast<std::size_t>(z.cols())));
  }
};

/// PCA is fitted only when the feature count exceeds the number of training
/// rows (Auto), reducing to min(pca_k, n, d) dimensions.
inline bool pca_applies(const EvalConfig& cfg, Eigen::Index n_train, Eigen::Index d) {
  switch (cfg.pca_mode) {
    case EvalConfig::PcaMode::Never: return false;
    case EvalConfig::PcaMode::Always: return true;
    case EvalConfig::PcaMode::Auto: return d > n_train;
  }
  return false;
}

inline Classifier fit_classifier(const LabeledData& train, const EvalConfig& cfg, std::uint64_t seed,
                                 const std::string& task_name = "", std::vector<std::string> class_names = {},
                                 unsigned jobs = 1) {
  Classifier clf;
  clf.task = task_name;
  clf.feature_names = train.feature_names;
  clf.class_names = std::move(class_names);
  const Matrix* inputs = &train.X;
  Matrix reduced;
  if (pca_applies(cfg, train.X.rows(), train.X.cols())) {
    const auto k = std::min<Eigen::Index>({cfg.pca_k, train.X.rows(), train.X.cols()});
    clf.pca = pca_fit(train.X, k);
    reduced = pca_transform(*clf.pca, train.X);
    inputs = &reduced;
  }
  clf.forest = train_forest(*inputs, train.y, train.num_classes, cfg.forest, derive_seed(seed, 0x7a11), jobs);
  return clf;
}

// ---------------------------------------------------------------------------
// Metrics

struct Confusion {
  int num_classes = 2;
  std::vector<long long> cells;  // row = actual, column = predicted

  explicit Confusion(int c = 2) : num_classes(c), cells(static_cast<std::size_t>(c) * c, 0) {}
  long long& at(int actual, int predicted) { return cells[static_cast<std::size_t>(actual) * num_classes + predicted]; }
  long long at(int actual, int predicted) const {
    return cells[static_cast<std::size_t>(actual) * num_classes + predicted];
  }
  long long total() const { return std::accumulate(cells.begin(), cells.end(), 0LL); }
  bool operator==(const Confusion&) const = default;
};

struct MetricsReport {
  Confusion confusion;
  int positive_class = 1;
  double sensitivity = 0, specificity = 0, accuracy = 0, f1 = 0;
  std::vector<std::string> degenerate;  // metrics whose denominator was zero
};

/// Sensitivity, specificity and F1 are one-vs-rest on `positive_class`;
/// accuracy is the trace fraction (equal to (TP+TN)/total for two classes).
inline MetricsReport compute_metrics(const Confusion& cm, int positive_class) {
  const long long total = cm.total();
  if (total <= 0) throw ValidationError("empty confusion matrix");
  if (positive_class < 0 || positive_class >= cm.num_classes) throw ValidationError("positive class out of range");
  long long tp = cm.at(positive_class, positive_class), fn = 0, fp = 0, trace = 0;
  for (int c = 0; c < cm.num_classes; ++c) {
    trace += cm.at(c, c);
    if (c == positive_class) continue;
    fn += cm.at(positive_class, c);
    fp += cm.at(c, positive_class);
  }
  const long long tn = total - tp - fn - fp;
  MetricsReport m;
  m.confusion = cm;
  m.positive_class = positive_class;
  auto ratio = [&](long long num, long long den, const char* name) {
    if (den == 0) {
      m.degenerate.emplace_back(name);
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.sensitivity = ratio(tp, tp + fn, "sensitivity");
  m.specificity = ratio(tn, tn + fp, "specificity");
  m.accuracy = ratio(trace, total, "accuracy");
  m.f1 = ratio(2 * tp, 2 * tp + fp + fn, "f1");
  return m;
}

struct SummaryStat {
  double mean = 0;
  double std = 0;  // sample standard deviation; 0 for a single repeat
};

struct RepeatedReport {
  std::string task;
  std::string protocol;  // "loocv" or "split"
  std::vector<std::string> class_names;
  int positive_class = 1;
  std::uint64_t seed = 0;
  std::vector<MetricsReport> runs;
  std::vector<int> chosen_forest_sizes;  // split protocol with selection only
  SummaryStat sensitivity, specificity, accuracy, f1;
};

inline SummaryStat summarize(const std::vector<double>& v) {
  SummaryStat s;
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

inline void finalize(RepeatedReport& r) {
  std::vector<double> se, sp, ac, f1;
  for (const auto& m : r.runs) {
    se.push_back(m.sensitivity);
    sp.push_back(m.specificity);
    ac.push_back(m.accuracy);
    f1.push_back(m.f1);
  }
  r.sensitivity = summarize(se);
  r.specificity = summarize(sp);
  r.accuracy = summarize(ac);
  r.f1 = summarize(f1);
}

// ---------------------------------------------------------------------------
// Protocols

/// Held-out model for one LOOCV fold: fitted on every row except `fold`.
inline Classifier loocv_fold_model(const LabeledData& data, const EvalConfig& cfg, std::size_t fold,
                                   std::uint64_t fold_seed) {
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < data.y.size(); ++i)
    if (i != fold) rest.push_back(i);
  return fit_classifier(subset(data, rest), cfg, fold_seed);
}

inline std::uint64_t loocv_fold_seed(std::uint64_t seed, std::size_t repeat, std::size_t fold) {
  return derive_seed(seed, repeat, fold);
}

inline RepeatedReport run_loocv(const LabeledData& data, const TaskSpec& task, const EvalConfig& cfg, int repeats,
                                std::uint64_t seed) {
  const std::size_t n = data.y.size();
  if (n < 2) throw ValidationError("task '" + task.name + "' selects fewer than 2 ROIs");
  {
    std::vector<int> seen(static_cast<std::size_t>(data.num_classes), 0);
    for (int c : data.y) seen[c] = 1;
    if (std::accumulate(seen.begin(), seen.end(), 0) < 2)
      throw ValidationError("task '" + task.name + "' selects only one class");
  }
  if (repeats < 1) throw ValidationError("repeats must be >= 1");
  RepeatedReport report;
  report.task = task.name;
  report.protocol = "loocv";
  report.class_names = task.class_names;
  report.positive_class = task.positive_class;
  report.seed = seed;
  for (int r = 0; r < repeats; ++r) {
    std::vector<int> predicted(n, 0);
    parallel_for(n, cfg.jobs, [&](std::size_t i) {
      const auto clf = loocv_fold_model(data, cfg, i, loocv_fold_seed(seed, static_cast<std::size_t>(r), i));
      predicted[i] = clf.predict_row(data.X.row(static_cast<Eigen::Index>(i))).label;
    });
    Confusion cm(data.num_classes);
    for (std::size_t i = 0; i < n; ++i) ++cm.at(data.y[i], predicted[i]);
    report.runs.push_back(compute_metrics(cm, task.positive_class));
  }
  finalize(report);
  return report;
}

inline double accuracy_on(const Classifier& clf, const LabeledData& data) {
  if (data.y.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < data.y.size(); ++i)
    hit += clf.predict_row(data.X.row(static_cast<Eigen::Index>(i))).label == data.y[i];
  return static_cast<double>(hit) / static_cast<double>(data.y.size());
}

/// Train on the `train` split, optionally pick the forest size on `val`,
/// score on `test`. Every row must have a split assignment.
inline RepeatedReport run_split_eval(const LabeledData& data, const std::map<std::string, Split>& splits,
                                     const TaskSpec& task, const EvalConfig& cfg, int repeats, std::uint64_t seed) {
  std::vector<std::size_t> tr, va, te;
  for (std::size_t i = 0; i < data.ids.size(); ++i) {
    const auto it = splits.find(data.ids[i]);
    if (it == splits.end()) throw ValidationError("ROI '" + data.ids[i] + "' has no split assignment");
    switch (it->second) {
      case Split::Train: tr.push_back(i); break;
      case Split::Val: va.push_back(i); break;
      case Split::Test: te.push_back(i); break;
      case Split::Unassigned: break;
    }
  }
  if (tr.empty() || te.empty()) throw ValidationError("split evaluation needs non-empty train and test sets");
  if (repeats < 1) throw ValidationError("repeats must be >= 1");
  const auto train = subset(data, tr), val = subset(data, va), test = subset(data, te);

  RepeatedReport report;
  report.task = task.name;
  report.protocol = "split";
  report.class_names = task.class_names;
  report.positive_class = task.positive_class;
  report.seed = seed;
  for (int r = 0; r < repeats; ++r) {
    const auto run_seed = derive_seed(seed, static_cast<std::uint64_t>(r));
    EvalConfig run_cfg = cfg;
    if (!cfg.forest_size_candidates.empty() && !val.y.empty()) {
      double best = -1;
      for (int size : cfg.forest_size_candidates) {
        EvalConfig c = cfg;
        c.forest.n_trees = size;
        const double acc = accuracy_on(fit_classifier(train, c, run_seed, "", {}, cfg.jobs), val);
        if (acc > best) {
          best = acc;
          run_cfg.forest.n_trees = size;
        }
      }
      report.chosen_forest_sizes.push_back(run_cfg.forest.n_trees);
    }
    const auto clf = fit_classifier(train, run_cfg, run_seed, "", {}, cfg.jobs);
    Confusion cm(data.num_classes);
    for (std::size_t i = 0; i < test.y.size(); ++i)
      ++cm.at(test.y[i], clf.predict_row(test.X.row(static_cast<Eigen::Index>(i))).label);
    report.runs.push_back(compute_metrics(cm, task.positive_class));
  }
  finalize(report);
  return report;
}

// ---------------------------------------------------------------------------
// Documents

inline nlohmann::ordered_json metrics_to_json(const MetricsReport& m) {
  nlohmann::ordered_json j;
  auto rows = nlohmann::ordered_json::array();
  for (int a = 0; a < m.confusion.num_classes; ++a) {
    auto row = nlohmann::ordered_json::array();
    for (int p = 0; p < m.confusion.num_classes; ++p) row.push_back(m.confusion.at(a, p));
    rows.push_back(row);
  }
  j["confusion"] = rows;
  j["sensitivity"] = m.sensitivity;
  j["specificity"] = m.specificity;
  j["accuracy"] = m.accuracy;
  j["f1"] = m.f1;
  j["degenerate"] = m.degenerate;
  return j;
}

inline nlohmann::ordered_json report_to_json(const RepeatedReport& r) {
  nlohmann::ordered_json j;
  j["task"] = r.task;
  j["protocol"] = r.protocol;
  j["classes"] = r.class_names;
  j["positive_class"] = r.positive_class < static_cast<int>(r.class_names.size())
                            ? nlohmann::ordered_json(r.class_names[r.positive_class])
                            : nlohmann::ordered_json(r.positive_class);
  j["seed"] = r.seed;
  j["repeats"] = r.runs.size();
  auto stat = [](const SummaryStat& s) { return nlohmann::ordered_json{{"mean", s.mean}, {"std", s.std}}; };
  j["summary"] = {{"sensitivity", stat(r.sensitivity)},
                  {"specificity", stat(r.specificity)},
                  {"accuracy", stat(r.accuracy)},
                  {"f1", stat(r.f1)}};
  if (!r.chosen_forest_sizes.empty()) j["chosen_forest_sizes"] = r.chosen_forest_sizes;
  auto runs = nlohmann::ordered_json::array();
  for (const auto& m : r.runs) runs.push_back(metrics_to_json(m));
  j["per_repeat"] = std::move(runs);
  return j;
}

inline constexpr int kModelFormatVersion = 1;

inline nlohmann::ordered_json classifier_to_json(const Classifier& c) {
  nlohmann::ordered_json j;
  j["format"] = "diop-model";
  j["version"] = kModelFormatVersion;
  j["task"] = c.task;
  j["feature_names"] = c.feature_names;
  j["class_names"] = c.class_names;
  j["pca"] = c.pca ? pca_to_json(*c.pca) : nlohmann::ordered_json(nullptr);
  j["forest"] = forest_to_json(c.forest);
  return j;
}

inline Classifier classifier_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "diop-model") throw FormatError("not a model document");
    if (j.at("version").get<int>() != kModelFormatVersion)
      throw FormatError("unsupported model version " + j["version"].dump());
    Classifier c;
    c.task = j.at("task").get<std::string>();
    c.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    c.class_names = j.at("class_names").get<std::vector<std::string>>();
    if (!j.at("pca").is_null()) c.pca = pca_from_json(j["pca"]);
    c.forest = forest_from_json(j.at("forest"));
    const auto width = c.pca ? c.pca->k() : static_cast<Eigen::Index>(c.feature_names.size());
    if (c.pca && c.pca->d() != static_cast<Eigen::Index>(c.feature_names.size()))
      throw FormatError("PCA width does not match the feature names");
    if (c.forest.num_features != width) throw FormatError("forest width does not match its inputs");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model document: ") + e.what());
  }
}

/// Raw model inputs for feature-table rows, gathered by name. Refuses tables
/// that lack any of the classifier's feature names.
inline Matrix gather_inputs(const Classifier& c, const std::vector<FeatureRow>& rows) {
  const auto& names = feature_names();
  std::vector<long> index;
  for (const auto& n : c.feature_names) {
    if (n == "duct count") {
      index.push_back(-1);
      continue;
    }
    const auto it = std::find(names.begin(), names.end(), n);
    if (it == names.end()) throw ValidationError("feature name mismatch: model expects '" + n + "'");
    index.push_back(it - names.begin());
  }
  Matrix X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(index.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t k = 0; k < index.size(); ++k)
      X(i, k) = index[k] < 0 ? rows[i].features.duct_count : rows[i].features.values.at(index[k]);
  return X;
}

}  // namespace diop
