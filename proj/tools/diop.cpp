// diop: command-line entry points for every pipeline stage.
//
//   synth -> derive -> features -> train / eval -> explain
//
// Stages communicate through files only. `serve` exposes derivation and
// feature endpoints for the annotation UI.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "diop/common.hpp"
#include "diop/explain.hpp"
#include "diop/features.hpp"
#include "diop/instances.hpp"
#include "diop/learn/evaluate.hpp"
#include "diop/pipeline.hpp"
#include "diop/raster.hpp"
#include "diop/service.hpp"
#include "diop/synth.hpp"

namespace fs = std::filesystem;
using namespace diop;

namespace {

// Flags shared by all stages. Values only override the config file when the
// flag was given on the command line.
struct CommonFlags {
  std::string config;
  std::uint64_t seed = 0;
  unsigned jobs = 1;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* jobs_opt = nullptr;

  void add(CLI::App* app) {
    app->add_option("--config", config, "Pipeline configuration (JSON); flags override it")->check(CLI::ExistingFile);
    seed_opt = app->add_option("--seed", seed, "Master random seed");
    jobs_opt = app->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
  }

  PipelineConfig resolve() const {
    PipelineConfig cfg = config.empty() ? PipelineConfig{} : load_config(config);
    if (seed_opt->count()) cfg.seed = seed;
    if (jobs_opt->count()) cfg.jobs = jobs;
    return cfg;
  }
};

struct FeatureFlags {
  int connectivity = 4;
  std::string pooling = "mean";
  CLI::Option* conn_opt = nullptr;
  CLI::Option* pool_opt = nullptr;

  void add(CLI::App* app) {
    conn_opt = app->add_option("--connectivity", connectivity, "Co-occurrence neighbourhood (4 or 8)")
                   ->check(CLI::IsMember({4, 8}));
    pool_opt = app->add_option("--pooling", pooling, "Per-duct pooling: mean or area_weighted")
                   ->check(CLI::IsMember({"mean", "area_weighted"}));
  }
  void apply(PipelineConfig& cfg) const {
    if (conn_opt->count()) cfg.features.connectivity = connectivity;
    if (pool_opt->count())
      cfg.features.pooling = pooling == "mean" ? FeatureOptions::Pooling::Mean : FeatureOptions::Pooling::AreaWeighted;
  }
};

struct LearnFlags {
  int n_trees = 100, max_depth = 0, min_leaf = 1, features_per_split = 0, pca_k = 20, repeats = 100;
  std::string pca = "auto";
  std::string levels = "roi,box,mask";
  bool duct_count = false;
  std::vector<int> forest_sizes;
  CLI::Option *trees_opt, *depth_opt, *leaf_opt, *mtry_opt, *k_opt, *rep_opt, *pca_opt, *dc_opt, *fs_opt;

  void add(CLI::App* app, bool with_repeats) {
    trees_opt = app->add_option("--trees", n_trees, "Trees per forest")->check(CLI::PositiveNumber);
    depth_opt = app->add_option("--max-depth", max_depth, "Maximum tree depth (0 = unlimited)");
    leaf_opt = app->add_option("--min-leaf", min_leaf, "Minimum samples per leaf")->check(CLI::PositiveNumber);
    mtry_opt = app->add_option("--features-per-split", features_per_split, "Features tried per split (0 = ceil(sqrt(d)))");
    k_opt = app->add_option("--pca-k", pca_k, "PCA target dimension")->check(CLI::PositiveNumber);
    pca_opt = app->add_option("--pca", pca, "PCA mode: auto (when d > n_train), never, always")
                  ->check(CLI::IsMember({"auto", "never", "always"}));
    dc_opt = app->add_flag("--include-duct-count", duct_count, "Append the duct count to the model inputs");
    app->add_option("--levels", levels, "Feature levels used as model input (comma list of roi, box, mask)");
    fs_opt = app->add_option("--forest-sizes", forest_sizes, "Candidate forest sizes chosen on the val split");
    rep_opt = with_repeats ? app->add_option("--repeats", repeats, "Repetitions with re-derived seeds")
                                 ->check(CLI::PositiveNumber)
                           : nullptr;
  }

  void apply(PipelineConfig& cfg) const {
    if (trees_opt->count()) cfg.learn.forest.n_trees = n_trees;
    if (depth_opt->count()) cfg.learn.forest.max_depth = max_depth;
    if (leaf_opt->count()) cfg.learn.forest.min_leaf = min_leaf;
    if (mtry_opt->count()) cfg.learn.forest.features_per_split = features_per_split;
    if (k_opt->count()) cfg.learn.pca_k = pca_k;
    if (pca_opt->count())
      cfg.learn.pca_mode = pca == "auto" ? EvalConfig::PcaMode::Auto
                                         : (pca == "never" ? EvalConfig::PcaMode::Never : EvalConfig::PcaMode::Always);
    if (dc_opt->count()) cfg.include_duct_count = duct_count;
    if (fs_opt->count()) cfg.learn.forest_size_candidates = forest_sizes;
    if (rep_opt && rep_opt->count()) cfg.repeats = repeats;
  }

  ColumnSelection selection(const PipelineConfig& cfg) const {
    std::vector<FeatureLevel> wanted;
    std::stringstream ss(levels);
    for (std::string s; std::getline(ss, s, ',');) {
      if (s == "roi")
        wanted.push_back(FeatureLevel::Roi);
      else if (s == "box")
        wanted.push_back(FeatureLevel::Box);
      else if (s == "mask")
        wanted.push_back(FeatureLevel::Mask);
      else
        throw ValidationError("unknown feature level '" + s + "'");
    }
    if (wanted.empty()) throw ValidationError("--levels selects nothing");
    ColumnSelection sel;
    sel.columns.clear();
    for (auto l : {FeatureLevel::Roi, FeatureLevel::Box, FeatureLevel::Mask}) {
      if (std::find(wanted.begin(), wanted.end(), l) == wanted.end()) continue;
      for (std::size_t i = 0; i < level_size(l); ++i) sel.columns.push_back(level_offset(l) + i);
    }
    sel.include_duct_count = cfg.include_duct_count;
    return sel;
  }
};

void write_json(const nlohmann::ordered_json& j, const fs::path& path) {
  detail::write_file(path, j.dump(2) + "\n");
}

std::vector<FeatureRow> rows_in_split(const std::vector<FeatureRow>& rows, const Dataset& data, Split split) {
  const auto splits = data.splits();
  std::vector<FeatureRow> out;
  for (const auto& r : rows) {
    const auto it = splits.find(r.roi_id);
    if (it == splits.end()) throw ValidationError("ROI '" + r.roi_id + "' is not in the manifest");
    if (it->second == split) out.push_back(r);
  }
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ductal instance-oriented breast biopsy pipeline"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  // synth ------------------------------------------------------------------
  auto* synth = app.add_subcommand("synth", "Generate a synthetic labelled dataset");
  CommonFlags synth_common;
  synth_common.add(synth);
  std::string synth_out;
  int per_class = 100, size = 512;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--per-class", per_class, "ROIs per diagnostic class")->check(CLI::NonNegativeNumber);
  synth->add_option("--size", size, "Raster width and height in pixels")->check(CLI::Range(16, 8192));

  // derive -----------------------------------------------------------------
  auto* derive = app.add_subcommand("derive", "Derive duct instance rasters");
  CommonFlags derive_common;
  derive_common.add(derive);
  std::string derive_manifest, derive_out, derive_raster, derive_boxes, derive_output, method = "weak", policy;
  int closing = 2, cc_conn = 4;
  long long min_area = 64;
  auto* manifest_opt = derive->add_option("--manifest", derive_manifest, "Dataset manifest")->check(CLI::ExistingFile);
  auto* out_opt = derive->add_option("--out", derive_out, "Output directory (manifest mode)");
  auto* raster_opt = derive->add_option("--raster", derive_raster, "Single label raster")->check(CLI::ExistingFile);
  derive->add_option("--boxes", derive_boxes, "Box document for --raster")->check(CLI::ExistingFile);
  auto* output_opt = derive->add_option("--output", derive_output, "Instance raster to write (single mode)");
  auto* method_opt = derive->add_option("--method", method, "weak (boxes x foreground) or cc (morphology + components)")
                         ->check(CLI::IsMember({"weak", "cc"}));
  auto* policy_opt = derive->add_option("--policy", policy, "Overlap policy: smallest, nearest-center, first")
                         ->check(CLI::IsMember({"smallest", "nearest-center", "first"}));
  auto* closing_opt = derive->add_option("--closing-radius", closing, "Baseline closing radius")->check(CLI::NonNegativeNumber);
  auto* ccc_opt = derive->add_option("--cc-connectivity", cc_conn, "Baseline connectivity")->check(CLI::IsMember({4, 8}));
  auto* area_opt = derive->add_option("--min-area", min_area, "Baseline minimum component area")->check(CLI::NonNegativeNumber);
  manifest_opt->excludes(raster_opt);
  out_opt->needs(manifest_opt);
  output_opt->needs(raster_opt);

  // match ------------------------------------------------------------------
  auto* match = app.add_subcommand("match", "Compare two instance rasters by greedy IoU matching");
  std::string match_a, match_b, match_out;
  double threshold = 0.5;
  match->add_option("a", match_a, "First instance raster")->required()->check(CLI::ExistingFile);
  match->add_option("b", match_b, "Second instance raster")->required()->check(CLI::ExistingFile);
  match->add_option("--threshold", threshold, "Minimum IoU for a match")->check(CLI::Range(0.0, 1.0));
  match->add_option("--out", match_out, "Report file (default: stdout)");

  // features ---------------------------------------------------------------
  auto* feats = app.add_subcommand("features", "Extract the three-level feature table");
  CommonFlags feats_common;
  feats_common.add(feats);
  FeatureFlags feats_flags;
  feats_flags.add(feats);
  std::string feats_manifest, feats_instances, feats_out;
  feats->add_option("--manifest", feats_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  feats->add_option("--instances", feats_instances, "Directory written by derive")->required()->check(CLI::ExistingDirectory);
  feats->add_option("--out", feats_out, "Feature table (CSV)")->required();

  // train ------------------------------------------------------------------
  auto* train = app.add_subcommand("train", "Train a classifier and write a model file");
  CommonFlags train_common;
  train_common.add(train);
  LearnFlags train_flags;
  train_flags.add(train, false);
  std::string train_features, train_task = "fourway", train_manifest, train_out;
  train->add_option("--features", train_features, "Feature table")->required()->check(CLI::ExistingFile);
  train->add_option("--task", train_task, "Task name")->check(CLI::IsMember(task_names()));
  train->add_option("--manifest", train_manifest, "Restrict training to the manifest's train split")
      ->check(CLI::ExistingFile);
  train->add_option("--out", train_out, "Model file")->required();

  // predict ----------------------------------------------------------------
  auto* pred = app.add_subcommand("predict", "Apply a model file to a feature table");
  std::string pred_model, pred_features, pred_out;
  pred->add_option("--model", pred_model, "Model file")->required()->check(CLI::ExistingFile);
  pred->add_option("--features", pred_features, "Feature table")->required()->check(CLI::ExistingFile);
  pred->add_option("--out", pred_out, "Predictions (CSV)")->required();

  // eval -------------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "Evaluate a task: leave-one-out (binary) or split-based (fourway)");
  CommonFlags eval_common;
  eval_common.add(eval);
  LearnFlags eval_flags;
  eval_flags.add(eval, true);
  std::string eval_features, eval_task, eval_manifest, eval_out;
  eval->add_option("--features", eval_features, "Feature table")->required()->check(CLI::ExistingFile);
  eval->add_option("--task", eval_task, "Task name")->required()->check(CLI::IsMember(task_names()));
  eval->add_option("--manifest", eval_manifest, "Manifest with split assignments (fourway)")->check(CLI::ExistingFile);
  eval->add_option("--out", eval_out, "Metrics report (JSON)")->required();

  // explain ----------------------------------------------------------------
  auto* explain = app.add_subcommand("explain", "Shapley attributions and global feature ranking");
  CommonFlags explain_common;
  explain_common.add(explain);
  std::string explain_model, explain_features, explain_manifest, explain_out;
  std::size_t background_rows = 64, top_k = 10;
  explain->add_option("--model", explain_model, "Model file")->required()->check(CLI::ExistingFile);
  explain->add_option("--features", explain_features, "Feature table")->required()->check(CLI::ExistingFile);
  explain->add_option("--manifest", explain_manifest,
                      "Draw the background from the train split and explain the test split")
      ->check(CLI::ExistingFile);
  explain->add_option("--background", background_rows, "Background rows")->check(CLI::PositiveNumber);
  explain->add_option("--top-k", top_k, "Rows in the ranking table")->check(CLI::PositiveNumber);
  explain->add_option("--out", explain_out, "Explanation report (JSON)")->required();

  // bench ------------------------------------------------------------------
  auto* bench = app.add_subcommand("bench", "Time three-level feature extraction");
  int bench_size = 512, bench_ducts = 50, bench_runs = 5;
  std::uint64_t bench_seed = 1;
  std::string bench_out;
  bench->add_option("--size", bench_size, "Raster side")->check(CLI::Range(64, 8192));
  bench->add_option("--ducts", bench_ducts, "Duct count")->check(CLI::Range(0, 200));
  bench->add_option("--runs", bench_runs, "Timed runs (median reported)")->check(CLI::PositiveNumber);
  bench->add_option("--seed", bench_seed, "Raster seed");
  bench->add_option("--out", bench_out, "Also write the result as JSON");

  // serve ------------------------------------------------------------------
  auto* serve = app.add_subcommand("serve", "Local service for the annotation UI");
  CommonFlags serve_common;
  serve_common.add(serve);
  std::string serve_manifest, host = "127.0.0.1";
  int port = 8750;
  serve->add_option("--manifest", serve_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port")->check(CLI::Range(1, 65535));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help, --version
    std::cerr << nlohmann::json({{"error", {{"kind", "usage"}, {"message", e.what()}}}}).dump() << "\n";
    return 2;
  }

  try {
    if (*synth) {
      const auto cfg = synth_common.resolve();
      SynthConfig sc;
      sc.seed = cfg.seed;
      sc.width = sc.height = size;
      sc.counts.fill(per_class);
      const auto records = generate_dataset(sc, synth_out, cfg.jobs);
      std::cout << "wrote " << records.size() << " ROIs to " << synth_out << "\n";
    } else if (*derive) {
      auto cfg = derive_common.resolve();
      if (method_opt->count()) cfg.method = parse_derive_method(method);
      if (policy_opt->count()) cfg.policy = parse_policy(policy);
      if (closing_opt->count()) cfg.baseline.closing_radius = closing;
      if (ccc_opt->count()) cfg.baseline.connectivity = cc_conn;
      if (area_opt->count()) cfg.baseline.min_area = min_area;
      cfg.validate();
      if (manifest_opt->count()) {
        if (!out_opt->count()) throw ValidationError("--out is required with --manifest");
        for (const auto& w : derive_dataset(Dataset::open(derive_manifest), cfg, derive_out))
          std::cerr << "warning: " << w << "\n";
      } else if (raster_opt->count()) {
        if (!output_opt->count()) throw ValidationError("--output is required with --raster");
        const auto raster = read_label_raster(derive_raster);
        std::vector<BoundingBox> boxes;
        std::vector<std::string> warnings;
        if (cfg.method == DeriveMethod::Weak) {
          if (derive_boxes.empty()) throw ValidationError("--boxes is required for --method weak");
          boxes = clamp_boxes(read_boxes(derive_boxes).boxes, raster.width, raster.height, &warnings);
        }
        for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
        const auto inst = derive_instances(raster, boxes, cfg);
        write_instance_map(inst, derive_output);
        std::cout << inst.count() << " instances\n";
      } else {
        throw ValidationError("derive needs --manifest/--out or --raster/--output");
      }
    } else if (*match) {
      const auto report = match_instances(read_instance_map(match_a), read_instance_map(match_b), threshold);
      const auto j = match_report_to_json(report);
      if (match_out.empty())
        std::cout << j.dump(2) << "\n";
      else
        write_json(j, match_out);
    } else if (*feats) {
      auto cfg = feats_common.resolve();
      feats_flags.apply(cfg);
      cfg.validate();
      write_feature_table(extract_dataset(Dataset::open(feats_manifest), feats_instances, cfg), feats_out);
    } else if (*train) {
      auto cfg = train_common.resolve();
      train_flags.apply(cfg);
      cfg.validate();
      auto rows = read_feature_table(train_features);
      if (!train_manifest.empty()) rows = rows_in_split(rows, Dataset::open(train_manifest), Split::Train);
      const auto task = task_by_name(train_task);
      const auto data = make_learning_set(rows, task, train_flags.selection(cfg));
      const auto clf = fit_classifier(data, cfg.learn, cfg.seed, task.name, task.class_names, cfg.jobs);
      write_json(classifier_to_json(clf), train_out);
    } else if (*pred) {
      const auto clf = classifier_from_json(nlohmann::json::parse(detail::read_file(pred_model)));
      const auto rows = read_feature_table(pred_features);
      const auto X = gather_inputs(clf, rows);
      std::string out = "roi_id,predicted";
      for (const auto& c : clf.class_names) out += ",p_" + c;
      out += "\n";
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto p = clf.predict_row(X.row(static_cast<Eigen::Index>(i)));
        out += rows[i].roi_id + "," + clf.class_names.at(p.label);
        for (double v : p.probabilities) out += "," + format_double(v);
        out += "\n";
      }
      detail::write_file(pred_out, out);
    } else if (*eval) {
      auto cfg = eval_common.resolve();
      eval_flags.apply(cfg);
      cfg.validate();
      cfg.learn.jobs = cfg.jobs;
      const auto rows = read_feature_table(eval_features);
      const auto task = task_by_name(eval_task);
      const auto data = make_learning_set(rows, task, eval_flags.selection(cfg));
      RepeatedReport report;
      if (task.name == "fourway") {
        if (eval_manifest.empty()) throw ValidationError("--task fourway needs --manifest for split assignments");
        report = run_split_eval(data, Dataset::open(eval_manifest).splits(), task, cfg.learn, cfg.repeats, cfg.seed);
      } else {
        report = run_loocv(data, task, cfg.learn, cfg.repeats, cfg.seed);
      }
      write_json(report_to_json(report), eval_out);
      std::printf("%s accuracy %.4f +/- %.4f over %d repeats\n", task.name.c_str(), report.accuracy.mean,
                  report.accuracy.std, static_cast<int>(report.runs.size()));
    } else if (*explain) {
      const auto cfg = explain_common.resolve();
      const auto clf = classifier_from_json(nlohmann::json::parse(detail::read_file(explain_model)));
      const auto task = task_by_name(clf.task.empty() ? "fourway" : clf.task);
      auto rows = read_feature_table(explain_features);
      std::vector<FeatureRow> keep;
      for (const auto& r : rows)
        if (r.diagnosis && task.class_of(*r.diagnosis) >= 0) keep.push_back(r);
      std::vector<FeatureRow> background_source = keep, targets = keep;
      if (!explain_manifest.empty()) {
        const auto data = Dataset::open(explain_manifest);
        background_source = rows_in_split(keep, data, Split::Train);
        targets = rows_in_split(keep, data, Split::Test);
      }
      if (targets.empty() || background_source.empty()) throw ValidationError("no rows to explain");
      const Matrix background =
          sample_background(clf.model_inputs(gather_inputs(clf, background_source)), background_rows, cfg.seed);
      const Matrix X = clf.model_inputs(gather_inputs(clf, targets));
      std::vector<std::string> names = clf.feature_names;
      if (clf.pca) {
        names.clear();
        for (Eigen::Index k = 0; k < clf.pca->k(); ++k) names.push_back("PC" + std::to_string(k + 1));
      }
      auto report = global_importance(clf.forest, X, background, names, cfg.jobs);
      for (const auto& t : targets) report.row_ids.push_back(t.roi_id);
      auto j = shap_report_to_json(report, names, clf.class_names, top_k);
      j["space"] = clf.pca ? "pca" : "features";
      j["background_rows"] = background.rows();
      write_json(j, explain_out);
      for (std::size_t i = 0; i < std::min(top_k, report.ranking.size()); ++i)
        std::printf("%2d  %s\n", report.ranking[i].rank, report.ranking[i].name.c_str());
    } else if (*bench) {
      SynthConfig sc;
      sc.width = sc.height = bench_size;
      auto& m = sc.classes[static_cast<int>(Diagnosis::DCIS)];
      m.duct_count = {bench_ducts, bench_ducts};
      const int r_hi = std::max(4, std::min(20, bench_size / 24));
      m.outer_radius = {std::max(3, r_hi / 2), r_hi};
      m.ring_thickness = {2, std::max(2, r_hi / 3)};
      Rng rng(bench_seed);
      const auto roi = generate_roi(Diagnosis::DCIS, sc, rng);
      const auto inst = derive_instances_weak(binarize(roi.raster), roi.boxes);
      std::vector<double> seconds;
      FeatureVector fv;
      for (int i = 0; i < bench_runs; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        fv = extract_features(roi.raster, inst);
        seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      }
      nlohmann::ordered_json j;
      j["size"] = bench_size;
      j["ducts"] = inst.count();
      j["runs"] = seconds;
      j["median_seconds"] = median(seconds);
      std::cout << j.dump() << "\n";
      if (!bench_out.empty()) write_json(j, bench_out);
    } else if (*serve) {
      auto cfg = serve_common.resolve();
      cfg.validate();
      AnnotationService service(Dataset::open(serve_manifest), cfg);
      httplib::Server server;
      mount(server, service);
      std::cerr << "serving " << service.dataset().records.size() << " ROIs on http://" << host << ":" << port << "\n";
      if (!server.listen(host, port)) throw IoError("cannot listen on " + host + ":" + std::to_string(port));
    }
  } catch (const Error& e) {
    std::cerr << nlohmann::json({{"error", {{"kind", e.kind()}, {"message", e.what()}}}}).dump() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json({{"error", {{"kind", "internal"}, {"message", e.what()}}}}).dump() << "\n";
    return 1;
  }
  return 0;
}
