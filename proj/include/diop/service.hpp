#pragma once

// Local HTTP service backing the annotation UI. Request and response bodies
// are JSON. Rasters are loaded once at start-up and never modified; the only
// write is PUT /boxes, serialized per ROI.

#include <map>
#include <memory>
#include <mutex>
#include <string>

#include "json.hpp"

#include "diop/common.hpp"
#include "diop/features.hpp"
#include "diop/instances.hpp"
#include "diop/pipeline.hpp"
#include "diop/raster.hpp"

// After Eigen: <resolv.h> (pulled in by httplib) defines a `_res` macro.
#include "httplib.h"

namespace diop {

inline constexpr int kPreviewMax = 128;

struct ServiceResponse {
  int status = 200;
  nlohmann::ordered_json body;
};

struct NotFoundError : Error {
  explicit NotFoundError(const std::string& m) : Error("not_found", m) {}
};

/// Downsamples a grid so neither side exceeds kPreviewMax.
template <typename T>
nlohmann::ordered_json preview_grid(const Grid<T>& g) {
  const double scale = std::min(1.0, static_cast<double>(kPreviewMax) / std::max(g.width, g.height));
  const int w = std::max(1, static_cast<int>(std::lround(g.width * scale)));
  const int h = std::max(1, static_cast<int>(std::lround(g.height * scale)));
  const auto small = resize_nearest(g, w, h);
  nlohmann::ordered_json j;
  j["width"] = w;
  j["height"] = h;
  auto cells = nlohmann::ordered_json::array();
  for (auto v : small.data) cells.push_back(static_cast<std::uint32_t>(v));
  j["cells"] = std::move(cells);
  return j;
}

class AnnotationService {
 public:
  AnnotationService(Dataset data, PipelineConfig cfg) : data_(std::move(data)), cfg_(std::move(cfg)) {
    for (const auto& r : data_.records) rasters_.emplace(r.id, data_.raster(r));
  }

  ServiceResponse handle(const std::string& method, const std::string& path,
                         const std::map<std::string, std::string>& query, const std::string& body) const {
    try {
      if (path == "/health" && method == "GET") return {200, {{"status", "ok"}, {"version", kVersion}}};
      if (path == "/derive" && method == "POST") return derive(parse(body));
      if (path == "/features" && method == "POST") return features(parse(body));
      if (path == "/mask" && (method == "POST" || method == "GET"))
        return mask(method == "GET" ? query_json(query) : parse(body));
      if (path == "/boxes" && method == "GET") return load_boxes(query_json(query));
      if (path == "/boxes" && method == "PUT") return save_boxes(query_json(query), parse(body));
      return error(404, "not_found", method + " " + path + " is not an endpoint");
    } catch (const NotFoundError& e) {
      return error(404, e.kind(), e.what());
    } catch (const ValidationError& e) {
      return error(400, e.kind(), e.what());
    } catch (const FormatError& e) {
      return error(400, e.kind(), e.what());
    } catch (const nlohmann::json::exception& e) {
      return error(400, "format", e.what());
    } catch (const std::exception& e) {
      return error(500, "internal", e.what());
    }
  }

  const Dataset& dataset() const { return data_; }

 private:
  static ServiceResponse error(int status, const std::string& kind, const std::string& message) {
    return {status, {{"error", {{"kind", kind}, {"message", message}}}}};
  }

  static nlohmann::json parse(const std::string& body) {
    try {
      auto j = nlohmann::json::parse(body.empty() ? std::string("{}") : body);
      if (!j.is_object()) throw ValidationError("request body must be a JSON object");
      return j;
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError(std::string("malformed request body: ") + e.what());
    }
  }

  static nlohmann::json query_json(const std::map<std::string, std::string>& q) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : q) j[k] = v;
    return j;
  }

  const RoiRecord& record(const nlohmann::json& req) const {
    if (!req.contains("roi") || !req["roi"].is_string()) throw ValidationError("request needs a string 'roi'");
    const auto* r = data_.find(req["roi"].get<std::string>());
    if (!r) throw NotFoundError("unknown ROI '" + req["roi"].get<std::string>() + "'");
    return *r;
  }

  const LabelRaster& raster(const RoiRecord& r) const { return rasters_.at(r.id); }

  std::vector<BoundingBox> request_boxes(const nlohmann::json& req, const LabelRaster& raster,
                                         std::vector<std::string>& warnings) const {
    if (!req.contains("boxes")) throw ValidationError("request needs 'boxes'");
    const auto doc = boxes_from_json({{"image", ""}, {"boxes", req["boxes"]}});
    return clamp_boxes(doc.boxes, raster.width, raster.height, &warnings);
  }

  AssignmentPolicy request_policy(const nlohmann::json& req) const {
    return req.contains("policy") ? parse_policy(req["policy"].get<std::string>()) : cfg_.policy;
  }

  ServiceResponse derive(const nlohmann::json& req) const {
    const auto& rec = record(req);
    const auto& r = raster(rec);
    std::vector<std::string> warnings;
    const auto boxes = request_boxes(req, r, warnings);
    const auto inst = derive_instances_weak(binarize(r), boxes, request_policy(req));
    nlohmann::ordered_json out;
    out["roi"] = rec.id;
    out["instance_count"] = inst.count();
    out["instances"] = instance_summary_json(inst)["instances"];
    if (inst.count() == 0)
      out["preview"] = {{"width", 0}, {"height", 0}, {"cells", nlohmann::ordered_json::array()}};
    else
      out["preview"] = preview_grid(inst.ids);
    out["warnings"] = warnings;
    return {200, out};
  }

  ServiceResponse features(const nlohmann::json& req) const {
    const auto& rec = record(req);
    const auto& r = raster(rec);
    std::vector<std::string> warnings;
    const auto boxes = request_boxes(req, r, warnings);
    const auto inst = derive_instances_weak(binarize(r), boxes, request_policy(req));
    const auto box = duct_features(r, inst, FeatureLevel::Box, cfg_.features.connectivity);
    const auto msk = duct_features(r, inst, FeatureLevel::Mask, cfg_.features.connectivity);
    const auto& names = feature_names();
    nlohmann::ordered_json out;
    out["roi"] = rec.id;
    out["box_names"] = std::vector<std::string>(names.begin() + level_offset(FeatureLevel::Box),
                                                 names.begin() + level_offset(FeatureLevel::Box) + kDuctBlock);
    out["mask_names"] = std::vector<std::string>(names.begin() + level_offset(FeatureLevel::Mask),
                                                  names.begin() + level_offset(FeatureLevel::Mask) + kDuctBlock);
    auto ducts = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < inst.count(); ++i)
      ducts.push_back({{"id", inst.instances[i].id}, {"box", box[i]}, {"mask", msk[i]}});
    out["ducts"] = std::move(ducts);
    out["warnings"] = warnings;
    return {200, out};
  }

  ServiceResponse mask(const nlohmann::json& req) const {
    const auto& rec = record(req);
    const auto& r = raster(rec);
    LabelSet fg = kDuctForeground;
    if (req.contains("foreground")) {
      fg = {};
      auto labels = req["foreground"];
      if (labels.is_string()) {  // query form: comma separated
        std::stringstream ss(labels.get<std::string>());
        labels = nlohmann::json::array();
        for (std::string s; std::getline(ss, s, ',');) labels.push_back(s);
      }
      for (const auto& l : labels) {
        const auto label = label_from_name(l.get<std::string>());
        if (!label) throw ValidationError("unknown tissue label '" + l.get<std::string>() + "'");
        fg.insert(*label);
      }
    }
    const auto m = binarize(r, fg);
    nlohmann::ordered_json out;
    out["roi"] = rec.id;
    out["width"] = m.width;
    out["height"] = m.height;
    out["foreground_pixels"] = std::count(m.data.begin(), m.data.end(), 1);
    out["preview"] = preview_grid(m);
    return {200, out};
  }

  ServiceResponse load_boxes(const nlohmann::json& req) const {
    const auto& rec = record(req);
    const auto path = data_.boxes_path(rec);
    std::lock_guard<std::mutex> lock(lock_for(rec.id));
    if (!std::filesystem::exists(path)) return {200, boxes_to_json({rec.id, {}})};
    return {200, boxes_to_json(read_boxes(path))};
  }

  ServiceResponse save_boxes(const nlohmann::json& query, const nlohmann::json& body) const {
    const auto& rec = record(query);
    auto doc = boxes_from_json(body);
    if (doc.image != rec.id) throw ValidationError("document image '" + doc.image + "' does not match ROI");
    for (const auto& b : doc.boxes)
      if (b.w < 1 || b.h < 1) throw ValidationError("boxes must have positive width and height");
    const auto path = data_.boxes_path(rec);
    std::lock_guard<std::mutex> lock(lock_for(rec.id));
    std::filesystem::create_directories(path.parent_path());
    write_boxes(doc, path);
    return {200, {{"roi", rec.id}, {"saved", doc.boxes.size()}}};
  }

  std::mutex& lock_for(const std::string& id) const {
    std::lock_guard<std::mutex> guard(locks_mu_);
    auto& m = locks_[id];
    if (!m) m = std::make_unique<std::mutex>();
    return *m;
  }

  Dataset data_;
  PipelineConfig cfg_;
  std::map<std::string, LabelRaster> rasters_;
  mutable std::mutex locks_mu_;
  mutable std::map<std::string, std::unique_ptr<std::mutex>> locks_;
};

/// Binds the service's endpoints onto an httplib server (not yet listening).
inline void mount(httplib::Server& server, const AnnotationService& service) {
  auto adapt = [&service](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query[k] = v;
    const auto out = service.handle(req.method, req.path, query, req.body);
    res.status = out.status;
    res.set_content(out.body.dump(), "application/json");
  };
  for (const char* path : {"/health", "/derive", "/features", "/mask", "/boxes"}) {
    server.Get(path, adapt);
    server.Post(path, adapt);
    server.Put(path, adapt);
  }
}

}  // namespace diop
