#pragma once

// Tissue-label rasters, bit masks, box annotations and dataset manifests,
// plus their on-disk formats (binary PGM and JSON documents).

#include <array>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "diop/common.hpp"

namespace diop {

enum class TissueLabel : std::uint8_t { BG = 0, BE, ME, NS, DS, SC, BL, NC };

inline constexpr int kNumLabels = 8;
inline constexpr std::array<std::string_view, kNumLabels> kLabelNames = {
    "BG", "BE", "ME", "NS", "DS", "SC", "BL", "NC"};

inline constexpr int code(TissueLabel l) { return static_cast<int>(l); }
inline std::string_view label_name(TissueLabel l) { return kLabelNames[code(l)]; }

inline std::optional<TissueLabel> label_from_name(std::string_view name) {
  for (int i = 0; i < kNumLabels; ++i)
    if (kLabelNames[i] == name) return static_cast<TissueLabel>(i);
  return std::nullopt;
}

/// Small fixed set of tissue labels.
class LabelSet {
 public:
  constexpr LabelSet() = default;
  constexpr LabelSet(std::initializer_list<TissueLabel> labels) {
    for (auto l : labels) bits_ |= static_cast<std::uint8_t>(1u << code(l));
  }
  static constexpr LabelSet all() {
    LabelSet s;
    s.bits_ = 0xff;
    return s;
  }
  constexpr bool contains(TissueLabel l) const { return (bits_ >> code(l)) & 1u; }
  constexpr void insert(TissueLabel l) { bits_ |= static_cast<std::uint8_t>(1u << code(l)); }
  constexpr bool operator==(const LabelSet&) const = default;

 private:
  std::uint8_t bits_ = 0;
};

/// Tissues surrounding ducts; the default foreground for instance derivation.
inline constexpr LabelSet kDuctForeground = {TissueLabel::BE, TissueLabel::ME,
                                             TissueLabel::SC, TissueLabel::NC};

/// Row-major 2-D grid. Shared by label rasters, bit masks and instance maps.
template <typename T>
struct Grid {
  int width = 0;
  int height = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int w, int h, T fill = T{})
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {
    if (w < 1 || h < 1) throw ValidationError("grid dimensions must be >= 1");
  }

  std::size_t size() const { return data.size(); }
  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * width + x;
  }
  bool inside(int x, int y) const {
    return x >= 0 && y >= 0 && x < width && y < height;
  }
  T& at(int x, int y) { return data[index(x, y)]; }
  const T& at(int x, int y) const { return data[index(x, y)]; }
  bool operator==(const Grid&) const = default;
};

using LabelRaster = Grid<TissueLabel>;
using BitMask = Grid<std::uint8_t>;  // 0 / 1

struct BoundingBox {
  int x = 0;  // left column, inclusive
  int y = 0;  // top row, inclusive
  int w = 1;
  int h = 1;

  int right() const { return x + w; }   // exclusive
  int bottom() const { return y + h; }  // exclusive
  long long area() const { return static_cast<long long>(w) * h; }
  bool contains(int px, int py) const {
    return px >= x && py >= y && px < right() && py < bottom();
  }
  bool operator==(const BoundingBox&) const = default;
};

enum class Diagnosis { Benign = 0, Atypia, DCIS, Invasive };
inline constexpr int kNumDiagnoses = 4;
inline constexpr std::array<std::string_view, kNumDiagnoses> kDiagnosisNames = {
    "Benign", "Atypia", "DCIS", "Invasive"};

inline std::string_view diagnosis_name(Diagnosis d) {
  return kDiagnosisNames[static_cast<int>(d)];
}
inline Diagnosis parse_diagnosis(std::string_view s) {
  for (int i = 0; i < kNumDiagnoses; ++i)
    if (kDiagnosisNames[i] == s) return static_cast<Diagnosis>(i);
  throw ValidationError("unknown diagnosis '" + std::string(s) + "'");
}

enum class Split { Train, Val, Test, Unassigned };
inline constexpr std::array<std::string_view, 4> kSplitNames = {"train", "val", "test",
                                                                "unassigned"};
inline std::string_view split_name(Split s) { return kSplitNames[static_cast<int>(s)]; }
inline Split parse_split(std::string_view s) {
  for (int i = 0; i < 4; ++i)
    if (kSplitNames[i] == s) return static_cast<Split>(i);
  throw ValidationError("unknown split '" + std::string(s) + "'");
}

struct RoiRecord {
  std::string id;
  std::string raster;  // path, relative to the manifest directory
  std::optional<std::string> boxes;
  std::optional<Diagnosis> diagnosis;
  Split split = Split::Unassigned;
  bool operator==(const RoiRecord&) const = default;
};

// ---------------------------------------------------------------------------
// Pixel operations

inline BitMask binarize(const LabelRaster& raster, LabelSet foreground = kDuctForeground) {
  BitMask mask(raster.width, raster.height, 0);
  for (std::size_t i = 0; i < raster.size(); ++i)
    mask.data[i] = foreground.contains(raster.data[i]) ? 1 : 0;
  return mask;
}

/// Nearest-neighbour resize sampling at pixel centres.
template <typename T>
Grid<T> resize_nearest(const Grid<T>& in, int out_w, int out_h) {
  if (out_w < 1 || out_h < 1) throw ValidationError("output dimensions must be >= 1");
  Grid<T> out(out_w, out_h);
  for (int i = 0; i < out_h; ++i) {
    const long long sy = (2LL * i + 1) * in.height / (2LL * out_h);
    for (int j = 0; j < out_w; ++j) {
      const long long sx = (2LL * j + 1) * in.width / (2LL * out_w);
      out.at(j, i) = in.at(static_cast<int>(sx), static_cast<int>(sy));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PGM (P5) codec

namespace detail {

struct PgmHeader {
  int width = 0;
  int height = 0;
  int maxval = 0;
  std::size_t data_offset = 0;
};

inline PgmHeader parse_pgm_header(const std::string& bytes, const std::string& what) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5')
    throw FormatError(what + ": bad magic (expected P5)");
  std::size_t pos = 2;
  auto skip_ws_and_comments = [&] {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      return;
    }
  };
  auto read_int = [&](const char* field) {
    skip_ws_and_comments();
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos])))
      throw FormatError(what + ": malformed header field '" + field + "'");
    long long v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 1'000'000'000) throw FormatError(what + ": header value too large");
      ++pos;
    }
    return static_cast<int>(v);
  };
  PgmHeader h;
  h.width = read_int("width");
  h.height = read_int("height");
  h.maxval = read_int("maxval");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw FormatError(what + ": missing whitespace after header");
  h.data_offset = pos + 1;
  if (h.width < 1 || h.height < 1) throw FormatError(what + ": dimensions must be >= 1");
  if (h.maxval < 1 || h.maxval > 65535) throw FormatError(what + ": maxval out of range");
  return h;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

}  // namespace detail

inline LabelRaster decode_label_raster(const std::string& bytes, const std::string& what = "raster") {
  const auto h = detail::parse_pgm_header(bytes, what);
  if (h.maxval > 255) throw FormatError(what + ": label raster must be 8-bit (maxval <= 255)");
  const std::size_t n = static_cast<std::size_t>(h.width) * h.height;
  if (bytes.size() - h.data_offset < n) throw FormatError(what + ": truncated pixel data");
  LabelRaster r(h.width, h.height);
  for (std::size_t i = 0; i < n; ++i) {
    const auto v = static_cast<unsigned char>(bytes[h.data_offset + i]);
    if (v >= kNumLabels)
      throw LabelRangeError(what + ": pixel " + std::to_string(i) + " has label value " +
                                std::to_string(v) + " > 7",
                            i);
    r.data[i] = static_cast<TissueLabel>(v);
  }
  return r;
}

inline std::string encode_label_raster(const LabelRaster& r) {
  std::string out = "P5\n" + std::to_string(r.width) + " " + std::to_string(r.height) + "\n255\n";
  out.reserve(out.size() + r.size());
  for (auto l : r.data) out.push_back(static_cast<char>(code(l)));
  return out;
}

inline LabelRaster read_label_raster(const std::filesystem::path& path) {
  return decode_label_raster(detail::read_file(path), path.string());
}

inline void write_label_raster(const LabelRaster& r, const std::filesystem::path& path) {
  detail::write_file(path, encode_label_raster(r));
}

using IdRaster = Grid<std::uint16_t>;

inline IdRaster decode_id_raster(const std::string& bytes, const std::string& what = "instance raster") {
  const auto h = detail::parse_pgm_header(bytes, what);
  const bool wide = h.maxval > 255;
  const std::size_t n = static_cast<std::size_t>(h.width) * h.height;
  if (bytes.size() - h.data_offset < n * (wide ? 2 : 1))
    throw FormatError(what + ": truncated pixel data");
  IdRaster r(h.width, h.height);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + h.data_offset);
  for (std::size_t i = 0; i < n; ++i)
    r.data[i] = wide ? static_cast<std::uint16_t>((p[2 * i] << 8) | p[2 * i + 1]) : p[i];
  return r;
}

inline std::string encode_id_raster(const IdRaster& r) {
  std::string out = "P5\n" + std::to_string(r.width) + " " + std::to_string(r.height) + "\n65535\n";
  out.reserve(out.size() + 2 * r.size());
  for (auto v : r.data) {
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v & 0xff));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Box annotation documents

struct BoxesDocument {
  std::string image;
  std::vector<BoundingBox> boxes;
  bool operator==(const BoxesDocument&) const = default;
};

inline nlohmann::ordered_json boxes_to_json(const BoxesDocument& doc) {
  nlohmann::ordered_json j;
  j["image"] = doc.image;
  j["boxes"] = nlohmann::ordered_json::array();
  for (const auto& b : doc.boxes)
    j["boxes"].push_back({{"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}});
  return j;
}

inline BoxesDocument boxes_from_json(const nlohmann::json& j) {
  try {
    BoxesDocument doc;
    doc.image = j.at("image").get<std::string>();
    for (const auto& b : j.at("boxes"))
      doc.boxes.push_back({b.at("x").get<int>(), b.at("y").get<int>(), b.at("w").get<int>(),
                           b.at("h").get<int>()});
    return doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("boxes document: ") + e.what());
  }
}

/// Clamps boxes to [0,width)x[0,height). Boxes that change are reported in
/// `warnings`; boxes left empty are dropped.
inline std::vector<BoundingBox> clamp_boxes(const std::vector<BoundingBox>& boxes, int width,
                                            int height, std::vector<std::string>* warnings = nullptr) {
  std::vector<BoundingBox> out;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto& b = boxes[i];
    const long long x0 = std::max<long long>(b.x, 0), y0 = std::max<long long>(b.y, 0);
    const long long x1 = std::min<long long>(static_cast<long long>(b.x) + b.w, width);
    const long long y1 = std::min<long long>(static_cast<long long>(b.y) + b.h, height);
    if (x1 <= x0 || y1 <= y0) {
      if (warnings) warnings->push_back("box " + std::to_string(i) + " empty after clamping; dropped");
      continue;
    }
    BoundingBox c{static_cast<int>(x0), static_cast<int>(y0), static_cast<int>(x1 - x0),
                  static_cast<int>(y1 - y0)};
    if (!(c == b) && warnings) warnings->push_back("box " + std::to_string(i) + " clamped to raster");
    out.push_back(c);
  }
  return out;
}

inline BoxesDocument read_boxes(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return boxes_from_json(j);
}

inline void write_boxes(const BoxesDocument& doc, const std::filesystem::path& path) {
  detail::write_file(path, boxes_to_json(doc).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Manifests

inline nlohmann::ordered_json manifest_to_json(const std::vector<RoiRecord>& records) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["raster"] = r.raster;
    j["boxes"] = r.boxes ? nlohmann::ordered_json(*r.boxes) : nlohmann::ordered_json(nullptr);
    j["diagnosis"] = r.diagnosis ? nlohmann::ordered_json(std::string(diagnosis_name(*r.diagnosis)))
                                 : nlohmann::ordered_json(nullptr);
    j["split"] = std::string(split_name(r.split));
    arr.push_back(std::move(j));
  }
  return arr;
}

inline std::vector<RoiRecord> manifest_from_json(const nlohmann::json& arr) {
  if (!arr.is_array()) throw FormatError("manifest must be a JSON array");
  std::vector<RoiRecord> out;
  try {
    for (const auto& j : arr) {
      RoiRecord r;
      r.id = j.at("id").get<std::string>();
      r.raster = j.at("raster").get<std::string>();
      if (j.contains("boxes") && !j["boxes"].is_null()) r.boxes = j["boxes"].get<std::string>();
      if (j.contains("diagnosis") && !j["diagnosis"].is_null())
        r.diagnosis = parse_diagnosis(j["diagnosis"].get<std::string>());
      if (j.contains("split") && !j["split"].is_null())
        r.split = parse_split(j["split"].get<std::string>());
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  return out;
}

inline std::vector<RoiRecord> read_manifest(const std::filesystem::path& path) {
  try {
    return manifest_from_json(nlohmann::json::parse(detail::read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void write_manifest(const std::vector<RoiRecord>& records, const std::filesystem::path& path) {
  detail::write_file(path, manifest_to_json(records).dump(2) + "\n");
}

}  // namespace diop
