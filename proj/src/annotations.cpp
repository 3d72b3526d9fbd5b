#include "wsireg/annotations.hpp"

#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "wsireg/tile_codec.hpp"

namespace wsireg {

using nlohmann::json;

std::string to_string(RegionSource s) {
  return s == RegionSource::Manual ? "manual" : "automatic";
}

RegionSource region_source_from_string(const std::string& s) {
  if (s == "manual") return RegionSource::Manual;
  if (s == "automatic") return RegionSource::Automatic;
  throw Error(ErrorKind::Format, "unknown region source '" + s + "'");
}

namespace {

json rect_json(const Rect& r) { return {{"x", r.x}, {"y", r.y}, {"w", r.w}, {"h", r.h}}; }

Rect rect_from(const json& j) {
  return {j.at("x").get<std::int64_t>(), j.at("y").get<std::int64_t>(),
          j.at("w").get<std::int64_t>(), j.at("h").get<std::int64_t>()};
}

json point_json(const Point2& p) { return json::array({p.x, p.y}); }

Point2 point_from(const json& j) {
  if (!j.is_array() || j.size() != 2) throw Error(ErrorKind::Format, "point must be [x, y]");
  return {j[0].get<double>(), j[1].get<double>()};
}

}  // namespace

AnnotationDocument parse_annotations(const std::string& text) {
  try {
    const json j = json::parse(text);
    if (j.value("schema", std::string()) != kAnnotationSchema)
      throw Error(ErrorKind::Format,
                  std::string("annotation document must declare schema ") + kAnnotationSchema);
    AnnotationDocument doc;
    doc.pair_id = j.at("pair_id").get<std::string>();
    doc.fixed_slide = j.at("fixed_slide").get<std::string>();
    doc.moving_slide = j.at("moving_slide").get<std::string>();
    doc.revision = j.value("revision", std::int64_t{0});
    for (const auto& r : j.value("regions", json::array())) {
      RegionPair rp;
      rp.name = r.at("name").get<std::string>();
      rp.fixed_rect = rect_from(r.at("fixed_rect"));
      rp.moving_rect = rect_from(r.at("moving_rect"));
      rp.source = region_source_from_string(r.value("source", std::string("manual")));
      for (const auto& l : r.value("landmarks", json::array()))
        rp.landmarks.push_back({point_from(l.at("fixed")), point_from(l.at("moving"))});
      if (r.contains("polygon") && !r.at("polygon").is_null())
        for (const auto& p : r.at("polygon")) rp.polygon.push_back(point_from(p));
      doc.regions.push_back(std::move(rp));
    }
    for (const auto& s : j.value("palette_samples", json::array())) {
      PaletteSample ps;
      ps.slide = s.at("slide").get<std::string>();
      ps.label = s.at("label").get<std::string>();
      ps.x = s.at("x").get<std::int64_t>();
      ps.y = s.at("y").get<std::int64_t>();
      const auto& rgb = s.at("rgb");
      if (!rgb.is_array() || rgb.size() != 3) throw Error(ErrorKind::Format, "rgb must have 3 values");
      for (std::size_t c = 0; c < 3; ++c) {
        const int v = rgb[c].get<int>();
        if (v < 0 || v > 255) throw Error(ErrorKind::Format, "rgb value out of range");
        ps.rgb[c] = static_cast<std::uint8_t>(v);
      }
      doc.palette_samples.push_back(ps);
    }
    return doc;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, std::string("malformed annotation document: ") + e.what());
  }
}

std::string format_annotations(const AnnotationDocument& doc) {
  json regions = json::array();
  for (const auto& r : doc.regions) {
    json lms = json::array();
    for (const auto& l : r.landmarks)
      lms.push_back({{"fixed", point_json(l.fixed)}, {"moving", point_json(l.moving)}});
    json poly = nullptr;
    if (!r.polygon.empty()) {
      poly = json::array();
      for (const auto& p : r.polygon) poly.push_back(point_json(p));
    }
    regions.push_back({{"name", r.name},
                       {"fixed_rect", rect_json(r.fixed_rect)},
                       {"moving_rect", rect_json(r.moving_rect)},
                       {"landmarks", lms},
                       {"source", to_string(r.source)},
                       {"polygon", poly}});
  }
  json samples = json::array();
  for (const auto& s : doc.palette_samples)
    samples.push_back({{"slide", s.slide},
                       {"label", s.label},
                       {"x", s.x},
                       {"y", s.y},
                       {"rgb", {s.rgb[0], s.rgb[1], s.rgb[2]}}});
  const json j = {{"schema", kAnnotationSchema},  {"pair_id", doc.pair_id},
                  {"fixed_slide", doc.fixed_slide}, {"moving_slide", doc.moving_slide},
                  {"revision", doc.revision},      {"regions", regions},
                  {"palette_samples", samples}};
  return j.dump(2) + "\n";
}

AnnotationDocument load_annotations(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_annotations(std::string(bytes.begin(), bytes.end()));
}

void save_annotations(const AnnotationDocument& doc, const std::filesystem::path& path) {
  const std::string text = format_annotations(doc);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + tmp.string());
    out << text;
    out.flush();
    if (!out) throw Error(ErrorKind::Io, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot replace " + path.string() + ": " + ec.message());
}

std::vector<FieldError> validate_annotations(const AnnotationDocument& doc,
                                             const SlideBounds& fixed,
                                             const SlideBounds& moving) {
  std::vector<FieldError> errs;
  if (doc.pair_id.empty()) errs.push_back({"pair_id", "must not be empty"});
  if (!fixed.slide_id.empty() && doc.fixed_slide != fixed.slide_id)
    errs.push_back({"fixed_slide", "'" + doc.fixed_slide + "' does not match slide '" +
                                       fixed.slide_id + "'"});
  if (!moving.slide_id.empty() && doc.moving_slide != moving.slide_id)
    errs.push_back({"moving_slide", "'" + doc.moving_slide + "' does not match slide '" +
                                        moving.slide_id + "'"});
  if (doc.revision < 0) errs.push_back({"revision", "must be >= 0"});
  std::set<std::string> names;
  for (std::size_t i = 0; i < doc.regions.size(); ++i) {
    const auto& r = doc.regions[i];
    const std::string base = "regions[" + std::to_string(i) + "]";
    if (r.name.empty()) errs.push_back({base + ".name", "must not be empty"});
    else if (!names.insert(r.name).second)
      errs.push_back({base + ".name", "duplicate region name '" + r.name + "'"});
    if (!r.fixed_rect.inside(fixed.width, fixed.height))
      errs.push_back({base + ".fixed_rect",
                      to_string(r.fixed_rect) + " is not inside the fixed slide (" +
                          std::to_string(fixed.width) + "x" + std::to_string(fixed.height) + ")"});
    if (!r.moving_rect.inside(moving.width, moving.height))
      errs.push_back({base + ".moving_rect",
                      to_string(r.moving_rect) + " is not inside the moving slide (" +
                          std::to_string(moving.width) + "x" + std::to_string(moving.height) +
                          ")"});
    for (std::size_t k = 0; k < r.landmarks.size(); ++k) {
      const auto& l = r.landmarks[k];
      const std::string lb = base + ".landmarks[" + std::to_string(k) + "]";
      if (!r.fixed_rect.contains(l.fixed.x, l.fixed.y))
        errs.push_back({lb + ".fixed", "landmark " + std::to_string(k) +
                                           " lies outside the region's fixed_rect"});
      if (!r.moving_rect.contains(l.moving.x, l.moving.y))
        errs.push_back({lb + ".moving", "landmark " + std::to_string(k) +
                                            " lies outside the region's moving_rect"});
    }
  }
  for (std::size_t i = 0; i < doc.palette_samples.size(); ++i) {
    const auto& s = doc.palette_samples[i];
    const std::string base = "palette_samples[" + std::to_string(i) + "]";
    const SlideBounds* b = s.slide == doc.fixed_slide    ? &fixed
                           : s.slide == doc.moving_slide ? &moving
                                                         : nullptr;
    if (!b) {
      errs.push_back({base + ".slide", "'" + s.slide + "' is neither slide of the pair"});
      continue;
    }
    if (s.label.empty()) errs.push_back({base + ".label", "must not be empty"});
    if (s.x < 0 || s.y < 0 || s.x >= b->width || s.y >= b->height)
      errs.push_back({base, "pixel (" + std::to_string(s.x) + "," + std::to_string(s.y) +
                                ") outside slide"});
  }
  return errs;
}

std::string describe(const std::vector<FieldError>& errors) {
  std::string out;
  for (const auto& e : errors) {
    if (!out.empty()) out += "; ";
    out += e.field + ": " + e.message;
  }
  return out;
}

}  // namespace wsireg
