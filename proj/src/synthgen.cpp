#include "wsireg/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

#include <nlohmann/json.hpp>

#include "wsireg/parallel.hpp"

namespace wsireg {

using nlohmann::json;

std::string to_string(ArtifactKind k) { return k == ArtifactKind::Tear ? "tear" : "fold"; }

namespace {

ArtifactKind artifact_kind_from_string(const std::string& s) {
  if (s == "tear") return ArtifactKind::Tear;
  if (s == "fold") return ArtifactKind::Fold;
  throw Error(ErrorKind::Format, "unknown artifact kind '" + s + "'");
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t hash(std::uint64_t seed, std::uint64_t tag, std::int64_t a, std::int64_t b,
                   std::uint64_t c = 0) {
  std::uint64_t h = splitmix(seed ^ (tag * 0x632be59bd9b4e019ULL));
  h = splitmix(h ^ static_cast<std::uint64_t>(a));
  h = splitmix(h ^ static_cast<std::uint64_t>(b));
  return splitmix(h ^ c);
}

double unit(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

// Hash tags keep the independent random fields apart.
enum Tag : std::uint64_t {
  kBackground = 1,
  kBackgroundFine,
  kNucleus,
  kDab,
  kDabExpressed,
  kMask,
  kNoise,
};

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

// Bilinearly blended lattice noise in [0, 1].
double value_noise(std::uint64_t seed, Tag tag, double x, double y, double spacing) {
  const double fx = x / spacing;
  const double fy = y / spacing;
  const double x0 = std::floor(fx);
  const double y0 = std::floor(fy);
  const auto ix = static_cast<std::int64_t>(x0);
  const auto iy = static_cast<std::int64_t>(y0);
  const double tx = smooth(fx - x0);
  const double ty = smooth(fy - y0);
  const double v00 = unit(hash(seed, tag, ix, iy));
  const double v10 = unit(hash(seed, tag, ix + 1, iy));
  const double v01 = unit(hash(seed, tag, ix, iy + 1));
  const double v11 = unit(hash(seed, tag, ix + 1, iy + 1));
  return (v00 * (1 - tx) + v10 * tx) * (1 - ty) + (v01 * (1 - tx) + v11 * tx) * ty;
}

struct Blob {
  double x, y, sigma, amplitude;
};

// At most one blob per cell, placed so its 3-sigma support stays within one
// neighbouring cell.
std::optional<Blob> cell_blob(std::uint64_t seed, Tag tag, std::int64_t cx, std::int64_t cy,
                              double cell, double probability, double sigma_lo, double sigma_hi,
                              double amp_lo, double amp_hi) {
  const std::uint64_t h = hash(seed, tag, cx, cy);
  if (unit(h) >= probability) return std::nullopt;
  const std::uint64_t h1 = splitmix(h);
  const std::uint64_t h2 = splitmix(h1);
  const std::uint64_t h3 = splitmix(h2);
  const std::uint64_t h4 = splitmix(h3);
  return Blob{(static_cast<double>(cx) + unit(h1)) * cell,
              (static_cast<double>(cy) + unit(h2)) * cell,
              sigma_lo + (sigma_hi - sigma_lo) * unit(h3),
              amp_lo + (amp_hi - amp_lo) * unit(h4)};
}

constexpr double kNucleusCell = 24.0;
constexpr double kDabCell = 48.0;

bool point_in_polygon(const std::vector<Point2>& poly, double x, double y) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point2& a = poly[i];
    const Point2& b = poly[j];
    if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x)
      inside = !inside;
  }
  return inside;
}

bool in_core(const Rect& core, Point2 p) {
  return p.x >= static_cast<double>(core.x) && p.x < static_cast<double>(core.right()) &&
         p.y >= static_cast<double>(core.y) && p.y < static_cast<double>(core.bottom());
}

double distance_to(const Rect& core, Point2 p) {
  const double dx = std::max({static_cast<double>(core.x) - p.x, 0.0,
                              p.x - static_cast<double>(core.right())});
  const double dy = std::max({static_cast<double>(core.y) - p.y, 0.0,
                              p.y - static_cast<double>(core.bottom())});
  return std::hypot(dx, dy);
}

Rect clip(const Rect& r, std::int64_t w, std::int64_t h) { return intersect(r, Rect{0, 0, w, h}); }

Rect bounding_rect(const std::vector<Point2>& pts, std::int64_t margin, std::int64_t w,
                   std::int64_t h) {
  double x0 = pts[0].x, x1 = pts[0].x, y0 = pts[0].y, y1 = pts[0].y;
  for (const auto& p : pts) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  const auto ix0 = static_cast<std::int64_t>(std::floor(x0)) - margin;
  const auto iy0 = static_cast<std::int64_t>(std::floor(y0)) - margin;
  const auto ix1 = static_cast<std::int64_t>(std::ceil(x1)) + margin;
  const auto iy1 = static_cast<std::int64_t>(std::ceil(y1)) + margin;
  return clip(Rect{ix0, iy0, ix1 - ix0 + 1, iy1 - iy0 + 1}, w, h);
}

std::vector<Point2> rect_corners(const Rect& r) {
  const double x0 = static_cast<double>(r.x), y0 = static_cast<double>(r.y);
  const double x1 = static_cast<double>(r.right() - 1), y1 = static_cast<double>(r.bottom() - 1);
  return {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}};
}

void validate_scene(const SyntheticScene& s) {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::Validation, m); };
  if (s.slides < 2) fail("a synthetic set needs at least 2 slides");
  if (s.grid_cols < 1 || s.grid_rows < 1) fail("region grid must be at least 1x1");
  if (s.width < 64 * s.grid_cols || s.height < 64 * s.grid_rows)
    fail("regions do not cover the canvas: cells would be smaller than 64 px");
  if (s.overlap_px < 0 || s.moving_margin_px < 0) fail("overlap and margin must be >= 0");
  if (!(s.min_scale > 0.0) || s.max_scale < s.min_scale) fail("invalid scale range");
  if (s.max_translation_px < 0.0 || s.max_rotation_deg < 0.0)
    fail("translation and rotation bounds must be >= 0");
  if (s.landmarks_per_region < 0) fail("landmarks_per_region must be >= 0");
  if (s.noise_amplitude < 0.0) fail("noise_amplitude must be >= 0");
  if (s.tile_size < 16) fail("tile_size must be >= 16");
  const std::size_t regions = static_cast<std::size_t>(s.grid_cols * s.grid_rows);
  if (!s.transforms.empty()) {
    if (s.transforms.size() != static_cast<std::size_t>(s.slides - 1))
      fail("explicit transforms must list every moving slide");
    for (const auto& per_slide : s.transforms) {
      if (per_slide.size() != regions)
        fail("explicit transforms must give one matrix per region (" + std::to_string(regions) +
             ")");
      for (const auto& t : per_slide)
        if (!t.invertible()) fail("explicit transform is not invertible: " + to_string(t));
    }
  }
  for (const auto& a : s.artifacts) {
    if (a.slide < 1 || a.slide >= s.slides) fail("artifacts can only be placed on moving slides");
    if (a.region < 0 || static_cast<std::size_t>(a.region) >= regions)
      fail("artifact region index out of range");
    if (!(a.size > 0.0 && a.size <= 1.0)) fail("artifact size must be in (0, 1]");
  }
}

}  // namespace

SceneModel::SceneModel(const SyntheticScene& scene) : scene_(scene) {
  validate_scene(scene_);
  truth_.seed = scene_.seed;
  truth_.width = scene_.width;
  truth_.height = scene_.height;
  truth_.stains = scene_.stains;

  std::vector<Rect> cells;
  for (int r = 0; r < scene_.grid_rows; ++r)
    for (int c = 0; c < scene_.grid_cols; ++c) {
      const std::int64_t x0 = scene_.width * c / scene_.grid_cols;
      const std::int64_t x1 = scene_.width * (c + 1) / scene_.grid_cols;
      const std::int64_t y0 = scene_.height * r / scene_.grid_rows;
      const std::int64_t y1 = scene_.height * (r + 1) / scene_.grid_rows;
      cells.push_back({x0, y0, x1 - x0, y1 - y0});
    }

  // Transforms, artifacts and landmarks draw from separate streams so a
  // twin scene differing only in artifacts keeps the same warps.
  std::mt19937_64 warp_rng(splitmix(scene_.seed ^ 0x5741525053ULL));
  std::mt19937_64 artifact_rng(splitmix(scene_.seed ^ 0x4152544946ULL));
  std::mt19937_64 landmark_rng(splitmix(scene_.seed ^ 0x4c414e444dULL));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](std::mt19937_64& g, double lo, double hi) { return lo + (hi - lo) * u01(g); };

  truth_.slides.resize(static_cast<std::size_t>(scene_.slides));
  cores_.assign(static_cast<std::size_t>(scene_.slides), cells);
  for (int s = 0; s < scene_.slides; ++s) truth_.slides[static_cast<std::size_t>(s)].slide_id = slide_id(s);

  for (int s = 1; s < scene_.slides; ++s) {
    auto& st = truth_.slides[static_cast<std::size_t>(s)];
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const Rect& core = cells[i];
      const Point2 c{core.center_x(), core.center_y()};
      const double deg = uniform(warp_rng, -scene_.max_rotation_deg, scene_.max_rotation_deg);
      const double scale = uniform(warp_rng, scene_.min_scale, scene_.max_scale);
      const double ang = uniform(warp_rng, 0.0, 2.0 * std::numbers::pi);
      const double mag = scene_.max_translation_px * std::sqrt(u01(warp_rng));
      AffineTransform t =
          AffineTransform::similarity(deg, scale, c, mag * std::cos(ang), mag * std::sin(ang));
      if (!scene_.transforms.empty())
        t = scene_.transforms[static_cast<std::size_t>(s - 1)][i];

      SyntheticRegion reg;
      reg.core = core;
      reg.transform = t;
      reg.pair.name = "region_" + std::to_string(i + 1);
      reg.pair.source = RegionSource::Automatic;
      reg.pair.fixed_rect = clip(Rect{core.x - scene_.overlap_px, core.y - scene_.overlap_px,
                                      core.w + 2 * scene_.overlap_px,
                                      core.h + 2 * scene_.overlap_px},
                                 scene_.width, scene_.height);
      const AffineTransform inv = t.inverse();
      std::vector<Point2> back;
      for (const auto& p : rect_corners(reg.pair.fixed_rect)) back.push_back(inv.apply(p));
      reg.pair.moving_rect =
          bounding_rect(back, scene_.moving_margin_px, scene_.width, scene_.height);
      if (reg.pair.moving_rect.empty())
        throw Error(ErrorKind::Validation,
                    "region " + reg.pair.name + " maps entirely outside the moving canvas");
      st.regions.push_back(std::move(reg));
    }
  }

  for (const auto& spec : scene_.artifacts) {
    auto& st = truth_.slides[static_cast<std::size_t>(spec.slide)];
    const SyntheticRegion& reg = st.regions[static_cast<std::size_t>(spec.region)];
    const AffineTransform inv = reg.transform.inverse();
    const Point2 c = inv.apply({reg.core.center_x(), reg.core.center_y()});
    const double side = static_cast<double>(std::min(reg.core.w, reg.core.h)) * spec.size;
    Artifact a;
    a.kind = spec.kind;
    a.slide = spec.slide;
    a.region = spec.region;
    if (spec.kind == ArtifactKind::Tear) {
      // Ragged disk of diameter `side`.
      const int n = 12;
      const double phase = uniform(artifact_rng, 0.0, 2.0 * std::numbers::pi);
      for (int k = 0; k < n; ++k) {
        const double th = phase + 2.0 * std::numbers::pi * k / n;
        const double rad = 0.5 * side * uniform(artifact_rng, 0.7, 1.0);
        a.polygon.push_back({c.x + rad * std::cos(th), c.y + rad * std::sin(th)});
      }
    } else {
      // Band across the region; the overlay repeats tissue from one band
      // width away.
      const double th = uniform(artifact_rng, 0.0, std::numbers::pi);
      const double ux = std::cos(th), uy = std::sin(th);
      const double half_len = 0.5 * side, half_w = 0.1 * side;
      for (const auto& [l, w] : {std::pair{-1, -1}, {1, -1}, {1, 1}, {-1, 1}})
        a.polygon.push_back({c.x + l * half_len * ux - w * half_w * uy,
                             c.y + l * half_len * uy + w * half_w * ux});
      a.shift = {-2.0 * half_w * uy, 2.0 * half_w * ux};
    }
    st.artifacts.push_back(std::move(a));
  }

  for (int s = 1; s < scene_.slides; ++s) {
    auto& st = truth_.slides[static_cast<std::size_t>(s)];
    for (std::size_t i = 0; i < st.regions.size(); ++i) {
      auto& reg = st.regions[i];
      const AffineTransform inv = reg.transform.inverse();
      const Rect& core = reg.core;
      const double inset = std::min<double>(16.0, static_cast<double>(std::min(core.w, core.h)) / 4);
      int placed = 0;
      for (int attempt = 0; placed < scene_.landmarks_per_region && attempt < 1000; ++attempt) {
        const Point2 f{uniform(landmark_rng, static_cast<double>(core.x) + inset,
                               static_cast<double>(core.right()) - inset),
                       uniform(landmark_rng, static_cast<double>(core.y) + inset,
                               static_cast<double>(core.bottom()) - inset)};
        const Point2 m = inv.apply(f);
        if (!Rect{0, 0, scene_.width, scene_.height}.contains(m.x, m.y)) continue;
        if (!reg.pair.fixed_rect.contains(f.x, f.y) || !reg.pair.moving_rect.contains(m.x, m.y))
          continue;
        if (owner(s, m.x, m.y) != static_cast<int>(i) || in_artifact(s, m.x, m.y)) continue;
        reg.pair.landmarks.push_back({f, m});
        ++placed;
      }
    }
  }
}

std::string SceneModel::slide_id(int slide) const {
  return scene_.name + std::to_string(scene_.seed) + "-" +
         synthetic_slide_dir(slide, scene_.slides);
}

double SceneModel::tissue_mask(double x, double y) const {
  // Sparse lumens: tissue absent where the coarse field dips low.
  const double v = value_noise(scene_.seed, kMask, x, y, 256.0);
  return std::clamp((v - 0.12) / 0.1, 0.0, 1.0);
}

// Blobs of the 3x3 cell neighbourhood last visited; neighbouring pixels
// mostly revisit the same cells.
struct BlobNeighbourhood {
  std::int64_t cx = std::numeric_limits<std::int64_t>::min();
  std::int64_t cy = 0;
  int slide = -1;
  std::vector<Blob> blobs;
};

struct SceneModel::BlobCache {
  BlobNeighbourhood nuclei;
  BlobNeighbourhood dab;
};

namespace {

double blob_sum(const std::vector<Blob>& blobs, double x, double y) {
  double v = 0.0;
  for (const auto& b : blobs) {
    const double d2 = (x - b.x) * (x - b.x) + (y - b.y) * (y - b.y);
    const double s2 = b.sigma * b.sigma;
    if (d2 < 16.0 * s2) v += b.amplitude * std::exp(-0.5 * d2 / s2);
  }
  return v;
}

}  // namespace

double SceneModel::tissue_h(double x, double y, BlobCache& cache) const {
  const double h = 0.15 + 0.2 * value_noise(scene_.seed, kBackground, x, y, 96.0) +
                   0.08 * value_noise(scene_.seed, kBackgroundFine, x, y, 20.0);
  const auto cx = static_cast<std::int64_t>(std::floor(x / kNucleusCell));
  const auto cy = static_cast<std::int64_t>(std::floor(y / kNucleusCell));
  auto& n = cache.nuclei;
  if (n.cx != cx || n.cy != cy) {
    n.cx = cx;
    n.cy = cy;
    n.blobs.clear();
    for (std::int64_t j = cy - 1; j <= cy + 1; ++j)
      for (std::int64_t i = cx - 1; i <= cx + 1; ++i)
        if (auto b = cell_blob(scene_.seed, kNucleus, i, j, kNucleusCell, 0.75, 2.5, 6.0, 0.4, 1.0))
          n.blobs.push_back(*b);
  }
  return h + blob_sum(n.blobs, x, y);
}

double SceneModel::tissue_dab(int slide, double x, double y, BlobCache& cache) const {
  const auto cx = static_cast<std::int64_t>(std::floor(x / kDabCell));
  const auto cy = static_cast<std::int64_t>(std::floor(y / kDabCell));
  auto& n = cache.dab;
  if (n.cx != cx || n.cy != cy || n.slide != slide) {
    n.cx = cx;
    n.cy = cy;
    n.slide = slide;
    n.blobs.clear();
    for (std::int64_t j = cy - 1; j <= cy + 1; ++j)
      for (std::int64_t i = cx - 1; i <= cx + 1; ++i) {
        const auto b = cell_blob(scene_.seed, kDab, i, j, kDabCell, 0.5, 5.0, 14.0, 0.2, 0.6);
        if (b && unit(hash(scene_.seed, kDabExpressed, i, j, static_cast<std::uint64_t>(slide))) <
                     scene_.dab_expression)
          n.blobs.push_back(*b);
      }
  }
  return blob_sum(n.blobs, x, y);
}

std::array<double, 3> SceneModel::tissue(int slide, double px, double py,
                                         BlobCache& cache) const {
  const double m = tissue_mask(px, py);
  if (m <= 0.0) return {0.0, 0.0, 0.0};
  return {m * tissue_h(px, py, cache), m * tissue_dab(slide, px, py, cache), 0.0};
}

int SceneModel::owner(int slide, double x, double y) const {
  const auto& regs = truth_.slides.at(static_cast<std::size_t>(slide)).regions;
  if (regs.empty()) return -1;
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < regs.size(); ++i) {
    const Point2 p = regs[i].transform.apply({x, y});
    if (in_core(regs[i].core, p)) return static_cast<int>(i);
    const double d = distance_to(regs[i].core, p);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

bool SceneModel::in_artifact(int slide, double x, double y) const {
  for (const auto& a : truth_.slides.at(static_cast<std::size_t>(slide)).artifacts)
    if (point_in_polygon(a.polygon, x, y)) return true;
  return false;
}

std::array<double, 3> SceneModel::concentrations(int slide, double x, double y) const {
  BlobCache cache;
  return concentrations(slide, x, y, cache);
}

std::array<double, 3> SceneModel::concentrations(int slide, double x, double y,
                                                 BlobCache& cache) const {
  const auto& st = truth_.slides.at(static_cast<std::size_t>(slide));
  if (st.regions.empty()) return tissue(slide, x, y, cache);
  const auto& regs = st.regions;
  const auto& t = regs[static_cast<std::size_t>(owner(slide, x, y))].transform;
  for (const auto& a : st.artifacts) {
    if (!point_in_polygon(a.polygon, x, y)) continue;
    if (a.kind == ArtifactKind::Tear) return {0.0, 0.0, 0.0};
    const Point2 p = t.apply({x, y});
    const Point2 q = t.apply({x + a.shift.x, y + a.shift.y});
    const auto base = tissue(slide, p.x, p.y, cache);
    const auto over = tissue(slide, q.x, q.y, cache);
    return {base[0] + over[0], base[1] + over[1], 0.0};
  }
  const Point2 p = t.apply({x, y});
  return tissue(slide, p.x, p.y, cache);
}

RgbImage SceneModel::render(int slide, const Rect& r) const {
  RgbImage out(r.w, r.h, 3);
  const auto& od = scene_.stains.od;
  BlobCache cache;
  for (std::int64_t y = 0; y < r.h; ++y)
    for (std::int64_t x = 0; x < r.w; ++x) {
      const std::int64_t gx = r.x + x, gy = r.y + y;
      const auto c =
          concentrations(slide, static_cast<double>(gx), static_cast<double>(gy), cache);
      const std::uint64_t nh = hash(scene_.seed, kNoise, gx, gy, static_cast<std::uint64_t>(slide));
      std::uint64_t h = nh;
      for (int ch = 0; ch < 3; ++ch) {
        const double density = c[0] * od(0, ch) + c[1] * od(1, ch) + c[2] * od(2, ch);
        h = splitmix(h);
        const double noise = scene_.noise_amplitude * (2.0 * unit(h) - 1.0);
        const double v = 255.0 * std::exp(-std::numbers::ln10 * density) + noise;
        out(x, y, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  return out;
}

Plane SceneModel::render_concentration(int slide, int channel, const Rect& r) const {
  if (channel < 0 || channel > 2) throw Error(ErrorKind::InvalidArgument, "channel must be 0..2");
  Plane out(r.w, r.h, 1);
  BlobCache cache;
  for (std::int64_t y = 0; y < r.h; ++y)
    for (std::int64_t x = 0; x < r.w; ++x)
      out(x, y, 0) = static_cast<float>(concentrations(
          slide, static_cast<double>(r.x + x), static_cast<double>(r.y + y), cache)[static_cast<std::size_t>(channel)]);
  return out;
}

std::string synthetic_slide_dir(int slide, int slides) {
  if (slide == 0) return "fixed";
  if (slides == 2) return "moving";
  return "moving" + std::to_string(slide);
}

namespace {

json rect_json(const Rect& r) { return {{"x", r.x}, {"y", r.y}, {"w", r.w}, {"h", r.h}}; }
Rect rect_from(const json& j) {
  return {j.at("x").get<std::int64_t>(), j.at("y").get<std::int64_t>(),
          j.at("w").get<std::int64_t>(), j.at("h").get<std::int64_t>()};
}
json point_json(Point2 p) { return json::array({p.x, p.y}); }
Point2 point_from(const json& j) {
  if (!j.is_array() || j.size() != 2) throw Error(ErrorKind::Format, "point must be [x, y]");
  return {j[0].get<double>(), j[1].get<double>()};
}

}  // namespace

std::string format_ground_truth(const GroundTruth& t) {
  json slides = json::array();
  for (const auto& s : t.slides) {
    json regions = json::array();
    for (const auto& r : s.regions) {
      json lms = json::array();
      for (const auto& l : r.pair.landmarks)
        lms.push_back({{"fixed", point_json(l.fixed)}, {"moving", point_json(l.moving)}});
      const auto& m = r.transform.coefficients();
      regions.push_back({{"name", r.pair.name},
                         {"core", rect_json(r.core)},
                         {"fixed_rect", rect_json(r.pair.fixed_rect)},
                         {"moving_rect", rect_json(r.pair.moving_rect)},
                         {"transform", {{m[0], m[1], m[2]}, {m[3], m[4], m[5]}}},
                         {"landmarks", lms}});
    }
    json arts = json::array();
    for (const auto& a : s.artifacts) {
      json poly = json::array();
      for (const auto& p : a.polygon) poly.push_back(point_json(p));
      arts.push_back({{"kind", to_string(a.kind)},
                      {"region", a.region},
                      {"polygon", poly},
                      {"shift", point_json(a.shift)}});
    }
    slides.push_back({{"slide_id", s.slide_id}, {"regions", regions}, {"artifacts", arts}});
  }
  return json{{"format", "wsireg-ground-truth"},
              {"version", 1},
              {"seed", t.seed},
              {"width", t.width},
              {"height", t.height},
              {"stains", json::parse(format_stain_vectors(t.stains))},
              {"slides", slides}}
             .dump(2) +
         "\n";
}

GroundTruth parse_ground_truth(const std::string& text) {
  try {
    const json j = json::parse(text);
    if (j.at("format").get<std::string>() != "wsireg-ground-truth")
      throw Error(ErrorKind::Format, "not a ground-truth document");
    GroundTruth t;
    t.seed = j.at("seed").get<std::uint64_t>();
    t.width = j.at("width").get<std::int64_t>();
    t.height = j.at("height").get<std::int64_t>();
    t.stains = parse_stain_vectors(j.at("stains").dump());
    for (std::size_t si = 0; si < j.at("slides").size(); ++si) {
      const json& js = j.at("slides")[si];
      SlideTruth s;
      s.slide_id = js.at("slide_id").get<std::string>();
      for (const auto& jr : js.at("regions")) {
        SyntheticRegion r;
        r.pair.name = jr.at("name").get<std::string>();
        r.pair.source = RegionSource::Automatic;
        r.core = rect_from(jr.at("core"));
        r.pair.fixed_rect = rect_from(jr.at("fixed_rect"));
        r.pair.moving_rect = rect_from(jr.at("moving_rect"));
        const auto& m = jr.at("transform");
        if (!m.is_array() || m.size() != 2 || m[0].size() != 3 || m[1].size() != 3)
          throw Error(ErrorKind::Format, "transform must be a 2x3 matrix");
        r.transform = AffineTransform({m[0][0].get<double>(), m[0][1].get<double>(),
                                       m[0][2].get<double>(), m[1][0].get<double>(),
                                       m[1][1].get<double>(), m[1][2].get<double>()});
        for (const auto& l : jr.at("landmarks"))
          r.pair.landmarks.push_back({point_from(l.at("fixed")), point_from(l.at("moving"))});
        s.regions.push_back(std::move(r));
      }
      for (const auto& ja : js.at("artifacts")) {
        Artifact a;
        a.kind = artifact_kind_from_string(ja.at("kind").get<std::string>());
        a.slide = static_cast<int>(si);
        a.region = ja.at("region").get<int>();
        for (const auto& p : ja.at("polygon")) a.polygon.push_back(point_from(p));
        a.shift = point_from(ja.at("shift"));
        s.artifacts.push_back(std::move(a));
      }
      t.slides.push_back(std::move(s));
    }
    return t;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, std::string("malformed ground truth: ") + e.what());
  }
}

SyntheticSet generate(const SyntheticScene& scene, const std::filesystem::path& out_dir,
                      int workers) {
  const SceneModel model(scene);
  std::filesystem::create_directories(out_dir);
  SyntheticSet set;
  set.truth = model.truth();

  for (int s = 0; s < scene.slides; ++s) {
    WriteOptions wo;
    wo.tile_size = scene.tile_size;
    wo.slide_id = model.slide_id(s);
    wo.channel_names = {"R", "G", "B"};
    wo.workers = workers;
    PyramidWriter writer(out_dir / synthetic_slide_dir(s, scene.slides), scene.width,
                         scene.height, 3, SampleType::UInt8, wo);
    const TileGrid& g = writer.level0();
    parallel_for(g.tile_count(), workers, [&](std::int64_t i) {
      const std::int64_t col = i % g.cols(), row = i / g.cols();
      writer.write_tile(col, row, model.render(s, g.tile_rect(col, row)));
    });
    set.slides.push_back(writer.finish());
  }

  for (int s = 1; s < scene.slides; ++s) {
    AnnotationDocument doc;
    doc.pair_id = model.slide_id(0) + "__" + model.slide_id(s);
    doc.fixed_slide = model.slide_id(0);
    doc.moving_slide = model.slide_id(s);
    for (const auto& r : set.truth.slides[static_cast<std::size_t>(s)].regions)
      doc.regions.push_back(r.pair);
    const std::string file = scene.slides == 2
                                 ? "regions.json"
                                 : "regions_" + synthetic_slide_dir(s, scene.slides) + ".json";
    save_annotations(doc, out_dir / file);
    set.regions.push_back(std::move(doc));
    set.region_files.push_back(out_dir / file);
  }

  set.ground_truth_file = out_dir / "ground_truth.json";
  std::ofstream out(set.ground_truth_file);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + set.ground_truth_file.string());
  out << format_ground_truth(set.truth);
  if (!out) throw Error(ErrorKind::Io, "failed writing " + set.ground_truth_file.string());
  return set;
}

SyntheticSet generate_pair(SyntheticScene scene, const std::filesystem::path& out_dir,
                           int workers) {
  scene.slides = 2;
  return generate(scene, out_dir, workers);
}

SyntheticSet generate_triple(SyntheticScene scene, const std::filesystem::path& out_dir,
                             int workers) {
  scene.slides = 3;
  return generate(scene, out_dir, workers);
}

}  // namespace wsireg
