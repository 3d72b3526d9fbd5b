#include "wsireg/register.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include <nlohmann/json.hpp>

#include "wsireg/parallel.hpp"

namespace wsireg {

std::string to_string(RegistrationMethod m) {
  return m == RegistrationMethod::Manual ? "manual" : "feature";
}

RegistrationMethod registration_method_from_string(const std::string& s) {
  if (s == "manual") return RegistrationMethod::Manual;
  if (s == "feature" || s == "feature-based") return RegistrationMethod::Feature;
  throw Error(ErrorKind::InvalidArgument, "unknown registration method '" + s + "'");
}

namespace {

[[noreturn]] void rethrow_for_region(const std::string& name, const Error& e) {
  throw Error(e.kind(), "region '" + name + "': " + e.what());
}

RegionRegistration fit_manual(const RegionPair& rp, const RegisterOptions& options) {
  if (rp.landmarks.size() < 3)
    throw Error(ErrorKind::FitFailure,
                "region '" + rp.name + "': manual mode needs >= 3 landmarks (got " +
                    std::to_string(rp.landmarks.size()) + ")");
  std::vector<PointPair> pairs;
  for (const auto& l : rp.landmarks) pairs.push_back({l.moving, l.fixed});
  RegionRegistration out;
  out.region = rp;
  out.method = RegistrationMethod::Manual;
  try {
    out.transform = fit_affine_lsq(pairs);
  } catch (const Error& e) {
    rethrow_for_region(rp.name, e);
  }
  double sum = 0.0;
  for (const auto& p : pairs) sum += transfer_error(out.transform, p);
  out.inlier_count = pairs.size();
  out.match_count = pairs.size();
  out.mean_residual_px = sum / static_cast<double>(pairs.size());
  out.determinant_flag = !out.transform.within_stretch_bounds(options.det_lo, options.det_hi);
  return out;
}

struct Crop {
  Plane plane;
  std::int64_t x0 = 0;  // origin in analysis-level pixels
  std::int64_t y0 = 0;
  std::int64_t scale = 1;  // level-0 pixels per analysis pixel
};

// Keypoints moved from crop-local analysis pixels to slide-global level-0
// pixels (the center of the level-0 block an analysis pixel covers).
std::vector<Keypoint> to_global(std::vector<Keypoint> kps, const Crop& c) {
  const double s = static_cast<double>(c.scale);
  const double half = (s - 1.0) / 2.0;
  for (auto& k : kps) {
    k.x = (static_cast<double>(c.x0) + k.x) * s + half;
    k.y = (static_cast<double>(c.y0) + k.y) * s + half;
    k.scale *= s;
  }
  return kps;
}

RegionRegistration fit_features(const Crop& fixed, const Crop& moving, const RegionPair& rp,
                                const RegisterOptions& options) {
  RegionRegistration out;
  out.region = rp;
  out.method = RegistrationMethod::Feature;
  try {
    const DogDetector detector(options.detector);
    const auto ff = detector.detect(fixed.plane);
    const auto fm = detector.detect(moving.plane);
    if (ff.keypoints.empty() || fm.keypoints.empty())
      throw Error(ErrorKind::FitFailure, "no keypoints detected");
    const auto matches = match_descriptors(ff.descriptors, fm.descriptors, options.ratio);
    out.match_count = matches.pairs.size();
    const auto kf = to_global(ff.keypoints, fixed);
    const auto km = to_global(fm.keypoints, moving);
    const auto r = ransac_affine(matches, kf, km, options.ransac);
    out.transform = r.transform;
    out.inlier_count = r.inlier_count;
    out.mean_residual_px = r.mean_residual_px;
  } catch (const Error& e) {
    rethrow_for_region(rp.name, e);
  }
  out.determinant_flag = !out.transform.within_stretch_bounds(options.det_lo, options.det_hi);
  return out;
}

void check_rect(const Rect& r, std::int64_t w, std::int64_t h, const std::string& what,
                const std::string& name) {
  if (!r.inside(w, h))
    throw Error(ErrorKind::Validation, "region '" + name + "': " + what + " " + to_string(r) +
                                           " outside slide (" + std::to_string(w) + "x" +
                                           std::to_string(h) + ")");
}

Crop read_crop(const TiledPyramid& p, const Rect& r, int level) {
  Crop c;
  c.scale = p.level_scale(level);
  const auto& g = p.grid(level);
  c.x0 = r.x / c.scale;
  c.y0 = r.y / c.scale;
  const std::int64_t x1 = std::min(g.width, (r.right() + c.scale - 1) / c.scale);
  const std::int64_t y1 = std::min(g.height, (r.bottom() + c.scale - 1) / c.scale);
  c.plane = p.read_region(level, {c.x0, c.y0, x1 - c.x0, y1 - c.y0});
  return c;
}

inline double dist2_to_center(const Rect& r, double x, double y) {
  const double dx = x - r.center_x();
  const double dy = y - r.center_y();
  return dx * dx + dy * dy;
}

int owner_among(const std::vector<RegionRegistration>& regions, const std::vector<int>& candidates,
                double x, double y) {
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (int i : candidates) {
    const Rect& r = regions[static_cast<std::size_t>(i)].region.fixed_rect;
    if (!r.contains(x, y)) continue;
    const double d = dist2_to_center(r, x, y);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

// Bilinear sample of `src` whose pixel (0, 0) sits at (ox, oy) of an image
// of size w x h. Coordinates outside [0, w-1] x [0, h-1] yield 0.
inline void sample_bilinear(const Plane& src, std::int64_t ox, std::int64_t oy, std::int64_t w,
                            std::int64_t h, double qx, double qy, float* out) {
  const int ch = src.channels();
  if (!(qx >= 0.0 && qy >= 0.0 && qx <= static_cast<double>(w - 1) &&
        qy <= static_cast<double>(h - 1))) {
    for (int c = 0; c < ch; ++c) out[c] = 0.0f;
    return;
  }
  std::int64_t x0 = static_cast<std::int64_t>(std::floor(qx));
  std::int64_t y0 = static_cast<std::int64_t>(std::floor(qy));
  if (x0 > w - 1) x0 = w - 1;
  if (y0 > h - 1) y0 = h - 1;
  const std::int64_t x1 = std::min(x0 + 1, w - 1);
  const std::int64_t y1 = std::min(y0 + 1, h - 1);
  const double fx = qx - static_cast<double>(x0);
  const double fy = qy - static_cast<double>(y0);
  for (int c = 0; c < ch; ++c) {
    const double a = src(x0 - ox, y0 - oy, c);
    const double b = src(x1 - ox, y0 - oy, c);
    const double d = src(x0 - ox, y1 - oy, c);
    const double e = src(x1 - ox, y1 - oy, c);
    const double top = (1.0 - fx) * a + fx * b;
    const double bot = (1.0 - fx) * d + fx * e;
    out[c] = static_cast<float>((1.0 - fy) * top + fy * bot);
  }
}

// Source pixels that inverse-mapped samples of `out_rect` can touch.
Rect footprint(const AffineTransform& inv, const Rect& out_rect, std::int64_t w, std::int64_t h) {
  const double xs[2] = {static_cast<double>(out_rect.x), static_cast<double>(out_rect.right() - 1)};
  const double ys[2] = {static_cast<double>(out_rect.y),
                        static_cast<double>(out_rect.bottom() - 1)};
  double minx = std::numeric_limits<double>::infinity(), miny = minx;
  double maxx = -minx, maxy = -minx;
  for (double x : xs)
    for (double y : ys) {
      const Point2 q = inv.apply({x, y});
      minx = std::min(minx, q.x);
      maxx = std::max(maxx, q.x);
      miny = std::min(miny, q.y);
      maxy = std::max(maxy, q.y);
    }
  const double lo_x = std::max(0.0, std::floor(minx - 1e-6));
  const double lo_y = std::max(0.0, std::floor(miny - 1e-6));
  const double hi_x = std::min(static_cast<double>(w - 1), std::floor(maxx + 1e-6) + 1.0);
  const double hi_y = std::min(static_cast<double>(h - 1), std::floor(maxy + 1e-6) + 1.0);
  if (!(hi_x >= lo_x && hi_y >= lo_y)) return {};
  const auto x0 = static_cast<std::int64_t>(lo_x);
  const auto y0 = static_cast<std::int64_t>(lo_y);
  return {x0, y0, static_cast<std::int64_t>(hi_x) - x0 + 1, static_cast<std::int64_t>(hi_y) - y0 + 1};
}

void warp_into(const Plane& src, const Rect& src_rect, std::int64_t w, std::int64_t h,
               const AffineTransform& inv, const Rect& out_rect, Plane& out, int workers) {
  parallel_for(out_rect.h, workers, [&](std::int64_t row) {
    const double y = static_cast<double>(out_rect.y + row);
    for (std::int64_t col = 0; col < out_rect.w; ++col) {
      float* px = &out(col, row);
      const Point2 q = inv.apply({static_cast<double>(out_rect.x + col), y});
      if (src_rect.empty()) {
        for (int c = 0; c < out.channels(); ++c) px[c] = 0.0f;
        continue;
      }
      sample_bilinear(src, src_rect.x, src_rect.y, w, h, q.x, q.y, px);
    }
  });
}

}  // namespace

RegionRegistration register_region_pair(const Plane& fixed_h, const Plane& moving_h,
                                        const RegionPair& rp, RegistrationMethod mode,
                                        const RegisterOptions& options) {
  check_rect(rp.fixed_rect, fixed_h.width(), fixed_h.height(), "fixed_rect", rp.name);
  check_rect(rp.moving_rect, moving_h.width(), moving_h.height(), "moving_rect", rp.name);
  if (mode == RegistrationMethod::Manual) return fit_manual(rp, options);
  Crop f{crop(fixed_h, rp.fixed_rect), rp.fixed_rect.x, rp.fixed_rect.y, 1};
  Crop m{crop(moving_h, rp.moving_rect), rp.moving_rect.x, rp.moving_rect.y, 1};
  return fit_features(f, m, rp, options);
}

RegionRegistration register_region_pair(const TiledPyramid& fixed_h, const TiledPyramid& moving_h,
                                        const RegionPair& rp, RegistrationMethod mode,
                                        const RegisterOptions& options) {
  check_rect(rp.fixed_rect, fixed_h.width(), fixed_h.height(), "fixed_rect", rp.name);
  check_rect(rp.moving_rect, moving_h.width(), moving_h.height(), "moving_rect", rp.name);
  if (mode == RegistrationMethod::Manual) return fit_manual(rp, options);
  if (fixed_h.channels() != 1 || moving_h.channels() != 1)
    throw Error(ErrorKind::InvalidArgument, "feature registration needs single-channel H pyramids");
  const int level = std::clamp(options.analysis_level, 0,
                               std::min(fixed_h.level_count(), moving_h.level_count()) - 1);
  if (fixed_h.level_scale(level) != moving_h.level_scale(level))
    throw Error(ErrorKind::InvalidArgument, "fixed and moving pyramids use different level scales");
  return fit_features(read_crop(fixed_h, rp.fixed_rect, level),
                      read_crop(moving_h, rp.moving_rect, level), rp, options);
}

std::vector<RegionRegistration> register_regions(const TiledPyramid& fixed_h,
                                                 const TiledPyramid& moving_h,
                                                 const std::vector<RegionPair>& regions,
                                                 RegistrationMethod mode,
                                                 const RegisterOptions& options, int workers) {
  std::vector<RegionRegistration> out(regions.size());
  parallel_for(static_cast<std::int64_t>(regions.size()), workers, [&](std::int64_t i) {
    const auto k = static_cast<std::size_t>(i);
    out[k] = register_region_pair(fixed_h, moving_h, regions[k], mode, options);
  });
  return out;
}

Plane warp_region(const TiledPyramid& moving, const AffineTransform& t, const Rect& out_rect,
                  int workers) {
  if (out_rect.empty()) throw Error(ErrorKind::InvalidArgument, "empty warp rect");
  const AffineTransform inv = t.inverse();
  const Rect src_rect = footprint(inv, out_rect, moving.width(), moving.height());
  const Plane src = src_rect.empty() ? Plane() : moving.read_region(0, src_rect, workers);
  Plane out(out_rect.w, out_rect.h, moving.channels());
  warp_into(src, src_rect, moving.width(), moving.height(), inv, out_rect, out, workers);
  return out;
}

Plane warp_dense(const Plane& moving, const AffineTransform& t, const Rect& out_rect) {
  const AffineTransform inv = t.inverse();
  Plane out(out_rect.w, out_rect.h, moving.channels());
  warp_into(moving, {0, 0, moving.width(), moving.height()}, moving.width(), moving.height(), inv,
            out_rect, out, 1);
  return out;
}

int owning_region(const std::vector<RegionRegistration>& regions, double x, double y) {
  std::vector<int> all(regions.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  return owner_among(regions, all, x, y);
}

std::vector<Rect> coverage_gaps(const std::vector<RegionRegistration>& regions,
                                std::int64_t width, std::int64_t height) {
  std::vector<Rect> rects;
  std::vector<std::int64_t> xs{0, width}, ys{0, height};
  for (const auto& r : regions) {
    const Rect c = intersect(r.region.fixed_rect, {0, 0, width, height});
    if (c.empty()) continue;
    rects.push_back(c);
    xs.push_back(c.x);
    xs.push_back(c.right());
    ys.push_back(c.y);
    ys.push_back(c.bottom());
  }
  std::sort(xs.begin(), xs.end());
  xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
  std::sort(ys.begin(), ys.end());
  ys.erase(std::unique(ys.begin(), ys.end()), ys.end());

  // Per y band, runs of uncovered cells; runs with identical x span in
  // consecutive bands are merged.
  std::vector<Rect> out;
  std::vector<Rect> open;
  for (std::size_t j = 0; j + 1 < ys.size(); ++j) {
    std::vector<Rect> runs;
    for (std::size_t i = 0; i + 1 < xs.size(); ++i) {
      const Rect cell{xs[i], ys[j], xs[i + 1] - xs[i], ys[j + 1] - ys[j]};
      const bool covered = std::any_of(rects.begin(), rects.end(), [&](const Rect& r) {
        return r.x <= cell.x && r.y <= cell.y && r.right() >= cell.right() &&
               r.bottom() >= cell.bottom();
      });
      if (covered) continue;
      if (!runs.empty() && runs.back().right() == cell.x) runs.back().w += cell.w;
      else runs.push_back(cell);
    }
    std::vector<Rect> next;
    for (auto run : runs) {
      auto it = std::find_if(open.begin(), open.end(), [&](const Rect& o) {
        return o.x == run.x && o.w == run.w && o.bottom() == run.y;
      });
      if (it != open.end()) {
        run.y = it->y;
        run.h += it->h;
        open.erase(it);
      }
      next.push_back(run);
    }
    out.insert(out.end(), open.begin(), open.end());
    open = std::move(next);
  }
  out.insert(out.end(), open.begin(), open.end());
  std::sort(out.begin(), out.end(), [](const Rect& a, const Rect& b) {
    return a.y != b.y ? a.y < b.y : a.x < b.x;
  });
  return out;
}

AssembleResult assemble_piecewise(const std::vector<RegionRegistration>& regions,
                                  const TiledPyramid& moving, std::int64_t canvas_width,
                                  std::int64_t canvas_height,
                                  const std::filesystem::path& out_dir,
                                  const AssembleOptions& options) {
  if (canvas_width <= 0 || canvas_height <= 0)
    throw Error(ErrorKind::InvalidArgument, "empty canvas");
  if (regions.empty()) throw Error(ErrorKind::InvalidArgument, "no regions to assemble");
  std::vector<AffineTransform> inverse;
  for (const auto& r : regions) {
    try {
      inverse.push_back(r.transform.inverse());
    } catch (const Error& e) {
      rethrow_for_region(r.region.name, e);
    }
  }
  AssembleResult result;
  result.holes = coverage_gaps(regions, canvas_width, canvas_height);
  if (!result.holes.empty() && !options.allow_holes) {
    std::string msg = "regions leave " + std::to_string(result.holes.size()) +
                      " uncovered box(es) on the canvas:";
    for (std::size_t i = 0; i < result.holes.size() && i < 20; ++i)
      msg += " " + to_string(result.holes[i]);
    if (result.holes.size() > 20) msg += " ...";
    throw Error(ErrorKind::CoverageGap, msg);
  }

  const auto& minfo = moving.info();
  WriteOptions wo;
  wo.tile_size = options.tile_size;
  wo.downsample_factor = minfo.downsample_factor;
  wo.pixel_size_um = minfo.pixel_size_um;
  wo.slide_id = options.slide_id.empty() ? minfo.slide_id + "-registered" : options.slide_id;
  wo.channel_names = minfo.channel_names;
  wo.workers = options.workers;
  PyramidWriter image(out_dir, canvas_width, canvas_height, moving.channels(), minfo.sample_type,
                      wo);
  WriteOptions lo = wo;
  lo.slide_id = wo.slide_id + "-labels";
  lo.channel_names = {"region"};
  lo.single_level = true;
  auto labels_dir = options.labels_dir;
  if (labels_dir.empty()) {
    labels_dir = out_dir;
    labels_dir += "_labels";
  }
  PyramidWriter labels(labels_dir, canvas_width, canvas_height, 1, SampleType::Float32, lo);

  const auto& grid = image.level0();
  const int ch = moving.channels();
  parallel_for(grid.tile_count(), options.workers, [&](std::int64_t t) {
    const std::int64_t col = t % grid.cols();
    const std::int64_t row = t / grid.cols();
    const Rect tr = grid.tile_rect(col, row);
    std::vector<int> candidates;
    for (std::size_t i = 0; i < regions.size(); ++i)
      if (!intersect(regions[i].region.fixed_rect, tr).empty())
        candidates.push_back(static_cast<int>(i));

    Plane label(tr.w, tr.h, 1, -1.0f);
    std::vector<Rect> used(regions.size());
    for (std::int64_t y = 0; y < tr.h; ++y)
      for (std::int64_t x = 0; x < tr.w; ++x) {
        const int k = owner_among(regions, candidates, static_cast<double>(tr.x + x),
                                  static_cast<double>(tr.y + y));
        label(x, y) = static_cast<float>(k);
        if (k < 0) continue;
        Rect& u = used[static_cast<std::size_t>(k)];
        if (u.empty()) {
          u = {x, y, 1, 1};
        } else {
          const std::int64_t x0 = std::min(u.x, x), y0 = std::min(u.y, y);
          const std::int64_t x1 = std::max(u.right(), x + 1), y1 = std::max(u.bottom(), y + 1);
          u = {x0, y0, x1 - x0, y1 - y0};
        }
      }

    Plane out(tr.w, tr.h, ch, 0.0f);
    for (int k : candidates) {
      const Rect& u = used[static_cast<std::size_t>(k)];
      if (u.empty()) continue;
      const Rect global{tr.x + u.x, tr.y + u.y, u.w, u.h};
      const Rect src_rect =
          footprint(inverse[static_cast<std::size_t>(k)], global, moving.width(), moving.height());
      const Plane src = src_rect.empty() ? Plane() : moving.read_region(0, src_rect);
      Plane warped(u.w, u.h, ch);
      warp_into(src, src_rect, moving.width(), moving.height(), inverse[static_cast<std::size_t>(k)],
                global, warped, 1);
      for (std::int64_t y = 0; y < u.h; ++y)
        for (std::int64_t x = 0; x < u.w; ++x) {
          if (label(u.x + x, u.y + y) != static_cast<float>(k)) continue;
          for (int c = 0; c < ch; ++c) out(u.x + x, u.y + y, c) = warped(x, y, c);
        }
    }
    if (minfo.sample_type == SampleType::UInt8) {
      Image<std::uint8_t> o8(tr.w, tr.h, ch);
      for (std::size_t i = 0; i < out.samples().size(); ++i)
        o8.samples()[i] = static_cast<std::uint8_t>(
            std::lround(std::clamp(static_cast<double>(out.samples()[i]), 0.0, 255.0)));
      image.write_tile(col, row, o8);
    } else {
      image.write_tile(col, row, out);
    }
    labels.write_tile(col, row, label);
  });
  result.image = image.finish();
  result.labels = labels.finish();
  return result;
}

LandmarkReport landmark_mse(const std::vector<RegionRegistration>& registrations,
                            const std::vector<LandmarkPair>& landmarks) {
  LandmarkReport rep;
  std::vector<double> sums(registrations.size(), 0.0);
  rep.regions.resize(registrations.size());
  for (std::size_t i = 0; i < registrations.size(); ++i)
    rep.regions[i].name = registrations[i].region.name;
  for (std::size_t i = 0; i < landmarks.size(); ++i) {
    const auto& l = landmarks[i];
    const int k = owning_region(registrations, l.fixed.x, l.fixed.y);
    if (k < 0) {
      rep.excluded.push_back(i);
      continue;
    }
    const auto& reg = registrations[static_cast<std::size_t>(k)];
    const Point2 p = reg.transform.apply(l.moving);
    const double dx = p.x - l.fixed.x;
    const double dy = p.y - l.fixed.y;
    sums[static_cast<std::size_t>(k)] += dx * dx + dy * dy;
    auto& rm = rep.regions[static_cast<std::size_t>(k)];
    ++rm.count;
    if (reg.method == RegistrationMethod::Manual &&
        std::find(reg.region.landmarks.begin(), reg.region.landmarks.end(), l) !=
            reg.region.landmarks.end())
      rm.non_independent = true;
  }
  for (std::size_t i = 0; i < rep.regions.size(); ++i)
    if (rep.regions[i].count > 0)
      rep.regions[i].mse_px2 = sums[i] / static_cast<double>(rep.regions[i].count);
  return rep;
}

std::string format_registration_report(const std::vector<RegionRegistration>& regs,
                                       const std::optional<LandmarkReport>& mse) {
  using nlohmann::json;
  json regions = json::array();
  for (std::size_t i = 0; i < regs.size(); ++i) {
    const auto& r = regs[i];
    const auto& m = r.transform.coefficients();
    json e = {{"name", r.region.name},
              {"method", to_string(r.method)},
              {"transform", {{m[0], m[1], m[2]}, {m[3], m[4], m[5]}}},
              {"determinant", r.transform.determinant()},
              {"determinant_flag", r.determinant_flag},
              {"inlier_count", r.inlier_count},
              {"match_count", r.match_count},
              {"mean_residual_px", r.mean_residual_px},
              {"fixed_rect", {r.region.fixed_rect.x, r.region.fixed_rect.y, r.region.fixed_rect.w,
                              r.region.fixed_rect.h}},
              {"moving_rect", {r.region.moving_rect.x, r.region.moving_rect.y,
                               r.region.moving_rect.w, r.region.moving_rect.h}}};
    if (mse && i < mse->regions.size()) {
      const auto& rm = mse->regions[i];
      e["landmark_count"] = rm.count;
      e["landmark_mse_px2"] = rm.mse_px2 ? json(*rm.mse_px2) : json(nullptr);
      e["landmarks_non_independent"] = rm.non_independent;
    }
    regions.push_back(e);
  }
  json doc = {{"format", "wsireg-registration-report"}, {"regions", regions}};
  if (mse) doc["excluded_landmarks"] = mse->excluded;
  return doc.dump(2) + "\n";
}

}  // namespace wsireg
