// Acceptance gate. One PASS/FAIL line per criterion; exit status is the
// number of failures.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "oracles/coloc_oracle.hpp"
#include "test_util.hpp"
#include "wsireg/parallel.hpp"
#include "wsireg/pipeline.hpp"
#include "wsireg/tile_codec.hpp"

namespace {

using namespace wsireg;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Records the first failing check; later ones still run.
struct Checker {
  Outcome out;
  void require(bool ok, const std::string& what) {
    if (!ok && out.pass) {
      out.pass = false;
      out.detail = what;
    }
  }
};

// Shared 2048 x 2048 synthetic pair, deconvolved and registered both ways.
struct Scene {
  testing::TempDir dir;
  SyntheticSet set;
  PipelineConfig config;
  std::optional<DeconvolveOutputs> fixed, moving;
  std::optional<RegisterOutputs> regional, global;
  double regional_seconds = 0.0;
};

Scene& scene() {
  static Scene* s = [] {
    auto* s = new Scene;
    SyntheticScene spec;
    spec.seed = 2024;
    spec.width = 2048;
    spec.height = 2048;
    s->set = generate_pair(spec, s->dir / "synth", default_workers());
    s->config.default_palette = true;
    const auto t0 = Clock::now();
    const StainVectors sv = reference_hdab_vectors();
    s->fixed.emplace(run_deconvolve(s->set.slides[0], sv, s->dir / "fixed", s->config));
    s->moving.emplace(run_deconvolve(s->set.slides[1], sv, s->dir / "moving", s->config));
    RegisterExtras extras;
    extras.ground_truth = s->set.truth;
    s->regional.emplace(run_register(s->fixed->h, s->moving->h, s->set.regions[0], s->config,
                                     s->dir / "regional", extras));
    s->regional_seconds = seconds_since(t0);
    PipelineConfig g = s->config;
    g.mode = RegistrationScope::Global;
    s->global.emplace(run_register(s->fixed->h, s->moving->h, s->set.regions[0], g,
                                   s->dir / "global", extras));
    return s;
  }();
  return *s;
}

Outcome synthetic_recovery() {
  Checker c;
  Scene& s = scene();
  const auto& truth = s.set.truth.slides[1].regions;
  c.require(truth.size() == 4, "scene does not have 4 regions");
  for (const auto& r : truth) {
    const auto& m = r.transform;
    const double scale = std::sqrt(std::abs(m[0] * m[4] - m[1] * m[3]));
    const double rot = std::atan2(m[3], m[0]) * 180.0 / M_PI;
    c.require(scale >= 0.95 - 1e-9 && scale <= 1.05 + 1e-9 && std::abs(rot) <= 10.0 + 1e-9,
              "planted warp outside the stated ranges");
  }
  double worst = 0.0;
  for (const auto& g : s.regional->ground_truth) worst = std::max(worst, g.grid_error_px);
  c.require(s.regional->ground_truth.size() == truth.size(), "not every region was checked");
  c.require(worst < 1.0, fmt("grid error %.4f px >= 1", worst));
  c.require(s.regional_seconds < 60.0, fmt("runtime %.1f s >= 60", s.regional_seconds));
  if (c.out.pass)
    c.out.detail = fmt("4 regions, worst mean grid error %.4f px, %.1f s (deconvolve + register, %d workers)",
                       worst, s.regional_seconds, default_workers());
  return c.out;
}

Outcome regional_beats_global() {
  Checker c;
  Scene& s = scene();
  const auto& truth = s.set.truth.slides[1].regions;
  bool distinct = true;
  for (std::size_t i = 0; i < truth.size(); ++i)
    for (std::size_t j = i + 1; j < truth.size(); ++j) {
      double d = 0.0;
      for (int k = 0; k < 6; ++k) d = std::max(d, std::abs(truth[i].transform[k] - truth[j].transform[k]));
      distinct = distinct && d > 1e-3;
    }
  c.require(distinct, "regions do not carry different affines");
  const auto r = run_evaluate(s.fixed->h, *s.regional->registered, s.config, s.dir / "ev_regional");
  const auto g = run_evaluate(s.fixed->h, *s.global->registered, s.config, s.dir / "ev_global");
  c.require(r.report.pcc_total && g.report.pcc_total, "pcc_total undefined");
  if (!c.out.pass) return c.out;
  const double er = *s.regional->mean_grid_error_px, eg = *s.global->mean_grid_error_px;
  c.require(*r.report.pcc_total > *g.report.pcc_total,
            fmt("pcc_total regional %.4f <= global %.4f", *r.report.pcc_total, *g.report.pcc_total));
  c.require(er < eg, fmt("grid error regional %.4f >= global %.4f", er, eg));
  if (c.out.pass)
    c.out.detail = fmt("pcc_total %.4f > %.4f; grid error %.4f px < %.2f px", *r.report.pcc_total,
                       *g.report.pcc_total, er, eg);
  return c.out;
}

Outcome costes_oracle() {
  Checker c;
  const int cases = 120;
  double lib_seconds = 0.0;
  int interior = 0;
  for (int seed = 0; seed < cases; ++seed) {
    const auto [a, b] = testing::coloc_case(static_cast<std::uint64_t>(seed) + 1000, 64, 64);
    const auto t0 = Clock::now();
    const auto t = costes_thresholds(a, b);
    lib_seconds += seconds_since(t0);
    const auto o = oracle::costes_scan(a, b);
    c.require(t.index == o.index && t.at_floor == o.at_floor,
              fmt("seed %d: index %d vs oracle %d", seed, t.index, o.index));
    if (!t.at_floor) ++interior;
  }
  c.require(interior > 0, "no case stopped above the floor");
  c.require(lib_seconds < 10.0, fmt("runtime %.2f s >= 10", lib_seconds));
  if (c.out.pass)
    c.out.detail = fmt("%d cases 64x64, all indices equal (%d interior), %.3f s", cases, interior,
                       lib_seconds);
  return c.out;
}

Outcome pcc_correctness() {
  Checker c;
  double worst = 0.0, worst_scale = 0.0;
  int asymmetric = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Plane a = testing::random_plane(12, 10, seed * 2 + 7, -0.2f, 1.0f);
    const Plane b = testing::random_plane(12, 10, seed * 2 + 8, -0.2f, 1.0f);
    // Quantized so the float rescaling below is exact.
    for (auto& v : a.samples()) v = std::round(v * 4096.0f) / 4096.0f;
    std::vector<double> xa, xb;
    oracle::positive_pairs(a, b, xa, xb);
    const auto expect = oracle::two_pass_pcc(xa, xb);
    if (!expect) continue;
    const double r = pcc(a, b);
    worst = std::max(worst, std::abs(r - *expect));
    if (pcc(b, a) != r) ++asymmetric;
    for (float k : {0.25f, 3.5f, 8.0f}) {
      Plane ak = a;
      for (auto& v : ak.samples()) v *= k;
      worst_scale = std::max(worst_scale, std::abs(pcc(ak, b) - r));
    }
  }
  c.require(worst <= 1e-12, fmt("oracle difference %.3g > 1e-12", worst));
  c.require(asymmetric == 0, fmt("%d asymmetric cases", asymmetric));
  c.require(worst_scale <= 1e-12, fmt("scale change moved pcc by %.3g", worst_scale));
  if (c.out.pass)
    c.out.detail = fmt("1000 planes: max |pcc - oracle| %.2g, symmetric, max scale drift %.2g", worst,
                       worst_scale);
  return c.out;
}

Outcome deconvolution_round_trip() {
  Checker c;
  const StainVectors sv = reference_hdab_vectors();
  std::uint64_t total = 0, within = 0;
  // Generator defaults, and again with per-pixel noise.
  for (auto [seed, noise] : {std::pair{3u, 0.0}, std::pair{11u, 0.0}, std::pair{29u, 1.0},
                             std::pair{31u, 1.0}}) {
    SyntheticScene spec;
    spec.seed = seed;
    spec.width = 512;
    spec.height = 512;
    spec.noise_amplitude = noise;
    const SceneModel model(spec);
    for (int slide = 0; slide < 2; ++slide) {
      const RgbImage img = model.render(slide, {0, 0, spec.width, spec.height});
      const auto planes = deconvolve(img, sv);
      const RgbImage back = recompose(planes[0].values, planes[1].values, planes[2].values, sv);
      for (std::int64_t y = 0; y < img.height(); ++y)
        for (std::int64_t x = 0; x < img.width(); ++x) {
          bool ok = true;
          for (int k = 0; k < 3; ++k) ok = ok && std::abs(int(back(x, y, k)) - int(img(x, y, k))) <= 2;
          within += ok;
          ++total;
        }
    }
  }
  const double frac = double(within) / double(total);
  c.require(frac >= 0.99, fmt("only %.4f%% within 2 levels", 100.0 * frac));

  const Deconvolver dec(sv);
  double worst = 0.0;
  for (int row = 0; row < 3; ++row)
    for (double conc : {0.05, 0.3, 0.7, 1.5}) {
      const Eigen::RowVector3d od = conc * sv.od.row(row);
      const Eigen::RowVector3d got = od * dec.inverse();
      for (int k = 0; k < 3; ++k) worst = std::max(worst, std::abs(got(k) - (k == row ? conc : 0.0)));
    }
  c.require(worst <= 1e-6, fmt("basis vector error %.3g > 1e-6", worst));
  if (c.out.pass)
    c.out.detail = fmt("%.4f%% of %llu pixels within 2 levels; basis error %.2g", 100.0 * frac,
                       static_cast<unsigned long long>(total), worst);
  return c.out;
}

Outcome rcm_cqm_exactness() {
  Checker c;
  testing::TempDir dir;
  int rcm_cases = 0, cqm_cases = 0;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto [a, b] = testing::coloc_case(seed + 500, 400, 400);
    const auto t = costes_thresholds(a, b);
    WriteOptions o;
    o.tile_size = 128;
    const auto pa = write_pyramid(a, dir / ("a" + std::to_string(seed)), o);
    const auto pb = write_pyramid(b, dir / ("b" + std::to_string(seed)), o);
    std::int64_t ow = 0, oh = 0;
    const auto expect = oracle::rcm_classes(a, b, 200, t.t_a, t.t_b, ow, oh);
    for (const auto& m : {build_rcm(a, b, 200, t), build_rcm(pa, pb, 200, t, 2)}) {
      bool same = m.classes.width() == ow && m.classes.height() == oh;
      for (std::int64_t i = 0; same && i < ow * oh; ++i)
        same = int(m.classes.samples()[std::size_t(i)]) == expect[std::size_t(i)];
      c.require(same, fmt("RCM mismatch on seed %llu", static_cast<unsigned long long>(seed)));
      ++rcm_cases;
    }
  }
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto a = testing::random_plane(97, 83, seed * 3 + 1);
    const auto b = testing::random_plane(97, 83, seed * 3 + 2);
    const auto d = testing::random_plane(97, 83, seed * 3 + 3);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    const std::array<double, 3> t{u(rng), u(rng), u(rng)};
    const auto expect = oracle::cqm_counts(a, b, d, t);
    c.require(build_cqm({&a, &b, &d}, t).counts == expect, "CQM dense counts differ");
    ++cqm_cases;
    if (seed < 3) {
      WriteOptions o;
      o.tile_size = 32;
      const auto s = std::to_string(seed);
      const auto pa = write_pyramid(a, dir / ("qa" + s), o);
      const auto pb = write_pyramid(b, dir / ("qb" + s), o);
      const auto pd = write_pyramid(d, dir / ("qd" + s), o);
      c.require(build_cqm({&pa, &pb, &pd}, t, dir / ("q" + s), o).counts == expect,
                "CQM tiled counts differ");
      ++cqm_cases;
    }
  }
  if (c.out.pass)
    c.out.detail = fmt("%d RCM maps (factor 200, 400x400) and %d CQM count sets bit-exact", rcm_cases,
                       cqm_cases);
  return c.out;
}

template <typename T>
Image<T> dense_crop(const Image<T>& src, const Rect& r) {
  Image<T> out(r.w, r.h, src.channels());
  for (std::int64_t y = 0; y < r.h; ++y)
    for (std::int64_t x = 0; x < r.w; ++x)
      for (int k = 0; k < src.channels(); ++k) out(x, y, k) = src(r.x + x, r.y + y, k);
  return out;
}

Outcome tiling_transparency() {
  Checker c;
  testing::TempDir dir;
  const Plane src = testing::random_plane(517, 389, 77);
  const RgbImage rgb = testing::random_rgb(333, 251, 78);
  WriteOptions o;
  o.tile_size = 61;
  o.workers = 1;
  const auto p1 = write_pyramid(src, dir / "p1", o);
  const auto q1 = write_pyramid(rgb, dir / "q1", o);
  o.workers = 3;
  const auto p3 = write_pyramid(src, dir / "p3", o);
  const auto q3 = write_pyramid(rgb, dir / "q3", o);
  c.require(read_file_bytes(p1.manifest_path()) == read_file_bytes(p3.manifest_path()),
            "manifest depends on workers");
  std::mt19937_64 rng(99);
  int rects = 0;
  for (int i = 0; i < 1000; ++i) {
    const bool color = i % 4 == 3;
    const std::int64_t W = color ? rgb.width() : src.width(), H = color ? rgb.height() : src.height();
    std::uniform_int_distribution<std::int64_t> ux(0, W - 1), uy(0, H - 1);
    const std::int64_t x = ux(rng), y = uy(rng);
    std::uniform_int_distribution<std::int64_t> uw(1, W - x), uh(1, H - y);
    const Rect r{x, y, uw(rng), uh(rng)};
    const int workers = 1 + i % 3;
    if (color) {
      const auto want = dense_crop(rgb, r);
      c.require(q1.read_region_u8(0, r, workers) == want && q3.read_region_u8(0, r) == want,
                fmt("rgb rect %d differs", i));
    } else {
      const auto want = dense_crop(src, r);
      c.require(p1.read_region(0, r, workers) == want && p3.read_region(0, r) == want,
                fmt("rect %d differs", i));
    }
    ++rects;
  }
  // Composition is exact when the inner factor divides the raster, since
  // then every inner block has the same weight. 504 x 384 is divisible by
  // every inner factor here but leaves ragged outer blocks.
  const Plane even = testing::random_plane(504, 384, 79);
  o.workers = 1;
  const auto e1 = write_pyramid(even, dir / "e1", o);
  o.workers = 3;
  const auto e3 = write_pyramid(even, dir / "e3", o);
  double worst = 0.0;
  for (auto [a, b] : {std::pair{2, 3}, std::pair{4, 4}, std::pair{3, 5}, std::pair{8, 2}}) {
    const Plane once = subsample(e1, a * b, 2);
    const Plane twice = subsample(subsample(e1, a), b);
    c.require(once.width() == twice.width() && once.height() == twice.height(),
              "composition changes shape");
    if (!c.out.pass) return c.out;
    for (std::size_t i = 0; i < once.samples().size(); ++i)
      worst = std::max(worst, double(std::abs(once.samples()[i] - twice.samples()[i])));
    c.require(subsample(e1, a * b, 1) == subsample(e3, a * b, 4), "subsample depends on workers");
    c.require(subsample(p1, a * b, 1) == subsample(p3, a * b, 4), "subsample depends on workers");
  }
  c.require(worst <= 1e-6, fmt("composition error %.3g > 1e-6", worst));
  if (c.out.pass)
    c.out.detail = fmt("%d rects equal dense crops at 1-3 workers; composition error %.2g", rects,
                       worst);
  return c.out;
}

Outcome report_schema() {
  Checker c;
  Scene& s = scene();
  int runs = 0;
  auto check = [&](const EvaluateOutputs& ev) {
    std::ifstream in(ev.report_path);
    std::stringstream ss;
    ss << in.rdbuf();
    const json j = json::parse(ss.str());
    for (const char* col : {"PCC total", "PCC coloc", "%A Vol", "%B Vol", "%A > th", "%B > th"})
      c.require(j.at("table").contains(col), std::string("missing column ") + col);
    const auto& q = j.at("quadrants");
    const auto sum = q.at("white").get<std::uint64_t>() + q.at("red").get<std::uint64_t>() +
                     q.at("green").get<std::uint64_t>() + q.at("black").get<std::uint64_t>();
    c.require(sum == q.at("included").get<std::uint64_t>(), "quadrants do not partition");
    c.require(sum == ev.report.included, "included count differs from report");
    ++runs;
  };
  check(run_evaluate(s.fixed->h, *s.regional->registered, s.config, s.dir / "schema_r"));
  check(run_evaluate(s.fixed->h, *s.global->registered, s.config, s.dir / "schema_g"));
  check(run_evaluate(s.fixed->h, s.fixed->h, s.config, s.dir / "schema_self"));
  check(run_evaluate(s.fixed->dab, s.moving->dab, s.config, s.dir / "schema_dab"));
  check(run_evaluate(s.fixed->h, *s.regional->registered, s.config, s.dir / "schema_manual",
                     std::array<double, 2>{0.4, 0.4}));
  if (c.out.pass) c.out.detail = fmt("%d evaluate runs: six columns present, quadrants partition", runs);
  return c.out;
}

Outcome manual_landmark_mse() {
  Checker c;
  Scene& s = scene();
  PipelineConfig m = s.config;
  m.method = RegistrationMethod::Manual;
  RegisterExtras extras;
  extras.assemble = false;
  const auto out = run_register(s.fixed->h, s.moving->h, s.set.regions[0], m, s.dir / "manual", extras);
  c.require(out.landmarks.has_value(), "no landmark report");
  if (!c.out.pass) return c.out;
  double worst = 0.0;
  for (const auto& r : out.landmarks->regions) {
    c.require(r.mse_px2.has_value(), "region without MSE");
    if (r.mse_px2) worst = std::max(worst, *r.mse_px2);
    c.require(r.non_independent, "non-independence flag not set");
  }
  c.require(out.landmarks->regions.size() == 4, "not every region reported");
  c.require(worst < 1.0, fmt("MSE %.4g px^2 >= 1", worst));
  if (c.out.pass)
    c.out.detail = fmt("%zu regions, worst MSE %.3g px^2, non-independent flag set",
                       out.landmarks->regions.size(), worst);
  return c.out;
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"synthetic registration recovery", synthetic_recovery},
      {"regional beats global", regional_beats_global},
      {"costes oracle equivalence", costes_oracle},
      {"pcc correctness", pcc_correctness},
      {"deconvolution round trip", deconvolution_round_trip},
      {"rcm/cqm exactness", rcm_cqm_exactness},
      {"tiling transparency", tiling_transparency},
      {"report schema", report_schema},
      {"landmark mse", manual_landmark_mse},
  };
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s  %-32s %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", int(criteria.size()) - failures, criteria.size());
  return failures;
}
