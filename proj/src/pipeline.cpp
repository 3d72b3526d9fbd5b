#include "wsireg/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "wsireg/parallel.hpp"
#include "wsireg/tile_codec.hpp"

namespace wsireg {

using nlohmann::json;

std::string to_string(RegistrationScope s) {
  return s == RegistrationScope::Global ? "global" : "regional";
}

RegistrationScope registration_scope_from_string(const std::string& s) {
  if (s == "global") return RegistrationScope::Global;
  if (s == "regional") return RegistrationScope::Regional;
  throw Error(ErrorKind::InvalidArgument, "unknown mode '" + s + "' (expected global or regional)");
}

int PipelineConfig::resolved_workers() const { return workers > 0 ? workers : default_workers(); }

RegisterOptions PipelineConfig::register_options() const {
  RegisterOptions o;
  o.detector.max_keypoints = max_keypoints;
  o.detector.contrast_threshold = contrast_threshold;
  o.ratio = ratio;
  o.ransac.inlier_tol_px = inlier_tol_px;
  o.ransac.max_iters = ransac_max_iters;
  o.ransac.seed = seed;
  o.analysis_level = analysis_level;
  o.det_lo = det_lo;
  o.det_hi = det_hi;
  return o;
}

WriteOptions PipelineConfig::write_options(const std::string& slide_id) const {
  WriteOptions o;
  o.tile_size = tile_size;
  o.downsample_factor = downsample_factor;
  o.pixel_size_um = pixel_size_um;
  o.slide_id = slide_id;
  o.workers = resolved_workers();
  return o;
}

void validate(const PipelineConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw Error(ErrorKind::Validation, "config: " + what);
  };
  require(c.tile_size >= 16, "tile_size must be >= 16");
  require(c.downsample_factor >= 2, "downsample_factor must be >= 2");
  require(c.pixel_size_um > 0.0, "pixel_size_um must be > 0");
  require(c.pct > 0.0 && c.pct <= 100.0, "pct must be in (0, 100]");
  require(c.gamma > 0.0, "gamma must be > 0");
  require(c.ratio > 0.0 && c.ratio <= 1.0, "ratio must be in (0, 1]");
  require(c.inlier_tol_px > 0.0, "inlier_tol_px must be > 0");
  require(c.ransac_max_iters >= 1, "ransac_max_iters must be >= 1");
  require(c.max_keypoints >= 3, "max_keypoints must be >= 3");
  require(c.contrast_threshold > 0.0, "contrast_threshold must be > 0");
  require(c.analysis_level >= 0, "analysis_level must be >= 0");
  require(c.det_lo > 0.0 && c.det_lo < c.det_hi, "need 0 < det_lo < det_hi");
  require(c.factor >= 1, "factor must be >= 1");
  require(c.bins >= 2, "bins must be >= 2");
  require(c.workers >= 0, "workers must be >= 0");
}

namespace {

template <typename T>
void take(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorKind::Io, "failed writing " + path.string());
}

const std::vector<std::string> kConfigKeys = {
    "paths",         "tile_size",        "downsample_factor", "pixel_size_um", "pct",
    "gamma",         "default_palette",  "mode",              "method",        "ratio",
    "inlier_tol_px", "ransac_max_iters", "seed",              "max_keypoints", "contrast_threshold",
    "analysis_level", "det_lo",          "det_hi",            "allow_holes",   "factor",
    "bins",          "workers"};

}  // namespace

PipelineConfig parse_config(const std::string& text, PipelineConfig c) {
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw Error(ErrorKind::Format, "config must be a JSON object");
    for (const auto& [key, value] : j.items())
      if (std::find(kConfigKeys.begin(), kConfigKeys.end(), key) == kConfigKeys.end())
        throw Error(ErrorKind::Validation, "config: unknown key '" + key + "'");
    if (j.contains("paths")) {
      const json& p = j.at("paths");
      take(p, "fixed", c.paths.fixed);
      take(p, "moving", c.paths.moving);
      take(p, "regions", c.paths.regions);
      take(p, "palette", c.paths.palette);
      take(p, "output", c.paths.output);
    }
    take(j, "tile_size", c.tile_size);
    take(j, "downsample_factor", c.downsample_factor);
    take(j, "pixel_size_um", c.pixel_size_um);
    take(j, "pct", c.pct);
    take(j, "gamma", c.gamma);
    take(j, "default_palette", c.default_palette);
    if (j.contains("mode")) c.mode = registration_scope_from_string(j.at("mode").get<std::string>());
    if (j.contains("method"))
      c.method = registration_method_from_string(j.at("method").get<std::string>());
    take(j, "ratio", c.ratio);
    take(j, "inlier_tol_px", c.inlier_tol_px);
    take(j, "ransac_max_iters", c.ransac_max_iters);
    take(j, "seed", c.seed);
    take(j, "max_keypoints", c.max_keypoints);
    take(j, "contrast_threshold", c.contrast_threshold);
    take(j, "analysis_level", c.analysis_level);
    take(j, "det_lo", c.det_lo);
    take(j, "det_hi", c.det_hi);
    take(j, "allow_holes", c.allow_holes);
    take(j, "factor", c.factor);
    take(j, "bins", c.bins);
    take(j, "workers", c.workers);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, std::string("malformed config: ") + e.what());
  }
  return c;
}

PipelineConfig load_config(const std::filesystem::path& path, PipelineConfig base) {
  return parse_config(slurp(path), std::move(base));
}

std::string format_config(const PipelineConfig& c) {
  const json j = {{"paths",
                   {{"fixed", c.paths.fixed},
                    {"moving", c.paths.moving},
                    {"regions", c.paths.regions},
                    {"palette", c.paths.palette},
                    {"output", c.paths.output}}},
                  {"tile_size", c.tile_size},
                  {"downsample_factor", c.downsample_factor},
                  {"pixel_size_um", c.pixel_size_um},
                  {"pct", c.pct},
                  {"gamma", c.gamma},
                  {"default_palette", c.default_palette},
                  {"mode", to_string(c.mode)},
                  {"method", to_string(c.method)},
                  {"ratio", c.ratio},
                  {"inlier_tol_px", c.inlier_tol_px},
                  {"ransac_max_iters", c.ransac_max_iters},
                  {"seed", c.seed},
                  {"max_keypoints", c.max_keypoints},
                  {"contrast_threshold", c.contrast_threshold},
                  {"analysis_level", c.analysis_level},
                  {"det_lo", c.det_lo},
                  {"det_hi", c.det_hi},
                  {"allow_holes", c.allow_holes},
                  {"factor", c.factor},
                  {"bins", c.bins},
                  {"workers", c.workers}};
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------- ingest

TiledPyramid ingest_image(const std::filesystem::path& image, const std::filesystem::path& out_dir,
                          const PipelineConfig& c, const std::string& slide_id) {
  if (!std::filesystem::is_regular_file(image))
    throw Error(ErrorKind::Io, "input image not found: " + image.string());
  const AnyImage img = read_image_file(image);
  const std::string id = slide_id.empty() ? image.stem().string() : slide_id;
  return std::visit([&](const auto& raster) { return write_pyramid(raster, out_dir, c.write_options(id)); },
                    img);
}

std::vector<std::filesystem::path> ingest(const std::filesystem::path& input,
                                          const std::filesystem::path& out_root,
                                          const PipelineConfig& c) {
  if (!std::filesystem::exists(input)) throw Error(ErrorKind::Io, "input not found: " + input.string());
  std::vector<std::filesystem::path> images;
  if (std::filesystem::is_directory(input)) {
    for (const auto& e : std::filesystem::directory_iterator(input)) {
      if (!e.is_regular_file()) continue;
      std::string ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(),
                     [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
      if (ext == ".png" || ext == ".tif" || ext == ".tiff" || ext == ".jpg" || ext == ".jpeg")
        images.push_back(e.path());
    }
    std::sort(images.begin(), images.end());
    if (images.empty()) throw Error(ErrorKind::Io, "no image files in " + input.string());
  } else {
    images.push_back(input);
  }
  std::vector<std::filesystem::path> manifests;
  for (const auto& img : images) {
    const auto dir = images.size() == 1 && !std::filesystem::is_directory(input)
                         ? out_root
                         : out_root / img.stem();
    ingest_image(img, dir, c);
    manifests.push_back(dir / "manifest.json");
  }
  return manifests;
}

// ---------------------------------------------------------------- deconvolve

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return s;
}

}  // namespace

StainVectors resolve_palette(const PipelineConfig& c) {
  if (c.paths.palette.empty()) {
    if (c.default_palette) return reference_hdab_vectors();
    throw Error(ErrorKind::Validation,
                "no palette: sample H and DAB pixels in the annotation tool and pass the saved "
                "document with --palette-file, or pass --default-palette to use reference vectors");
  }
  const std::string text = slurp(c.paths.palette);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, "palette file is not JSON: " + std::string(e.what()));
  }
  if (j.contains("rows")) return parse_stain_vectors(text);
  const AnnotationDocument doc = parse_annotations(text);
  std::vector<Rgb8> h, dab;
  for (const auto& s : doc.palette_samples) {
    const std::string l = lower(s.label);
    const Rgb8 px{s.rgb[0], s.rgb[1], s.rgb[2]};
    if (l == "h" || l == "hematoxylin") h.push_back(px);
    else if (l == "dab") dab.push_back(px);
  }
  if (h.empty() || dab.empty())
    throw Error(ErrorKind::Validation, "palette document needs samples labelled H and DAB (got " +
                                           std::to_string(h.size()) + " H, " +
                                           std::to_string(dab.size()) + " DAB)");
  return estimate_palette(h, dab);
}

namespace {

// Runs `compute` over tiles in batches of `workers` and hands results to
// `consume` in tile order on the calling thread.
template <typename Result, typename Compute, typename Consume>
void tile_batches(const TileGrid& g, int workers, Compute&& compute, Consume&& consume) {
  const std::int64_t n = g.tile_count();
  const std::int64_t batch = std::max(1, workers);
  std::vector<Result> results(static_cast<std::size_t>(batch));
  for (std::int64_t start = 0; start < n; start += batch) {
    const std::int64_t count = std::min(batch, n - start);
    parallel_for(count, workers, [&](std::int64_t k) {
      const std::int64_t i = start + k;
      results[static_cast<std::size_t>(k)] = compute(i % g.cols(), i / g.cols());
    });
    for (std::int64_t k = 0; k < count; ++k) consume(results[static_cast<std::size_t>(k)]);
  }
}

}  // namespace

DeconvolveOutputs run_deconvolve(const TiledPyramid& slide, const StainVectors& sv,
                                 const std::filesystem::path& out_dir, const PipelineConfig& c) {
  validate(c);
  const TileGrid& g = slide.grid(0);
  if (g.channels != 3 || g.sample_type != SampleType::UInt8)
    throw Error(ErrorKind::Validation, "deconvolve needs an 8-bit RGB slide");
  const Deconvolver dec(sv);
  const int workers = c.resolved_workers();
  const auto maxc = dec.max_concentration();

  auto planes = [&](std::int64_t col, std::int64_t row) {
    const auto tile = slide.tile(0, col, row);
    const auto& rgb = std::get<Image<std::uint8_t>>(*tile);
    auto ch = dec(rgb);
    return std::array<Plane, 2>{std::move(ch[0].values), std::move(ch[1].values)};
  };

  std::array<StreamingPercentile, 2> pct{StreamingPercentile(c.pct, maxc[0]),
                                         StreamingPercentile(c.pct, maxc[1])};
  using Pair = std::array<Plane, 2>;
  tile_batches<Pair>(g, workers, planes, [&](const Pair& p) {
    for (int k = 0; k < 2; ++k) pct[k].observe_first_pass(p[k].samples());
  });
  for (auto& p : pct) p.end_first_pass();
  if (pct[0].needs_second_pass() || pct[1].needs_second_pass())
    tile_batches<Pair>(g, workers, planes, [&](const Pair& p) {
      for (int k = 0; k < 2; ++k)
        if (pct[k].needs_second_pass()) pct[k].observe_second_pass(p[k].samples());
    });

  DeconvolveOutputs out{TiledPyramid{}, TiledPyramid{}, pct[0].result(), pct[1].result()};
  const std::array<double, 2> refs{out.h_reference, out.dab_reference};
  const std::array<std::string, 2> names{sv.labels[0], sv.labels[1]};
  const std::array<std::filesystem::path, 2> dirs{out_dir / "H", out_dir / "DAB"};
  std::vector<std::unique_ptr<PyramidWriter>> writers;
  for (int k = 0; k < 2; ++k) {
    WriteOptions wo = c.write_options(slide.info().slide_id);
    wo.tile_size = g.tile_size;
    wo.downsample_factor = slide.info().downsample_factor;
    wo.pixel_size_um = slide.info().pixel_size_um;
    wo.channel_names = {names[static_cast<std::size_t>(k)]};
    writers.push_back(std::make_unique<PyramidWriter>(dirs[static_cast<std::size_t>(k)], g.width,
                                                      g.height, 1, SampleType::Float32, wo));
  }
  parallel_for(g.tile_count(), workers, [&](std::int64_t i) {
    const std::int64_t col = i % g.cols(), row = i / g.cols();
    auto p = planes(col, row);
    for (std::size_t k = 0; k < 2; ++k)
      writers[k]->write_tile(col, row, gamma_correct(stretch_to(p[k], refs[k]), c.gamma));
  });
  out.h = writers[0]->finish();
  out.dab = writers[1]->finish();
  return out;
}

// ---------------------------------------------------------------- register

void validate_regions(const AnnotationDocument& doc, const TiledPyramid& fixed,
                      const TiledPyramid& moving) {
  const auto& fi = fixed.info();
  const auto& mi = moving.info();
  std::vector<FieldError> errors;
  if (doc.fixed_slide != fi.slide_id)
    errors.push_back({"fixed_slide", "names slide '" + doc.fixed_slide +
                                         "' but the fixed pyramid is '" + fi.slide_id + "'"});
  if (doc.moving_slide != mi.slide_id)
    errors.push_back({"moving_slide", "names slide '" + doc.moving_slide +
                                          "' but the moving pyramid is '" + mi.slide_id + "'"});
  if (errors.empty())
    errors = validate_annotations(doc, {fi.slide_id, fi.width, fi.height},
                                  {mi.slide_id, mi.width, mi.height});
  if (doc.regions.empty()) errors.push_back({"regions", "document has no regions"});
  if (!errors.empty())
    throw Error(ErrorKind::Validation, "invalid regions document: " + describe(errors));
}

std::vector<RegionPair> regions_for_scope(const AnnotationDocument& doc, RegistrationScope scope,
                                          const TiledPyramid& fixed, const TiledPyramid& moving) {
  if (scope == RegistrationScope::Regional) return doc.regions;
  RegionPair whole;
  whole.name = "global";
  whole.fixed_rect = fixed.full_rect();
  whole.moving_rect = moving.full_rect();
  whole.source = RegionSource::Manual;
  for (const auto& r : doc.regions)
    whole.landmarks.insert(whole.landmarks.end(), r.landmarks.begin(), r.landmarks.end());
  return {whole};
}

std::vector<GroundTruthCheck> check_against_truth(const std::vector<RegionRegistration>& regs,
                                                  const SlideTruth& truth) {
  std::vector<GroundTruthCheck> out;
  for (const auto& r : truth.regions) {
    GroundTruthCheck g;
    g.region = r.pair.name;
    g.registration = owning_region(regs, r.core.center_x(), r.core.center_y());
    g.grid_error_px =
        g.registration < 0
            ? std::numeric_limits<double>::infinity()
            : grid_transfer_error(regs[static_cast<std::size_t>(g.registration)].transform,
                                  r.transform, r.core);
    out.push_back(g);
  }
  return out;
}

namespace {

const SlideTruth* find_truth(const GroundTruth& gt, const std::string& slide_id) {
  for (const auto& s : gt.slides)
    if (s.slide_id == slide_id) return &s;
  return nullptr;
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

void dump_region_features(const TiledPyramid& fixed_h, const TiledPyramid& moving_h,
                          const RegionPair& rp, const PipelineConfig& c,
                          const std::filesystem::path& dir) {
  const RegisterOptions o = c.register_options();
  const FeatureSet ff = detect_and_describe(fixed_h.read_region(0, rp.fixed_rect), o.detector);
  const FeatureSet mf = detect_and_describe(moving_h.read_region(0, rp.moving_rect), o.detector);
  write_text(dir / (rp.name + "_fixed.json"), format_features(ff));
  write_text(dir / (rp.name + "_moving.json"), format_features(mf));
  write_text(dir / (rp.name + "_matches.json"), format_matches(match_descriptors(ff.descriptors, mf.descriptors, o.ratio)));
}

}  // namespace

RegisterOutputs run_register(const TiledPyramid& fixed_h, const TiledPyramid& moving_h,
                             const AnnotationDocument& doc, const PipelineConfig& c,
                             const std::filesystem::path& out_dir, const RegisterExtras& extras) {
  validate(c);
  validate_regions(doc, fixed_h, moving_h);
  std::vector<TiledPyramid> apply_to;
  for (const auto& p : extras.apply_to) {
    apply_to.push_back(open_pyramid(p));
    if (apply_to.back().info().width != moving_h.info().width ||
        apply_to.back().info().height != moving_h.info().height)
      throw Error(ErrorKind::Validation,
                  "--apply-to pyramid " + p.string() + " does not match the moving slide's size");
  }
  const SlideTruth* truth =
      extras.ground_truth ? find_truth(*extras.ground_truth, moving_h.info().slide_id) : nullptr;
  if (extras.ground_truth && !truth)
    throw Error(ErrorKind::Validation,
                "ground truth has no slide '" + moving_h.info().slide_id + "'");

  const int workers = c.resolved_workers();
  const auto regions = regions_for_scope(doc, c.mode, fixed_h, moving_h);
  RegisterOutputs out;
  out.registrations =
      register_regions(fixed_h, moving_h, regions, c.method, c.register_options(), workers);

  for (const auto& r : out.registrations)
    if (r.determinant_flag)
      out.warnings.push_back("region '" + r.region.name + "': |det| = " +
                             std::to_string(std::abs(r.transform.determinant())) +
                             " outside [" + std::to_string(c.det_lo) + ", " +
                             std::to_string(c.det_hi) + "]");

  std::vector<LandmarkPair> eval;
  if (truth) {
    for (const auto& r : truth->regions)
      eval.insert(eval.end(), r.pair.landmarks.begin(), r.pair.landmarks.end());
  } else {
    for (const auto& r : doc.regions) eval.insert(eval.end(), r.landmarks.begin(), r.landmarks.end());
  }
  if (!eval.empty()) out.landmarks = landmark_mse(out.registrations, eval);
  if (truth) {
    out.ground_truth = check_against_truth(out.registrations, *truth);
    double sum = 0.0;
    for (const auto& g : out.ground_truth) sum += g.grid_error_px;
    if (!out.ground_truth.empty())
      out.mean_grid_error_px = sum / static_cast<double>(out.ground_truth.size());
  }

  if (extras.dump_features && c.method == RegistrationMethod::Feature)
    for (const auto& rp : regions) dump_region_features(fixed_h, moving_h, rp, c, out_dir / "features");

  const auto W = fixed_h.info().width, H = fixed_h.info().height;
  out.holes = coverage_gaps(out.registrations, W, H);
  for (const auto& h : out.holes)
    if (c.allow_holes) out.warnings.push_back("coverage hole " + to_string(h) + " left empty");

  json report = json::parse(format_registration_report(out.registrations, out.landmarks));
  report["mode"] = to_string(c.mode);
  report["method"] = to_string(c.method);
  report["fixed_slide"] = fixed_h.info().slide_id;
  report["moving_slide"] = moving_h.info().slide_id;
  json holes = json::array();
  for (const auto& h : out.holes) holes.push_back({{"x", h.x}, {"y", h.y}, {"w", h.w}, {"h", h.h}});
  report["coverage_holes"] = holes;
  report["warnings"] = out.warnings;
  if (truth) {
    json checks = json::array();
    for (const auto& g : out.ground_truth)
      checks.push_back({{"region", g.region},
                        {"registration", g.registration},
                        {"grid_error_px", finite_or_null(g.grid_error_px)}});
    report["ground_truth"] = {{"regions", checks},
                              {"mean_grid_error_px", finite_or_null(*out.mean_grid_error_px)}};
  }
  out.report_path = out_dir / "registration_report.json";
  write_text(out.report_path, report.dump(2) + "\n");

  if (extras.assemble) {
    AssembleOptions ao;
    ao.allow_holes = c.allow_holes;
    ao.tile_size = c.tile_size;
    ao.workers = workers;
    out.registered =
        assemble_piecewise(out.registrations, moving_h, W, H, out_dir / "registered", ao).image;
    for (std::size_t i = 0; i < apply_to.size(); ++i) {
      const std::string name = extras.apply_to[i].filename().string() == "manifest.json"
                                   ? extras.apply_to[i].parent_path().filename().string()
                                   : extras.apply_to[i].filename().string();
      out.applied.push_back(
          assemble_piecewise(out.registrations, apply_to[i], W, H, out_dir / "applied" / name, ao)
              .image);
    }
  }
  return out;
}

// ---------------------------------------------------------------- evaluate

void write_png(const Image<std::uint8_t>& img, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file_bytes(path, encode_png(img));
}

namespace {

void require_same_size(const TiledPyramid& a, const TiledPyramid& b, const std::string& what) {
  if (a.info().width != b.info().width || a.info().height != b.info().height)
    throw Error(ErrorKind::Validation,
                what + ": dimension mismatch " + std::to_string(a.info().width) + "x" +
                    std::to_string(a.info().height) + " vs " + std::to_string(b.info().width) +
                    "x" + std::to_string(b.info().height));
  if (a.info().channels != 1 || b.info().channels != 1)
    throw Error(ErrorKind::Validation, what + ": inputs must be single-channel pyramids");
}

std::string channel_label(const TiledPyramid& p, const std::string& fallback) {
  const auto& info = p.info();
  if (!info.slide_id.empty()) return info.slide_id;
  return fallback;
}

}  // namespace

EvaluateOutputs run_evaluate(const TiledPyramid& fixed_h, const TiledPyramid& registered_h,
                             const PipelineConfig& c, const std::filesystem::path& out_dir,
                             const std::optional<std::array<double, 2>>& thresholds) {
  validate(c);
  require_same_size(fixed_h, registered_h, "evaluate");
  const int workers = c.resolved_workers();
  const CostesThresholds t = thresholds ? CostesThresholds::manual((*thresholds)[0], (*thresholds)[1])
                                        : costes_thresholds(fixed_h, registered_h, workers);
  EvaluateOutputs out;
  out.report = coloc_report(fixed_h, registered_h, t, workers);
  out.rcm = build_rcm(fixed_h, registered_h, c.factor, t, workers);
  out.histogram = histogram2d(fixed_h, registered_h, c.bins, workers);
  const std::string la = channel_label(fixed_h, "A");
  std::string lb = channel_label(registered_h, "B");
  if (lb == la) lb += " (registered)";
  out.histogram.label_a = la;
  out.histogram.label_b = lb;

  out.report_path = out_dir / "coloc_report.json";
  write_text(out.report_path, format_coloc_report(out.report, la, lb));
  write_png(out.rcm.rgb, out_dir / "rcm.png");
  write_text(out_dir / "rcm.json", format_rcm_sidecar(out.rcm));
  write_png(out.histogram.render(), out_dir / "histogram.png");
  return out;
}

CqmOutputs run_cqm(const std::array<const TiledPyramid*, 3>& dab, const PipelineConfig& c,
                   const std::filesystem::path& out_dir,
                   const std::optional<std::array<double, 3>>& thresholds,
                   const TiledPyramid* reference) {
  validate(c);
  for (std::size_t k = 0; k < 3; ++k)
    if (!dab[k]) throw Error(ErrorKind::Validation, "cqm: channel " + std::to_string(k) + " missing");
  require_same_size(*dab[0], *dab[1], "cqm");
  require_same_size(*dab[0], *dab[2], "cqm");
  const int workers = c.resolved_workers();
  std::array<double, 3> t{};
  if (thresholds) {
    t = *thresholds;
  } else if (reference) {
    require_same_size(*dab[0], *reference, "cqm reference");
    for (std::size_t k = 0; k < 3; ++k) t[k] = costes_thresholds(*dab[k], *reference, workers).t_a;
  } else {
    throw Error(ErrorKind::Validation,
                "cqm needs per-channel thresholds or a reference H pyramid for Costes thresholds");
  }
  WriteOptions wo = c.write_options("cqm");
  wo.channel_names = {"R", "G", "B"};
  CqmOutputs out{build_cqm(dab, t, out_dir / "cqm", wo), out_dir / "cqm.json",
                 out_dir / "cqm_preview.png"};
  const std::array<std::string, 3> labels{channel_label(*dab[0], "A"), channel_label(*dab[1], "B"),
                                          channel_label(*dab[2], "C")};
  write_text(out.sidecar_path, format_cqm_sidecar(out.map.counts, t, labels));
  int level = 0;
  while (level + 1 < out.map.rgb.level_count() &&
         std::max(out.map.rgb.grid(level).width, out.map.rgb.grid(level).height) > 2048)
    ++level;
  write_png(out.map.rgb.read_region_u8(level, out.map.rgb.full_rect(level), workers),
            out.preview_path);
  return out;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Validation:
    case ErrorKind::InvalidArgument:
      return 2;
    case ErrorKind::CoverageGap:
      return 3;
    case ErrorKind::FitFailure:
      return 4;
    default:
      return 1;
  }
}

}  // namespace wsireg
