#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wsireg/annotations.hpp"
#include "wsireg/coloc.hpp"
#include "wsireg/pyramid.hpp"
#include "wsireg/register.hpp"
#include "wsireg/stain.hpp"
#include "wsireg/synthgen.hpp"

namespace wsireg {

enum class RegistrationScope { Global, Regional };

std::string to_string(RegistrationScope s);
RegistrationScope registration_scope_from_string(const std::string& s);

/// Every tunable of the pipeline in one place. Loaded from a JSON file and
/// overridden by command-line flags; show-config prints the result.
struct PipelineConfig {
  struct Paths {
    std::string fixed;
    std::string moving;
    std::string regions;
    std::string palette;
    std::string output;
  } paths;

  // image model
  int tile_size = 512;
  int downsample_factor = 2;
  double pixel_size_um = 0.25;

  // stain
  double pct = 99.0;
  double gamma = 1.85;
  bool default_palette = false;

  // features and registration
  RegistrationScope mode = RegistrationScope::Regional;
  RegistrationMethod method = RegistrationMethod::Feature;
  double ratio = 0.8;
  double inlier_tol_px = 3.0;
  int ransac_max_iters = 2000;
  std::uint64_t seed = 0;
  int max_keypoints = 3000;
  double contrast_threshold = 0.02;
  int analysis_level = 0;
  double det_lo = 0.2;
  double det_hi = 5.0;
  bool allow_holes = false;

  // colocalization
  std::int64_t factor = 200;
  int bins = 256;

  int workers = 0;  // 0 = available parallelism

  int resolved_workers() const;
  RegisterOptions register_options() const;
  WriteOptions write_options(const std::string& slide_id = {}) const;
};

/// Throws Validation naming the first out-of-range parameter.
void validate(const PipelineConfig& c);

/// Keys absent from the text keep their defaults; unknown keys are rejected.
PipelineConfig parse_config(const std::string& text, PipelineConfig base = {});
PipelineConfig load_config(const std::filesystem::path& path, PipelineConfig base = {});
std::string format_config(const PipelineConfig& c);

// ingest

/// Converts one image file to a pyramid. The slide id defaults to the file
/// stem.
TiledPyramid ingest_image(const std::filesystem::path& image, const std::filesystem::path& out_dir,
                          const PipelineConfig& c, const std::string& slide_id = {});

/// Ingests every image file in `input` (or `input` itself when it is a
/// file) into `out_root/<stem>`, in name order. Returns manifest paths.
std::vector<std::filesystem::path> ingest(const std::filesystem::path& input,
                                          const std::filesystem::path& out_root,
                                          const PipelineConfig& c);

// deconvolve

/// Stain vectors from a palette file: either a stain-vector document or an
/// annotation document whose palette_samples are labelled H and DAB. Without
/// a file the reference vectors are used only if `default_palette` is set.
StainVectors resolve_palette(const PipelineConfig& c);

struct DeconvolveOutputs {
  TiledPyramid h;
  TiledPyramid dab;
  double h_reference = 0.0;  // stretch percentile values
  double dab_reference = 0.0;
};

/// Tile-streamed deconvolve, percentile stretch and gamma. Writes float32
/// pyramids to out_dir/H and out_dir/DAB with the input's geometry and
/// slide id. Equal to the dense pipeline applied to the whole slide.
DeconvolveOutputs run_deconvolve(const TiledPyramid& slide, const StainVectors& sv,
                                 const std::filesystem::path& out_dir, const PipelineConfig& c);

// register

/// Checks the document against both slides before any computation: slide
/// ids must match the pyramids and every rect and landmark must be in
/// bounds. Throws Validation with field-level messages.
void validate_regions(const AnnotationDocument& doc, const TiledPyramid& fixed,
                      const TiledPyramid& moving);

/// Regions actually fitted: the document's regions in regional mode, or one
/// whole-slide region carrying every landmark in global mode.
std::vector<RegionPair> regions_for_scope(const AnnotationDocument& doc, RegistrationScope scope,
                                          const TiledPyramid& fixed, const TiledPyramid& moving);

struct RegisterExtras {
  /// Further moving-slide pyramids (e.g. DAB) warped with the same transforms.
  std::vector<std::filesystem::path> apply_to;
  std::optional<GroundTruth> ground_truth;
  bool dump_features = false;
  bool assemble = true;
};

struct GroundTruthCheck {
  std::string region;       // ground-truth region name
  int registration = -1;    // index of the registration owning its core
  double grid_error_px = 0.0;
};

struct RegisterOutputs {
  std::vector<RegionRegistration> registrations;
  std::optional<LandmarkReport> landmarks;
  std::vector<GroundTruthCheck> ground_truth;
  std::optional<double> mean_grid_error_px;
  std::optional<TiledPyramid> registered;
  std::vector<TiledPyramid> applied;
  std::vector<Rect> holes;
  std::vector<std::string> warnings;
  std::filesystem::path report_path;
};

/// Registers, evaluates and assembles. Writes out_dir/registration_report.json
/// and, when assembling, out_dir/registered (plus out_dir/applied/<name>).
RegisterOutputs run_register(const TiledPyramid& fixed_h, const TiledPyramid& moving_h,
                             const AnnotationDocument& doc, const PipelineConfig& c,
                             const std::filesystem::path& out_dir,
                             const RegisterExtras& extras = {});

/// Mean grid transfer error of `regs` against each ground-truth region of
/// the moving slide, the region's core owned by whichever registration owns
/// its center.
std::vector<GroundTruthCheck> check_against_truth(const std::vector<RegionRegistration>& regs,
                                                  const SlideTruth& truth);

// evaluate and cqm

struct EvaluateOutputs {
  ColocReport report;
  ConfidenceMap rcm;
  Histogram2D histogram;
  std::filesystem::path report_path;
};

/// Costes (or user) thresholds, six-column report, RCM and 2D histogram of two
/// registered channels. Writes coloc_report.json, rcm.png, rcm.json and
/// histogram.png into out_dir.
EvaluateOutputs run_evaluate(const TiledPyramid& fixed_h, const TiledPyramid& registered_h,
                             const PipelineConfig& c, const std::filesystem::path& out_dir,
                             const std::optional<std::array<double, 2>>& thresholds = {});

struct CqmOutputs {
  CqmPyramidResult map;
  std::filesystem::path sidecar_path;
  std::filesystem::path preview_path;
};

/// Thresholds come from `thresholds` or, failing that, from Costes of each
/// channel against `reference` (an H pyramid). Writes out_dir/cqm (pyramid),
/// cqm.json and cqm_preview.png.
CqmOutputs run_cqm(const std::array<const TiledPyramid*, 3>& dab, const PipelineConfig& c,
                   const std::filesystem::path& out_dir,
                   const std::optional<std::array<double, 3>>& thresholds = {},
                   const TiledPyramid* reference = nullptr);

/// Writes an 8-bit raster as a PNG file.
void write_png(const Image<std::uint8_t>& img, const std::filesystem::path& path);

/// Process exit code for a library error kind.
int exit_code(ErrorKind kind);

}  // namespace wsireg
