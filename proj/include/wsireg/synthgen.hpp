#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wsireg/affine.hpp"
#include "wsireg/annotations.hpp"
#include "wsireg/pyramid.hpp"
#include "wsireg/stain.hpp"

namespace wsireg {

enum class ArtifactKind { Tear, Fold };

std::string to_string(ArtifactKind k);

/// Requests an artifact inside one region of one moving slide.
struct ArtifactSpec {
  ArtifactKind kind = ArtifactKind::Tear;
  int slide = 1;
  int region = 0;
  double size = 0.3;  // fraction of the region's core cell side
};

/// A placed artifact in moving-slide pixels. Tears blank the polygon; folds
/// overlay a shifted, darkened copy of the tissue inside it.
struct Artifact {
  ArtifactKind kind = ArtifactKind::Tear;
  int slide = 1;
  int region = 0;
  std::vector<Point2> polygon;
  Point2 shift;  // folds only
};

struct SyntheticScene {
  std::uint64_t seed = 1;
  std::int64_t width = 2048;
  std::int64_t height = 2048;
  int slides = 2;  // slide 0 is the fixed reference
  int grid_cols = 2;
  int grid_rows = 2;
  std::int64_t overlap_px = 64;  // fixed_rect growth beyond the core cell
  std::int64_t moving_margin_px = 16;
  double max_translation_px = 50.0;
  double max_rotation_deg = 10.0;
  double min_scale = 0.95;
  double max_scale = 1.05;
  /// Explicit per-slide, per-region transforms (moving -> fixed) replacing
  /// the random draw; index 0 of the outer list is moving slide 1.
  std::vector<std::vector<AffineTransform>> transforms;
  std::vector<ArtifactSpec> artifacts;
  int landmarks_per_region = 8;
  double noise_amplitude = 0.0;  // uniform per-pixel RGB noise, intensity levels
  double dab_expression = 0.6;   // probability a DAB blob shows on a slide
  StainVectors stains = reference_hdab_vectors();
  int tile_size = 512;
  std::string name = "synth";
};

struct SyntheticRegion {
  RegionPair pair;  // rects and exact landmarks for this slide pair
  Rect core;        // fixed-slide cell this region's transform governs
  AffineTransform transform;
};

struct SlideTruth {
  std::string slide_id;
  std::vector<SyntheticRegion> regions;  // empty for the fixed slide
  std::vector<Artifact> artifacts;
};

struct GroundTruth {
  std::uint64_t seed = 0;
  std::int64_t width = 0;
  std::int64_t height = 0;
  StainVectors stains;
  std::vector<SlideTruth> slides;
};

/// Resolved scene: transforms, artifacts and the analytic tissue model.
/// Every rendering call is a pure function of the scene and the pixel.
class SceneModel {
 public:
  explicit SceneModel(const SyntheticScene& scene);

  const SyntheticScene& scene() const { return scene_; }
  const GroundTruth& truth() const { return truth_; }
  std::string slide_id(int slide) const;

  /// Ground-truth stain concentrations (H, DAB, residual) of a pixel.
  std::array<double, 3> concentrations(int slide, double x, double y) const;
  /// Region whose transform carries moving pixel (x, y) of `slide`.
  int owner(int slide, double x, double y) const;

  RgbImage render(int slide, const Rect& r) const;
  /// One ground-truth concentration channel over `r`.
  Plane render_concentration(int slide, int channel, const Rect& r) const;
  /// True where the pixel lies inside an artifact of `slide`.
  bool in_artifact(int slide, double x, double y) const;

 private:
  struct BlobCache;
  double tissue_h(double x, double y, BlobCache& cache) const;
  double tissue_dab(int slide, double x, double y, BlobCache& cache) const;
  double tissue_mask(double x, double y) const;
  std::array<double, 3> tissue(int slide, double px, double py, BlobCache& cache) const;
  std::array<double, 3> concentrations(int slide, double x, double y, BlobCache& cache) const;

  SyntheticScene scene_;
  GroundTruth truth_;
  std::vector<std::vector<Rect>> cores_;  // per slide
};

struct SyntheticSet {
  std::vector<TiledPyramid> slides;
  GroundTruth truth;
  /// Region documents pairing slide 0 with each moving slide.
  std::vector<AnnotationDocument> regions;
  std::vector<std::filesystem::path> region_files;
  std::filesystem::path ground_truth_file;
};

/// Renders every slide of the scene as an 8-bit RGB pyramid under
/// `out_dir`, with ground_truth.json and one region document per moving
/// slide. Output bytes do not depend on `workers`.
SyntheticSet generate(const SyntheticScene& scene, const std::filesystem::path& out_dir,
                      int workers = 1);
SyntheticSet generate_pair(SyntheticScene scene, const std::filesystem::path& out_dir,
                           int workers = 1);
SyntheticSet generate_triple(SyntheticScene scene, const std::filesystem::path& out_dir,
                             int workers = 1);

std::string format_ground_truth(const GroundTruth& t);
GroundTruth parse_ground_truth(const std::string& text);

/// Directory name of slide `i` inside a generated set.
std::string synthetic_slide_dir(int slide, int slides);

}  // namespace wsireg
