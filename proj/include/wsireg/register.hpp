#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wsireg/affine.hpp"
#include "wsireg/annotations.hpp"
#include "wsireg/features.hpp"
#include "wsireg/pyramid.hpp"

namespace wsireg {

enum class RegistrationMethod { Manual, Feature };

std::string to_string(RegistrationMethod m);
RegistrationMethod registration_method_from_string(const std::string& s);

struct RegionRegistration {
  RegionPair region;
  AffineTransform transform;  // moving -> fixed, slide-global level-0 pixels
  std::size_t inlier_count = 0;
  double mean_residual_px = 0.0;
  RegistrationMethod method = RegistrationMethod::Manual;
  std::size_t match_count = 0;    // feature mode: matches before RANSAC
  bool determinant_flag = false;  // |det| outside the stretch bounds
};

struct RegisterOptions {
  DetectorParams detector;
  double ratio = 0.8;
  RansacParams ransac;  // inlier tolerance in level-0 pixels
  /// Pyramid level the features are computed on (pyramid input only).
  int analysis_level = 0;
  double det_lo = 0.2;
  double det_hi = 5.0;
};

/// Registers one region pair on H planes held in memory.
RegionRegistration register_region_pair(const Plane& fixed_h, const Plane& moving_h,
                                        const RegionPair& rp, RegistrationMethod mode,
                                        const RegisterOptions& options = {});

/// Same, reading only the two region crops from the pyramids.
RegionRegistration register_region_pair(const TiledPyramid& fixed_h, const TiledPyramid& moving_h,
                                        const RegionPair& rp, RegistrationMethod mode,
                                        const RegisterOptions& options = {});

/// Registers every region concurrently. Results keep the input order.
std::vector<RegionRegistration> register_regions(const TiledPyramid& fixed_h,
                                                 const TiledPyramid& moving_h,
                                                 const std::vector<RegionPair>& regions,
                                                 RegistrationMethod mode,
                                                 const RegisterOptions& options, int workers);

/// Inverse-maps `out_rect` (fixed-slide level-0 pixels) through `t` into the
/// moving slide with bilinear interpolation. Samples outside the moving image
/// are 0. Reads only the bounding box of the back-projected footprint.
Plane warp_region(const TiledPyramid& moving, const AffineTransform& t, const Rect& out_rect,
                  int workers = 1);

/// Dense counterpart used for whole small images.
Plane warp_dense(const Plane& moving, const AffineTransform& t, const Rect& out_rect);

/// Index of the region whose fixed_rect center is nearest to (x, y) among
/// regions containing it; the first wins ties. -1 when none contains it.
int owning_region(const std::vector<RegionRegistration>& regions, double x, double y);

/// Uncovered parts of [0, width) x [0, height), as disjoint boxes.
std::vector<Rect> coverage_gaps(const std::vector<RegionRegistration>& regions,
                                std::int64_t width, std::int64_t height);

struct AssembleOptions {
  bool allow_holes = false;
  int tile_size = 512;
  int workers = 1;
  std::string slide_id;
  /// Provenance raster location; defaults to "<out_dir>_labels".
  std::filesystem::path labels_dir;
};

struct AssembleResult {
  TiledPyramid image;
  TiledPyramid labels;  // region index per pixel, -1 for holes
  std::vector<Rect> holes;
};

/// Warps each canvas pixel with the transform of its owning region and
/// writes the result as a pyramid of the moving slide's sample type.
/// Throws CoverageGap listing the uncovered boxes unless holes are allowed.
AssembleResult assemble_piecewise(const std::vector<RegionRegistration>& regions,
                                  const TiledPyramid& moving, std::int64_t canvas_width,
                                  std::int64_t canvas_height,
                                  const std::filesystem::path& out_dir,
                                  const AssembleOptions& options = {});

struct RegionMse {
  std::string name;
  std::size_t count = 0;
  std::optional<double> mse_px2;  // empty when no landmark falls in the region
  bool non_independent = false;   // evaluated on landmarks used for the fit
};

struct LandmarkReport {
  std::vector<RegionMse> regions;
  std::vector<std::size_t> excluded;  // landmark indices outside every region
};

/// Per-region mean squared distance between transformed moving landmarks and
/// their fixed partners. Landmarks go to the region that owns their fixed
/// point under the assembly rule.
LandmarkReport landmark_mse(const std::vector<RegionRegistration>& registrations,
                            const std::vector<LandmarkPair>& landmarks);

std::string format_registration_report(const std::vector<RegionRegistration>& regs,
                                       const std::optional<LandmarkReport>& mse = std::nullopt);

}  // namespace wsireg
