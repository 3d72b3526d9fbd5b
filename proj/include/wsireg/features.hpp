#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "wsireg/affine.hpp"
#include "wsireg/image.hpp"

namespace wsireg {

struct Keypoint {
  double x = 0.0;  // region-local level-0 pixels
  double y = 0.0;
  double scale = 1.0;
  double orientation = 0.0;  // radians in [0, 2*pi)
  double response = 0.0;
  int octave = 0;
  double layer = 0.0;  // fractional scale index inside the octave
};

inline constexpr std::size_t kDescriptorLength = 128;
using Descriptor = std::array<float, kDescriptorLength>;

struct FeatureSet {
  std::vector<Keypoint> keypoints;
  std::vector<Descriptor> descriptors;
};

struct DetectorParams {
  int scales_per_octave = 3;
  double base_sigma = 1.6;
  double assumed_blur = 0.5;
  double contrast_threshold = 0.02;
  double edge_ratio = 10.0;
  int max_keypoints = 3000;
  int border = 5;
};

class FeatureDetector {
 public:
  virtual ~FeatureDetector() = default;
  virtual FeatureSet detect(const Plane& plane) const = 0;
  virtual std::string name() const = 0;
};

/// Difference-of-Gaussians extrema with 4x4x8 gradient-orientation
/// histogram descriptors.
class DogDetector final : public FeatureDetector {
 public:
  explicit DogDetector(DetectorParams params = {}) : params_(params) {}
  FeatureSet detect(const Plane& plane) const override;
  std::string name() const override { return "dog"; }
  const DetectorParams& params() const { return params_; }

 private:
  DetectorParams params_;
};

/// Keypoints sorted by response (descending), one descriptor each.
/// Deterministic. Throws for planes smaller than 32x32; a flat plane
/// yields an empty set.
FeatureSet detect_and_describe(const Plane& h_plane, const DetectorParams& params = {});

struct Match {
  int fixed_index = 0;
  int moving_index = 0;
  float distance = 0.0f;
};

struct MatchSet {
  std::vector<Match> pairs;
  std::vector<std::uint8_t> inlier_mask;  // empty until RANSAC runs

  std::size_t inlier_count() const;
};

/// Nearest neighbours passing best < ratio * second-best, kept only when the
/// moving descriptor's own nearest neighbour is the same fixed descriptor.
MatchSet match_descriptors(std::span<const Descriptor> fixed, std::span<const Descriptor> moving,
                           double ratio = 0.8);

struct RansacParams {
  double inlier_tol_px = 3.0;
  int max_iters = 2000;
  std::uint64_t seed = 0;
  double confidence = 0.999;
};

struct RansacResult {
  AffineTransform transform;  // moving -> fixed
  MatchSet matches;           // with inlier_mask populated
  std::size_t inlier_count = 0;
  double mean_residual_px = 0.0;
};

/// Robust affine between matched keypoints from 3-point minimal samples.
/// The best hypothesis (most inliers, then lowest mean inlier residual) is
/// refit by least squares on its inliers until the inlier set is stable;
/// the returned mask is evaluated under the returned transform.
RansacResult ransac_affine(const MatchSet& matches, std::span<const Keypoint> fixed,
                           std::span<const Keypoint> moving, const RansacParams& params = {});

std::string format_features(const FeatureSet& f);
std::string format_matches(const MatchSet& m);

}  // namespace wsireg
