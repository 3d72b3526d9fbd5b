#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "wsireg/image.hpp"

namespace wsireg {

struct Rgb8 {
  std::uint8_t r = 0;
  std::uint8_t g = 0;
  std::uint8_t b = 0;
  friend bool operator==(const Rgb8&, const Rgb8&) = default;
};

/// Optical-density matrix. Row i is the unit OD vector of stain i, ordered
/// (hematoxylin, DAB, residual).
struct StainVectors {
  Eigen::Matrix3d od = Eigen::Matrix3d::Identity();
  std::array<std::string, 3> labels{"H", "DAB", "residual"};
};

/// Normalizes each row and checks invertibility.
StainVectors make_stain_vectors(const Eigen::Matrix3d& rows,
                                std::array<std::string, 3> labels = {"H", "DAB", "residual"});

/// Published hematoxylin/DAB reference vectors; residual is their cross product.
StainVectors reference_hdab_vectors();

std::array<double, 3> rgb_to_od(Rgb8 rgb);
std::array<double, 3> rgb_to_od(std::uint8_t r, std::uint8_t g, std::uint8_t b);

/// One stain concentration plane with its origin.
struct ChannelPlane {
  Plane values;
  std::string stain_label;
  std::string provenance;
};

/// Pixel-wise unmixing with a precomputed inverse and an OD lookup table.
class Deconvolver {
 public:
  explicit Deconvolver(const StainVectors& sv);

  std::array<double, 3> concentrations(std::uint8_t r, std::uint8_t g, std::uint8_t b) const;
  std::array<ChannelPlane, 3> operator()(const RgbImage& rgb) const;

  const Eigen::Matrix3d& inverse() const { return inverse_; }
  /// Largest concentration any 8-bit pixel can produce in each channel.
  std::array<double, 3> max_concentration() const;

 private:
  StainVectors sv_;
  Eigen::Matrix3d inverse_;
  std::array<double, 256> od_lut_{};
};

/// Concentrations = OD * inverse(od_matrix), negatives clamped to 0.
/// Planes are ordered (H, DAB, residual).
std::array<ChannelPlane, 3> deconvolve(const RgbImage& rgb, const StainVectors& sv);

/// Beer-Lambert recomposition of three concentration planes to 8-bit RGB.
RgbImage recompose(const Plane& h, const Plane& dab, const Plane& residual,
                   const StainVectors& sv);

/// Stain vectors from user-sampled pixels: each row is the normalized mean OD
/// of its samples, the residual row their normalized cross product.
StainVectors estimate_palette(std::span<const Rgb8> h_samples, std::span<const Rgb8> dab_samples,
                              std::array<std::string, 3> labels = {"H", "DAB", "residual"});

/// Nearest-rank percentile of the strictly positive values; 0 if none.
double positive_percentile(std::span<const float> values, double pct);

/// v' = min(v / P, 1) with P the pct-th percentile of positive values.
Plane percentile_stretch(const Plane& plane, double pct = 99.0);
Plane stretch_to(const Plane& plane, double reference);

/// v' = v^(1/gamma)
Plane gamma_correct(const Plane& plane, double gamma = 1.85);

/// Exact nearest-rank percentile over data seen in tiles, in two passes:
/// a coarse histogram locates the bin holding the target rank, then the
/// values falling in that bin are collected and selected exactly.
class StreamingPercentile {
 public:
  StreamingPercentile(double pct, double upper_bound, std::size_t bins = 1 << 16);

  void observe_first_pass(std::span<const float> values);
  void end_first_pass();
  bool needs_second_pass() const { return !done_; }
  void observe_second_pass(std::span<const float> values);
  double result();

 private:
  std::size_t bin_of(float v) const;

  double pct_;
  double upper_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t total_ = 0;
  std::uint64_t rank_ = 0;
  std::size_t target_bin_ = 0;
  std::uint64_t below_target_ = 0;
  std::vector<float> candidates_;
  bool first_done_ = false;
  bool done_ = false;
  double value_ = 0.0;
};

std::string format_stain_vectors(const StainVectors& sv);
StainVectors parse_stain_vectors(const std::string& text);
void save_stain_vectors(const StainVectors& sv, const std::filesystem::path& path);
StainVectors load_stain_vectors(const std::filesystem::path& path);

}  // namespace wsireg
