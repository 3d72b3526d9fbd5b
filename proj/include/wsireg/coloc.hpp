#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wsireg/image.hpp"
#include "wsireg/pyramid.hpp"

namespace wsireg {

/// Which pixel pairs enter a statistic.
enum class Inclusion {
  AtLeastOnePositive,    // a > 0 or b > 0
  BothAboveThresholds,   // a > t_a and b > t_b
};

/// Count, means and centred second moments of a pair stream. Merging is
/// associative up to rounding, so tiles can be reduced in any grouping.
struct CoMoments {
  std::uint64_t n = 0;
  double mean_a = 0.0;
  double mean_b = 0.0;
  double m2_a = 0.0;
  double m2_b = 0.0;
  double c_ab = 0.0;

  void add(double a, double b) {
    ++n;
    const double dx = a - mean_a;
    const double dy = b - mean_b;
    const double inv = 1.0 / static_cast<double>(n);
    const double w = static_cast<double>(n - 1) * inv;
    mean_a += dx * inv;
    mean_b += dy * inv;
    m2_a += dx * dx * w;
    m2_b += dy * dy * w;
    c_ab += dx * dy * w;
  }
  void merge(const CoMoments& o);
  /// Pearson correlation; empty when fewer than two pairs or a channel has
  /// zero variance.
  std::optional<double> correlation() const;
};

/// Pearson correlation over the included pairs. Throws Degenerate for an
/// inclusion set under two pairs or zero variance in either channel.
double pcc(const Plane& a, const Plane& b, Inclusion rule = Inclusion::AtLeastOnePositive,
           double t_a = 0.0, double t_b = 0.0);
double pcc(const TiledPyramid& a, const TiledPyramid& b,
           Inclusion rule = Inclusion::AtLeastOnePositive, double t_a = 0.0, double t_b = 0.0,
           int workers = 1);

inline constexpr int kCostesSteps = 256;

struct CostesThresholds {
  double t_a = 0.0;
  double t_b = 0.0;
  double slope = 0.0;      // b = slope * a + intercept
  double intercept = 0.0;
  std::optional<double> below_threshold_pcc;
  int index = 0;           // t_a = a_min + index * (a_max - a_min) / 256
  bool at_floor = false;   // no candidate reached a non-positive PCC
  bool user_set = false;
  double a_min = 0.0;
  double a_max = 0.0;

  static CostesThresholds manual(double t_a, double t_b);
};

/// Costes automatic thresholds. The regression of b on a (ordinary least
/// squares) and the candidate walk use the at-least-one-positive pairs.
/// Candidates t_a = a_min + k * step, k = 256 down to 1, step = range / 256,
/// t_b on the regression line; the first candidate whose below-threshold
/// pairs (a < t_a and b < t_b) have PCC <= 0 wins. Throws Degenerate when a
/// channel has fewer than 10 distinct values or a has zero variance.
CostesThresholds costes_thresholds(const Plane& a, const Plane& b);
CostesThresholds costes_thresholds(const TiledPyramid& a, const TiledPyramid& b, int workers = 1);

struct QuadrantCounts {
  std::uint64_t white = 0;  // a > t_a, b > t_b
  std::uint64_t red = 0;    // a > t_a, b <= t_b
  std::uint64_t green = 0;  // a <= t_a, b > t_b
  std::uint64_t black = 0;  // both at or below
  std::uint64_t total() const { return white + red + green + black; }
};

/// Undefined metrics (empty denominators, degenerate correlations) are empty
/// optionals, never zeros.
struct ColocReport {
  std::optional<double> pcc_total;
  std::optional<double> pcc_coloc;
  // As written: %A Vol = white / (white + green), %B Vol = white / (white + red),
  // %A > th and %B > th are the same ratios over channel intensity sums.
  std::optional<double> pct_a_vol;
  std::optional<double> pct_b_vol;
  std::optional<double> pct_a_gt;
  std::optional<double> pct_b_gt;
  // Transposed pairing (A against red, B against green).
  std::optional<double> pct_a_vol_alt;
  std::optional<double> pct_b_vol_alt;
  std::optional<double> pct_a_gt_alt;
  std::optional<double> pct_b_gt_alt;
  QuadrantCounts quadrants;  // over the at-least-one-positive pairs
  std::uint64_t included = 0;
  CostesThresholds thresholds;
};

ColocReport coloc_report(const Plane& a, const Plane& b, const CostesThresholds& t);
ColocReport coloc_report(const TiledPyramid& a, const TiledPyramid& b, const CostesThresholds& t,
                         int workers = 1);

/// Structured text report: six headline columns, quadrant counts,
/// thresholds and the alternate percentages.
std::string format_coloc_report(const ColocReport& r, const std::string& label_a = "A",
                                const std::string& label_b = "B");

enum class RcmClass : std::uint8_t { White = 0, Red = 1, Green = 2, Black = 3 };

struct ConfidenceMap {
  RgbImage rgb;
  Image<std::uint8_t> classes;  // RcmClass per pooled pixel
  std::array<std::uint64_t, 4> counts{};
  std::int64_t factor = 1;
  double t_a = 0.0;
  double t_b = 0.0;
};

RcmClass rcm_class(double a, double b, double t_a, double t_b);
std::array<std::uint8_t, 3> rcm_color(RcmClass c);

/// Mean-pools both planes by `factor` and classifies each pooled pixel.
ConfidenceMap build_rcm(const Plane& a, const Plane& b, std::int64_t factor,
                        const CostesThresholds& t);
ConfidenceMap build_rcm(const TiledPyramid& a, const TiledPyramid& b, std::int64_t factor,
                        const CostesThresholds& t, int workers = 1);
/// Classifies already pooled planes.
ConfidenceMap classify_rcm(const Plane& pooled_a, const Plane& pooled_b, std::int64_t factor,
                           double t_a, double t_b);
std::string format_rcm_sidecar(const ConfidenceMap& m);

/// Per-pixel code A | B << 1 | C << 2 for channels strictly above their
/// thresholds; A drives the red bit, B green, C blue.
struct CombinationMap {
  RgbImage rgb;
  Image<std::uint8_t> codes;
  std::array<std::uint64_t, 8> counts{};
  std::array<double, 3> thresholds{};
};

std::uint8_t cqm_code(double a, double b, double c, const std::array<double, 3>& t);
std::array<std::uint8_t, 3> cqm_color(std::uint8_t code);

CombinationMap build_cqm(const std::array<const Plane*, 3>& channels,
                         const std::array<double, 3>& thresholds);

struct CqmPyramidResult {
  TiledPyramid rgb;
  std::array<std::uint64_t, 8> counts{};
  std::array<double, 3> thresholds{};
};

/// Tile-streamed CQM written as an 8-bit RGB pyramid.
CqmPyramidResult build_cqm(const std::array<const TiledPyramid*, 3>& channels,
                           const std::array<double, 3>& thresholds,
                           const std::filesystem::path& out_dir, const WriteOptions& options);
std::string format_cqm_sidecar(const std::array<std::uint64_t, 8>& counts,
                               const std::array<double, 3>& thresholds,
                               const std::array<std::string, 3>& labels);

struct Histogram2D {
  int bins = 256;
  std::vector<std::uint64_t> counts;  // counts[ia * bins + ib]
  std::uint64_t total = 0;
  std::string label_a = "A";
  std::string label_b = "B";

  std::uint64_t at(int ia, int ib) const {
    return counts[static_cast<std::size_t>(ia) * static_cast<std::size_t>(bins) +
                  static_cast<std::size_t>(ib)];
  }
  /// Log-scaled 8-bit rendering, a along x and b upward along y.
  Image<std::uint8_t> render() const;
};

/// Bin index of a value in [0, 1]; values outside are clamped.
int histogram_bin(double v, int bins);

Histogram2D histogram2d(const Plane& a, const Plane& b, int bins = 256);
Histogram2D histogram2d(const TiledPyramid& a, const TiledPyramid& b, int bins = 256,
                        int workers = 1);

}  // namespace wsireg
