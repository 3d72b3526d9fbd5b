#pragma once

#include <array>
#include <span>
#include <string>

#include "wsireg/image.hpp"

namespace wsireg {

/// 2x3 matrix mapping moving-slide (x, y, 1) to fixed-slide (x', y'):
///   x' = m[0] x + m[1] y + m[2]
///   y' = m[3] x + m[4] y + m[5]
class AffineTransform {
 public:
  AffineTransform() = default;
  explicit AffineTransform(const std::array<double, 6>& m) : m_(m) {}

  static AffineTransform identity() { return {}; }
  static AffineTransform translation(double dx, double dy) {
    return AffineTransform({1, 0, dx, 0, 1, dy});
  }
  /// Rotation by `degrees` and isotropic `scale` about `center`, then a shift.
  static AffineTransform similarity(double degrees, double scale, Point2 center, double dx,
                                    double dy);

  const std::array<double, 6>& coefficients() const { return m_; }
  double operator[](std::size_t i) const { return m_[i]; }
  double& operator[](std::size_t i) { return m_[i]; }

  Point2 apply(Point2 p) const {
    return {m_[0] * p.x + m_[1] * p.y + m_[2], m_[3] * p.x + m_[4] * p.y + m_[5]};
  }

  double determinant() const { return m_[0] * m_[4] - m_[1] * m_[3]; }
  bool invertible() const;
  AffineTransform inverse() const;
  /// (*this)(inner(p))
  AffineTransform compose(const AffineTransform& inner) const;

  /// True when |det| of the linear part lies in [lo, hi].
  bool within_stretch_bounds(double lo = 0.2, double hi = 5.0) const;

  friend bool operator==(const AffineTransform&, const AffineTransform&) = default;

 private:
  std::array<double, 6> m_{1, 0, 0, 0, 1, 0};
};

std::string to_string(const AffineTransform& t);

struct PointPair {
  Point2 moving;
  Point2 fixed;
};

/// Least-squares affine from moving to fixed points. Exact for three
/// non-collinear pairs. Throws FitFailure for < 3 pairs or a rank-deficient
/// (collinear) configuration.
AffineTransform fit_affine_lsq(std::span<const PointPair> pairs);

/// Euclidean distance between t(moving) and fixed.
double transfer_error(const AffineTransform& t, const PointPair& pair);
double sum_squared_transfer_error(const AffineTransform& t, std::span<const PointPair> pairs);

/// Mean over an n x n grid spanning `rect` (fixed coordinates) of
/// |estimate(truth^-1(p)) - p|: how far the estimate misplaces each
/// fixed-slide location.
double grid_transfer_error(const AffineTransform& estimate, const AffineTransform& truth,
                           const Rect& rect, int n = 10);

}  // namespace wsireg
