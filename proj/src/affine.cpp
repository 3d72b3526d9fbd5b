#include "wsireg/affine.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include <Eigen/Dense>

namespace wsireg {

AffineTransform AffineTransform::similarity(double degrees, double scale, Point2 center,
                                            double dx, double dy) {
  const double th = degrees * std::numbers::pi / 180.0;
  const double c = scale * std::cos(th);
  const double s = scale * std::sin(th);
  // p' = R (p - center) + center + shift
  return AffineTransform({c, -s, center.x - c * center.x + s * center.y + dx,  //
                          s, c, center.y - s * center.x - c * center.y + dy});
}

bool AffineTransform::invertible() const {
  const double scale = std::max({std::abs(m_[0]), std::abs(m_[1]), std::abs(m_[3]),
                                 std::abs(m_[4]), 1e-300});
  return std::abs(determinant()) > 1e-12 * scale * scale && std::isfinite(determinant());
}

AffineTransform AffineTransform::inverse() const {
  if (!invertible()) throw Error(ErrorKind::Singular, "affine transform is not invertible");
  const double det = determinant();
  const double a = m_[4] / det;
  const double b = -m_[1] / det;
  const double c = -m_[3] / det;
  const double d = m_[0] / det;
  return AffineTransform({a, b, -(a * m_[2] + b * m_[5]), c, d, -(c * m_[2] + d * m_[5])});
}

AffineTransform AffineTransform::compose(const AffineTransform& in) const {
  const auto& o = m_;
  const auto& i = in.m_;
  return AffineTransform({o[0] * i[0] + o[1] * i[3], o[0] * i[1] + o[1] * i[4],
                          o[0] * i[2] + o[1] * i[5] + o[2],  //
                          o[3] * i[0] + o[4] * i[3], o[3] * i[1] + o[4] * i[4],
                          o[3] * i[2] + o[4] * i[5] + o[5]});
}

bool AffineTransform::within_stretch_bounds(double lo, double hi) const {
  const double d = std::abs(determinant());
  return d >= lo && d <= hi;
}

std::string to_string(const AffineTransform& t) {
  std::ostringstream os;
  os.precision(10);
  os << "[[" << t[0] << ", " << t[1] << ", " << t[2] << "], [" << t[3] << ", " << t[4] << ", "
     << t[5] << "]]";
  return os.str();
}

AffineTransform fit_affine_lsq(std::span<const PointPair> pairs) {
  const auto n = static_cast<Eigen::Index>(pairs.size());
  if (n < 3)
    throw Error(ErrorKind::FitFailure,
                "affine fit needs >= 3 point pairs (got " + std::to_string(n) + ")");
  // Centre and scale the moving coordinates so slide-sized offsets do not
  // degrade conditioning.
  double mx = 0, my = 0;
  for (const auto& p : pairs) {
    mx += p.moving.x;
    my += p.moving.y;
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double spread = 0;
  for (const auto& p : pairs)
    spread += (p.moving.x - mx) * (p.moving.x - mx) + (p.moving.y - my) * (p.moving.y - my);
  spread = std::sqrt(spread / static_cast<double>(n));
  if (!(spread > 0.0))
    throw Error(ErrorKind::FitFailure, "affine fit: all moving points coincide");

  Eigen::MatrixXd a(n, 3);
  Eigen::MatrixXd rhs(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& p = pairs[static_cast<std::size_t>(i)];
    a(i, 0) = (p.moving.x - mx) / spread;
    a(i, 1) = (p.moving.y - my) / spread;
    a(i, 2) = 1.0;
    rhs(i, 0) = p.fixed.x;
    rhs(i, 1) = p.fixed.y;
  }
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(a.leftCols(2));
  const auto sv = svd.singularValues();
  if (sv(1) <= 1e-9 * sv(0))
    throw Error(ErrorKind::FitFailure, "affine fit: point configuration is collinear (rank deficient)");

  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  const Eigen::MatrixXd sol = qr.solve(rhs);  // 3 x 2
  // Undo the normalization: x' = p0 (x - mx)/s + p1 (y - my)/s + p2.
  std::array<double, 6> m{};
  for (int r = 0; r < 2; ++r) {
    const double p0 = sol(0, r) / spread;
    const double p1 = sol(1, r) / spread;
    m[static_cast<std::size_t>(3 * r)] = p0;
    m[static_cast<std::size_t>(3 * r + 1)] = p1;
    m[static_cast<std::size_t>(3 * r + 2)] = sol(2, r) - p0 * mx - p1 * my;
  }
  return AffineTransform(m);
}

double transfer_error(const AffineTransform& t, const PointPair& pair) {
  const Point2 q = t.apply(pair.moving);
  return std::hypot(q.x - pair.fixed.x, q.y - pair.fixed.y);
}

double sum_squared_transfer_error(const AffineTransform& t, std::span<const PointPair> pairs) {
  double s = 0.0;
  for (const auto& p : pairs) {
    const double e = transfer_error(t, p);
    s += e * e;
  }
  return s;
}

double grid_transfer_error(const AffineTransform& estimate, const AffineTransform& truth,
                           const Rect& rect, int n) {
  const AffineTransform back = truth.inverse();
  double sum = 0.0;
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      const Point2 p{rect.x + (rect.w - 1) * (n == 1 ? 0.5 : i / double(n - 1)),
                     rect.y + (rect.h - 1) * (n == 1 ? 0.5 : j / double(n - 1))};
      const Point2 q = estimate.apply(back.apply(p));
      sum += std::hypot(q.x - p.x, q.y - p.y);
    }
  return sum / (n * n);
}

}  // namespace wsireg
