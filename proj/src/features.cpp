#include "wsireg/features.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace wsireg {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr int kOrientationBins = 36;
constexpr int kDescWidth = 4;
constexpr int kDescBins = 8;

inline std::int64_t reflect(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

std::vector<float> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * i * i / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = static_cast<float>(v);
    sum += v;
  }
  for (auto& v : k) v = static_cast<float>(v / sum);
  return k;
}

Plane gaussian_blur(const Plane& src, double sigma) {
  const std::int64_t w = src.width();
  const std::int64_t h = src.height();
  const auto k = gaussian_kernel(sigma);
  const auto r = static_cast<std::int64_t>(k.size() / 2);
  Plane tmp(w, h);
  std::vector<float> line(static_cast<std::size_t>(std::max(w, h) + 2 * r));
  for (std::int64_t y = 0; y < h; ++y) {
    const auto in = src.row(y);
    for (std::int64_t i = -r; i < w + r; ++i)
      line[static_cast<std::size_t>(i + r)] = in[static_cast<std::size_t>(reflect(i, w))];
    auto out = tmp.row(y);
    for (std::int64_t x = 0; x < w; ++x) {
      float acc = 0.0f;
      const float* p = line.data() + x;
      for (std::size_t t = 0; t < k.size(); ++t) acc += k[t] * p[t];
      out[static_cast<std::size_t>(x)] = acc;
    }
  }
  Plane dst(w, h);
  std::vector<const float*> rows(static_cast<std::size_t>(2 * r + 1));
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t t = -r; t <= r; ++t)
      rows[static_cast<std::size_t>(t + r)] = tmp.row(reflect(y + t, h)).data();
    auto out = dst.row(y);
    std::fill(out.begin(), out.end(), 0.0f);
    for (std::size_t t = 0; t < k.size(); ++t) {
      const float kt = k[t];
      const float* in = rows[t];
      for (std::int64_t x = 0; x < w; ++x) out[static_cast<std::size_t>(x)] += kt * in[x];
    }
  }
  return dst;
}

Plane decimate(const Plane& src) {
  Plane out(src.width() / 2, src.height() / 2);
  for (std::int64_t y = 0; y < out.height(); ++y)
    for (std::int64_t x = 0; x < out.width(); ++x) out(x, y) = src(2 * x, 2 * y);
  return out;
}

Plane subtract(const Plane& a, const Plane& b) {
  Plane out(a.width(), a.height());
  for (std::size_t i = 0; i < out.samples().size(); ++i)
    out.samples()[i] = a.samples()[i] - b.samples()[i];
  return out;
}

struct Octave {
  std::vector<Plane> gauss;
  std::vector<Plane> dog;
};

struct Candidate {
  int octave;
  std::int64_t x, y;   // integer position in octave pixels
  int layer;           // integer layer
  double ox, oy, os;   // sub-pixel offsets
  double response;
};

bool is_extremum(const std::vector<Plane>& dog, int layer, std::int64_t x, std::int64_t y) {
  const float v = dog[static_cast<std::size_t>(layer)](x, y);
  const bool want_max = v > 0;
  for (int l = layer - 1; l <= layer + 1; ++l) {
    const Plane& d = dog[static_cast<std::size_t>(l)];
    for (std::int64_t dy = -1; dy <= 1; ++dy)
      for (std::int64_t dx = -1; dx <= 1; ++dx) {
        if (l == layer && dx == 0 && dy == 0) continue;
        const float n = d(x + dx, y + dy);
        if (want_max ? !(v > n) : !(v < n)) return false;
      }
  }
  return true;
}

// Quadratic refinement of a scale-space extremum; false when rejected.
bool refine(const std::vector<Plane>& dog, int scales, int border, const DetectorParams& p,
            Candidate& c) {
  const std::int64_t w = dog[0].width();
  const std::int64_t h = dog[0].height();
  Eigen::Vector3d offset;
  Eigen::Vector3d grad;
  for (int iter = 0;; ++iter) {
    if (iter >= 5) return false;
    const Plane& prev = dog[static_cast<std::size_t>(c.layer - 1)];
    const Plane& cur = dog[static_cast<std::size_t>(c.layer)];
    const Plane& next = dog[static_cast<std::size_t>(c.layer + 1)];
    const std::int64_t x = c.x;
    const std::int64_t y = c.y;
    const double v = cur(x, y);
    grad << 0.5 * (cur(x + 1, y) - cur(x - 1, y)), 0.5 * (cur(x, y + 1) - cur(x, y - 1)),
        0.5 * (next(x, y) - prev(x, y));
    const double dxx = cur(x + 1, y) + cur(x - 1, y) - 2 * v;
    const double dyy = cur(x, y + 1) + cur(x, y - 1) - 2 * v;
    const double dss = next(x, y) + prev(x, y) - 2 * v;
    const double dxy = 0.25 * (cur(x + 1, y + 1) - cur(x - 1, y + 1) - cur(x + 1, y - 1) +
                               cur(x - 1, y - 1));
    const double dxs = 0.25 * (next(x + 1, y) - next(x - 1, y) - prev(x + 1, y) + prev(x - 1, y));
    const double dys = 0.25 * (next(x, y + 1) - next(x, y - 1) - prev(x, y + 1) + prev(x, y - 1));
    Eigen::Matrix3d hess;
    hess << dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss;
    const Eigen::FullPivLU<Eigen::Matrix3d> lu(hess);
    if (!lu.isInvertible()) return false;
    offset = -lu.solve(grad);
    if (!offset.allFinite()) return false;
    if (offset.cwiseAbs().maxCoeff() < 0.5) {
      const double contrast = v + 0.5 * grad.dot(offset);
      if (std::abs(contrast) < p.contrast_threshold) return false;
      const double tr = dxx + dyy;
      const double det = dxx * dyy - dxy * dxy;
      if (det <= 0 || tr * tr * p.edge_ratio >= (p.edge_ratio + 1) * (p.edge_ratio + 1) * det)
        return false;
      c.ox = offset(0);
      c.oy = offset(1);
      c.os = offset(2);
      c.response = std::abs(contrast);
      return true;
    }
    if (offset.cwiseAbs().maxCoeff() > 1e6) return false;
    c.x += static_cast<std::int64_t>(std::lround(offset(0)));
    c.y += static_cast<std::int64_t>(std::lround(offset(1)));
    c.layer += static_cast<int>(std::lround(offset(2)));
    if (c.layer < 1 || c.layer > scales || c.x < border || c.y < border || c.x >= w - border ||
        c.y >= h - border)
      return false;
  }
}

inline bool gradient(const Plane& g, std::int64_t x, std::int64_t y, double& mag, double& ang) {
  if (x < 1 || y < 1 || x >= g.width() - 1 || y >= g.height() - 1) return false;
  const double dx = g(x + 1, y) - g(x - 1, y);
  const double dy = g(x, y + 1) - g(x, y - 1);
  mag = std::sqrt(dx * dx + dy * dy);
  ang = std::atan2(dy, dx);
  if (ang < 0) ang += kTwoPi;
  return true;
}

std::vector<double> dominant_orientations(const Plane& g, std::int64_t x, std::int64_t y,
                                          double sigma) {
  const double wsig = 1.5 * sigma;
  const auto radius = static_cast<std::int64_t>(std::lround(3.0 * wsig));
  std::array<double, kOrientationBins> raw{};
  for (std::int64_t j = -radius; j <= radius; ++j)
    for (std::int64_t i = -radius; i <= radius; ++i) {
      double mag, ang;
      if (!gradient(g, x + i, y + j, mag, ang)) continue;
      const double wgt = std::exp(-(double(i * i + j * j)) / (2 * wsig * wsig));
      int bin = static_cast<int>(std::lround(kOrientationBins * ang / kTwoPi));
      bin = (bin % kOrientationBins + kOrientationBins) % kOrientationBins;
      raw[static_cast<std::size_t>(bin)] += wgt * mag;
    }
  std::array<double, kOrientationBins> hist{};
  auto at = [&](int i) {
    return raw[static_cast<std::size_t>((i % kOrientationBins + kOrientationBins) % kOrientationBins)];
  };
  for (int i = 0; i < kOrientationBins; ++i)
    hist[static_cast<std::size_t>(i)] =
        (at(i - 2) + at(i + 2)) / 16.0 + (at(i - 1) + at(i + 1)) * 4.0 / 16.0 + at(i) * 6.0 / 16.0;
  const double peak = *std::max_element(hist.begin(), hist.end());
  std::vector<double> out;
  if (!(peak > 0)) return out;
  for (int i = 0; i < kOrientationBins; ++i) {
    const double l = hist[static_cast<std::size_t>((i + kOrientationBins - 1) % kOrientationBins)];
    const double r = hist[static_cast<std::size_t>((i + 1) % kOrientationBins)];
    const double c = hist[static_cast<std::size_t>(i)];
    if (c > l && c > r && c >= 0.8 * peak) {
      const double bin = i + 0.5 * (l - r) / (l - 2 * c + r);
      double ang = kTwoPi * bin / kOrientationBins;
      ang = std::fmod(ang, kTwoPi);
      if (ang < 0) ang += kTwoPi;
      if (ang >= kTwoPi) ang = 0.0;
      out.push_back(ang);
    }
  }
  return out;
}

bool describe(const Plane& g, double fx, double fy, double sigma, double angle, Descriptor& out) {
  const auto x = static_cast<std::int64_t>(std::lround(fx));
  const auto y = static_cast<std::int64_t>(std::lround(fy));
  const double cos_t = std::cos(angle);
  const double sin_t = std::sin(angle);
  const double hist_width = 3.0 * sigma;
  auto radius = static_cast<std::int64_t>(
      std::lround(hist_width * std::numbers::sqrt2 * (kDescWidth + 1) * 0.5));
  radius = std::min<std::int64_t>(
      radius, static_cast<std::int64_t>(std::hypot(double(g.width()), double(g.height()))));
  constexpr int hd = kDescWidth + 2;
  constexpr int ho = kDescBins + 2;
  std::array<double, hd * hd * ho> hist{};
  const double bins_per_rad = kDescBins / kTwoPi;
  const double exp_scale = -1.0 / (0.5 * kDescWidth * kDescWidth);
  for (std::int64_t j = -radius; j <= radius; ++j)
    for (std::int64_t i = -radius; i <= radius; ++i) {
      const double c_rot = (i * cos_t + j * sin_t) / hist_width;
      const double r_rot = (-i * sin_t + j * cos_t) / hist_width;
      const double rbin = r_rot + kDescWidth / 2.0 - 0.5;
      const double cbin = c_rot + kDescWidth / 2.0 - 0.5;
      if (!(rbin > -1 && rbin < kDescWidth && cbin > -1 && cbin < kDescWidth)) continue;
      double mag, ang;
      if (!gradient(g, x + i, y + j, mag, ang)) continue;
      const double wgt = std::exp((c_rot * c_rot + r_rot * r_rot) * exp_scale);
      double obin = (ang - angle) * bins_per_rad;
      obin = std::fmod(obin, double(kDescBins));
      if (obin < 0) obin += kDescBins;
      const double v = mag * wgt;
      const int r0 = static_cast<int>(std::floor(rbin));
      const int c0 = static_cast<int>(std::floor(cbin));
      int o0 = static_cast<int>(std::floor(obin));
      const double dr = rbin - r0;
      const double dc = cbin - c0;
      const double dob = obin - o0;
      if (o0 >= kDescBins) o0 -= kDescBins;
      for (int a = 0; a < 2; ++a) {
        const double va = v * (a ? dr : 1 - dr);
        for (int b = 0; b < 2; ++b) {
          const double vb = va * (b ? dc : 1 - dc);
          for (int c = 0; c < 2; ++c) {
            const double vc = vb * (c ? dob : 1 - dob);
            const int idx = ((r0 + 1 + a) * hd + (c0 + 1 + b)) * ho + (o0 + c);
            hist[static_cast<std::size_t>(idx)] += vc;
          }
        }
      }
    }
  std::array<double, kDescriptorLength> d{};
  for (int r = 0; r < kDescWidth; ++r)
    for (int c = 0; c < kDescWidth; ++c) {
      const int base = ((r + 1) * hd + (c + 1)) * ho;
      hist[static_cast<std::size_t>(base)] += hist[static_cast<std::size_t>(base + kDescBins)];
      hist[static_cast<std::size_t>(base + 1)] += hist[static_cast<std::size_t>(base + kDescBins + 1)];
      for (int o = 0; o < kDescBins; ++o)
        d[static_cast<std::size_t>((r * kDescWidth + c) * kDescBins + o)] =
            hist[static_cast<std::size_t>(base + o)];
    }
  double norm = 0.0;
  for (double v : d) norm += v * v;
  norm = std::sqrt(norm);
  if (!(norm > 1e-12)) return false;
  const double clip = 0.2 * norm;
  norm = 0.0;
  for (double& v : d) {
    v = std::min(v, clip);
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (std::size_t k = 0; k < kDescriptorLength; ++k) out[k] = static_cast<float>(d[k] / norm);
  return true;
}

}  // namespace

FeatureSet DogDetector::detect(const Plane& plane) const {
  const auto& p = params_;
  if (plane.width() < 32 || plane.height() < 32)
    throw Error(ErrorKind::InvalidArgument, "feature detection needs a plane of at least 32x32");
  if (plane.channels() != 1)
    throw Error(ErrorKind::InvalidArgument, "feature detection needs a single-channel plane");
  FeatureSet result;
  const auto [lo, hi] = std::minmax_element(plane.samples().begin(), plane.samples().end());
  if (*lo == *hi) return result;

  const int s = p.scales_per_octave;
  const double k = std::pow(2.0, 1.0 / s);
  std::vector<double> incr(static_cast<std::size_t>(s + 3));
  for (int i = 1; i < s + 3; ++i) {
    const double prev = p.base_sigma * std::pow(k, i - 1);
    incr[static_cast<std::size_t>(i)] = std::sqrt(prev * k * prev * k - prev * prev);
  }

  Plane base = gaussian_blur(
      plane, std::sqrt(std::max(0.01, p.base_sigma * p.base_sigma - p.assumed_blur * p.assumed_blur)));
  std::vector<Octave> octaves;
  for (;;) {
    Octave oct;
    oct.gauss.push_back(std::move(base));
    for (int i = 1; i < s + 3; ++i)
      oct.gauss.push_back(gaussian_blur(oct.gauss.back(), incr[static_cast<std::size_t>(i)]));
    for (int i = 0; i + 1 < s + 3; ++i)
      oct.dog.push_back(subtract(oct.gauss[static_cast<std::size_t>(i + 1)],
                                 oct.gauss[static_cast<std::size_t>(i)]));
    const Plane& next_src = oct.gauss[static_cast<std::size_t>(s)];
    const bool more = std::min(next_src.width(), next_src.height()) / 2 >= 16;
    Plane next = more ? decimate(next_src) : Plane();
    octaves.push_back(std::move(oct));
    if (!more) break;
    base = std::move(next);
  }

  std::vector<Candidate> cands;
  const int border = p.border;
  const float prefilter = static_cast<float>(0.5 * p.contrast_threshold);
  for (int o = 0; o < static_cast<int>(octaves.size()); ++o) {
    const auto& dog = octaves[static_cast<std::size_t>(o)].dog;
    const std::int64_t w = dog[0].width();
    const std::int64_t h = dog[0].height();
    for (int layer = 1; layer <= s; ++layer)
      for (std::int64_t y = border; y < h - border; ++y)
        for (std::int64_t x = border; x < w - border; ++x) {
          if (std::abs(dog[static_cast<std::size_t>(layer)](x, y)) < prefilter) continue;
          if (!is_extremum(dog, layer, x, y)) continue;
          Candidate c{o, x, y, layer, 0, 0, 0, 0};
          if (refine(dog, s, border, p, c)) cands.push_back(c);
        }
  }

  struct Described {
    Keypoint kp;
    Descriptor desc;
  };
  std::vector<Described> all;
  for (const auto& c : cands) {
    const auto& oct = octaves[static_cast<std::size_t>(c.octave)];
    const double layer = c.layer + c.os;
    const double sigma_oct = p.base_sigma * std::pow(2.0, layer / s);
    const double fx = c.x + c.ox;
    const double fy = c.y + c.oy;
    const Plane& g = oct.gauss[static_cast<std::size_t>(c.layer)];
    const double octave_scale = std::ldexp(1.0, c.octave);
    for (double ang : dominant_orientations(g, c.x, c.y, sigma_oct)) {
      Described d;
      if (!describe(g, fx, fy, sigma_oct, ang, d.desc)) continue;
      d.kp = {fx * octave_scale, fy * octave_scale, sigma_oct * octave_scale, ang, c.response,
              c.octave, layer};
      all.push_back(d);
    }
  }
  std::sort(all.begin(), all.end(), [](const Described& a, const Described& b) {
    if (a.kp.response != b.kp.response) return a.kp.response > b.kp.response;
    if (a.kp.octave != b.kp.octave) return a.kp.octave < b.kp.octave;
    if (a.kp.y != b.kp.y) return a.kp.y < b.kp.y;
    if (a.kp.x != b.kp.x) return a.kp.x < b.kp.x;
    return a.kp.orientation < b.kp.orientation;
  });
  if (p.max_keypoints > 0 && all.size() > static_cast<std::size_t>(p.max_keypoints))
    all.resize(static_cast<std::size_t>(p.max_keypoints));
  result.keypoints.reserve(all.size());
  result.descriptors.reserve(all.size());
  for (auto& d : all) {
    result.keypoints.push_back(d.kp);
    result.descriptors.push_back(d.desc);
  }
  return result;
}

FeatureSet detect_and_describe(const Plane& h_plane, const DetectorParams& params) {
  return DogDetector(params).detect(h_plane);
}

// ---------------------------------------------------------------------------
// Matching

std::size_t MatchSet::inlier_count() const {
  return static_cast<std::size_t>(std::count(inlier_mask.begin(), inlier_mask.end(), 1));
}

MatchSet match_descriptors(std::span<const Descriptor> fixed, std::span<const Descriptor> moving,
                           double ratio) {
  if (fixed.empty() || moving.empty())
    throw Error(ErrorKind::InvalidArgument, "descriptor matching needs non-empty descriptor lists");
  const std::size_t nf = fixed.size();
  const std::size_t nm = moving.size();
  constexpr float kInf = std::numeric_limits<float>::infinity();
  std::vector<float> best(nf, kInf), second(nf, kInf);
  std::vector<int> best_idx(nf, -1);
  std::vector<float> col_best(nm, kInf);
  std::vector<int> col_idx(nm, -1);
  for (std::size_t i = 0; i < nf; ++i) {
    const float* a = fixed[i].data();
    for (std::size_t j = 0; j < nm; ++j) {
      const float* b = moving[j].data();
      float d2 = 0.0f;
      for (std::size_t t = 0; t < kDescriptorLength; ++t) {
        const float diff = a[t] - b[t];
        d2 += diff * diff;
      }
      if (d2 < best[i]) {
        second[i] = best[i];
        best[i] = d2;
        best_idx[i] = static_cast<int>(j);
      } else if (d2 < second[i]) {
        second[i] = d2;
      }
      if (d2 < col_best[j]) {
        col_best[j] = d2;
        col_idx[j] = static_cast<int>(i);
      }
    }
  }
  MatchSet out;
  const double r2 = ratio * ratio;
  for (std::size_t i = 0; i < nf; ++i) {
    const int j = best_idx[i];
    if (j < 0) continue;
    // With a single candidate there is no second-best to compare against.
    const bool ratio_ok = nm == 1 || static_cast<double>(best[i]) < r2 * second[i];
    if (!ratio_ok) continue;
    if (col_idx[static_cast<std::size_t>(j)] != static_cast<int>(i)) continue;
    out.pairs.push_back({static_cast<int>(i), j, std::sqrt(best[i])});
  }
  return out;
}

// ---------------------------------------------------------------------------
// RANSAC

namespace {

bool exact_affine(const Point2 (&src)[3], const Point2 (&dst)[3], AffineTransform& out) {
  Eigen::Matrix3d a;
  for (int i = 0; i < 3; ++i) a.row(i) << src[i].x, src[i].y, 1.0;
  const double area = std::abs((src[1].x - src[0].x) * (src[2].y - src[0].y) -
                               (src[2].x - src[0].x) * (src[1].y - src[0].y));
  const double dst_area = std::abs((dst[1].x - dst[0].x) * (dst[2].y - dst[0].y) -
                                   (dst[2].x - dst[0].x) * (dst[1].y - dst[0].y));
  if (area < 1.0 || dst_area < 1.0) return false;
  const Eigen::PartialPivLU<Eigen::Matrix3d> lu(a);
  const Eigen::Vector3d px = lu.solve(Eigen::Vector3d(dst[0].x, dst[1].x, dst[2].x));
  const Eigen::Vector3d py = lu.solve(Eigen::Vector3d(dst[0].y, dst[1].y, dst[2].y));
  if (!px.allFinite() || !py.allFinite()) return false;
  out = AffineTransform({px(0), px(1), px(2), py(0), py(1), py(2)});
  return true;
}

std::vector<std::uint8_t> inliers_of(const AffineTransform& t, std::span<const PointPair> pts,
                                     double tol, std::size_t& count, double& mean_resid) {
  std::vector<std::uint8_t> mask(pts.size(), 0);
  count = 0;
  double sum = 0.0;
  for (std::size_t k = 0; k < pts.size(); ++k) {
    const double e = transfer_error(t, pts[k]);
    if (e <= tol) {
      mask[k] = 1;
      ++count;
      sum += e;
    }
  }
  mean_resid = count ? sum / static_cast<double>(count) : std::numeric_limits<double>::infinity();
  return mask;
}

}  // namespace

RansacResult ransac_affine(const MatchSet& matches, std::span<const Keypoint> fixed,
                           std::span<const Keypoint> moving, const RansacParams& params) {
  const std::size_t n = matches.pairs.size();
  if (n < 3)
    throw Error(ErrorKind::FitFailure,
                "RANSAC needs >= 3 matches (got " + std::to_string(n) + ")");
  std::vector<PointPair> pts(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto& m = matches.pairs[k];
    if (m.fixed_index < 0 || m.moving_index < 0 ||
        static_cast<std::size_t>(m.fixed_index) >= fixed.size() ||
        static_cast<std::size_t>(m.moving_index) >= moving.size())
      throw Error(ErrorKind::InvalidArgument, "match index out of range");
    const auto& f = fixed[static_cast<std::size_t>(m.fixed_index)];
    const auto& mv = moving[static_cast<std::size_t>(m.moving_index)];
    pts[k] = {{mv.x, mv.y}, {f.x, f.y}};
  }

  std::mt19937_64 rng(params.seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::size_t best_count = 0;
  double best_mean = std::numeric_limits<double>::infinity();
  AffineTransform best;
  double needed = params.max_iters;
  for (int it = 0; it < params.max_iters && it < needed; ++it) {
    std::size_t idx[3];
    idx[0] = pick(rng);
    do idx[1] = pick(rng);
    while (idx[1] == idx[0]);
    do idx[2] = pick(rng);
    while (idx[2] == idx[0] || idx[2] == idx[1]);
    const Point2 src[3] = {pts[idx[0]].moving, pts[idx[1]].moving, pts[idx[2]].moving};
    const Point2 dst[3] = {pts[idx[0]].fixed, pts[idx[1]].fixed, pts[idx[2]].fixed};
    AffineTransform hyp;
    if (!exact_affine(src, dst, hyp)) continue;
    std::size_t count;
    double mean;
    inliers_of(hyp, pts, params.inlier_tol_px, count, mean);
    if (count > best_count || (count == best_count && count > 0 && mean < best_mean)) {
      best_count = count;
      best_mean = mean;
      best = hyp;
      const double w = static_cast<double>(count) / static_cast<double>(n);
      const double miss = 1.0 - w * w * w;
      if (miss <= 0.0)
        needed = 0;
      else
        needed = std::min<double>(params.max_iters,
                                  std::ceil(std::log(1.0 - params.confidence) / std::log(miss)));
    }
  }
  if (best_count < 3)
    throw Error(ErrorKind::FitFailure, "RANSAC found fewer than 3 inliers");

  AffineTransform model = best;
  std::size_t count;
  double mean;
  auto mask = inliers_of(model, pts, params.inlier_tol_px, count, mean);
  for (int round = 0; round < 10; ++round) {
    std::vector<PointPair> sel;
    for (std::size_t k = 0; k < n; ++k)
      if (mask[k]) sel.push_back(pts[k]);
    AffineTransform refit;
    try {
      refit = fit_affine_lsq(sel);
    } catch (const Error&) {
      break;
    }
    std::size_t c2;
    double m2;
    auto mask2 = inliers_of(refit, pts, params.inlier_tol_px, c2, m2);
    if (c2 < 3) break;
    model = refit;
    const bool stable = mask2 == mask;
    mask = std::move(mask2);
    count = c2;
    mean = m2;
    if (stable) break;
  }

  RansacResult r;
  r.transform = model;
  r.matches = matches;
  r.matches.inlier_mask = std::move(mask);
  r.inlier_count = count;
  r.mean_residual_px = mean;
  return r;
}

// ---------------------------------------------------------------------------

std::string format_features(const FeatureSet& f) {
  nlohmann::json kps = nlohmann::json::array();
  for (std::size_t i = 0; i < f.keypoints.size(); ++i) {
    const auto& k = f.keypoints[i];
    kps.push_back({{"x", k.x},
                   {"y", k.y},
                   {"scale", k.scale},
                   {"orientation", k.orientation},
                   {"response", k.response},
                   {"descriptor", f.descriptors[i]}});
  }
  return nlohmann::json{{"keypoints", kps}}.dump(1) + "\n";
}

std::string format_matches(const MatchSet& m) {
  nlohmann::json pairs = nlohmann::json::array();
  for (std::size_t i = 0; i < m.pairs.size(); ++i) {
    const auto& p = m.pairs[i];
    nlohmann::json e = {{"fixed", p.fixed_index}, {"moving", p.moving_index}, {"distance", p.distance}};
    if (!m.inlier_mask.empty()) e["inlier"] = m.inlier_mask[i] != 0;
    pairs.push_back(e);
  }
  return nlohmann::json{{"matches", pairs}}.dump(1) + "\n";
}

}  // namespace wsireg
