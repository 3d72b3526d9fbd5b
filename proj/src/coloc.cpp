#include "wsireg/coloc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>

#include <nlohmann/json.hpp>

#include "wsireg/parallel.hpp"

namespace wsireg {

void CoMoments::merge(const CoMoments& o) {
  if (o.n == 0) return;
  if (n == 0) {
    *this = o;
    return;
  }
  const double na = static_cast<double>(n);
  const double nb = static_cast<double>(o.n);
  const double nt = na + nb;
  const double da = o.mean_a - mean_a;
  const double db = o.mean_b - mean_b;
  const double w = na * nb / nt;
  mean_a += da * nb / nt;
  mean_b += db * nb / nt;
  m2_a += o.m2_a + da * da * w;
  m2_b += o.m2_b + db * db * w;
  c_ab += o.c_ab + da * db * w;
  n += o.n;
}

std::optional<double> CoMoments::correlation() const {
  if (n < 2 || !(m2_a > 0.0) || !(m2_b > 0.0)) return std::nullopt;
  return std::clamp(c_ab / std::sqrt(m2_a * m2_b), -1.0, 1.0);
}

namespace {

void check_pair(const Plane& a, const Plane& b) {
  if (a.width() != b.width() || a.height() != b.height())
    throw Error(ErrorKind::InvalidArgument,
                "dimension mismatch: " + std::to_string(a.width()) + "x" +
                    std::to_string(a.height()) + " vs " + std::to_string(b.width()) + "x" +
                    std::to_string(b.height()));
  if (a.channels() != 1 || b.channels() != 1)
    throw Error(ErrorKind::InvalidArgument, "colocalization needs single-channel planes");
}

void check_pair(const TiledPyramid& a, const TiledPyramid& b) {
  if (a.width() != b.width() || a.height() != b.height())
    throw Error(ErrorKind::InvalidArgument,
                "dimension mismatch: " + a.info().slide_id + " is " + std::to_string(a.width()) +
                    "x" + std::to_string(a.height()) + ", " + b.info().slide_id + " is " +
                    std::to_string(b.width()) + "x" + std::to_string(b.height()));
  if (a.channels() != 1 || b.channels() != 1)
    throw Error(ErrorKind::InvalidArgument, "colocalization needs single-channel pyramids");
}

// Visits a plane pair as one block.
struct DenseBlocks {
  const Plane& a;
  const Plane& b;
  std::int64_t count() const { return 1; }
  template <typename Fn>
  void visit(std::int64_t, Fn&& fn) const {
    fn(a.samples(), b.samples());
  }
};

// Visits a pyramid pair tile by tile (level 0, tiling of the first pyramid).
struct PyramidBlocks {
  const TiledPyramid& a;
  const TiledPyramid& b;
  std::int64_t count() const { return a.grid(0).tile_count(); }
  template <typename Fn>
  void visit(std::int64_t i, Fn&& fn) const {
    const auto& g = a.grid(0);
    const Rect r = g.tile_rect(i % g.cols(), i / g.cols());
    const Plane pa = a.read_region(0, r);
    const Plane pb = b.read_region(0, r);
    fn(pa.samples(), pb.samples());
  }
};

// Per-block partial results reduced in block order, so floating-point
// results do not depend on the worker count.
template <typename Acc, typename Blocks, typename Fn>
std::vector<Acc> map_blocks(const Blocks& blocks, int workers, Fn&& fn) {
  std::vector<Acc> parts(static_cast<std::size_t>(blocks.count()));
  parallel_for(blocks.count(), workers, [&](std::int64_t i) {
    blocks.visit(i, [&](std::span<const float> a, std::span<const float> b) {
      fn(a, b, parts[static_cast<std::size_t>(i)]);
    });
  });
  return parts;
}

inline bool included(double a, double b, Inclusion rule, double t_a, double t_b) {
  return rule == Inclusion::AtLeastOnePositive ? (a > 0.0 || b > 0.0) : (a > t_a && b > t_b);
}

template <typename Blocks>
double pcc_impl(const Blocks& blocks, Inclusion rule, double t_a, double t_b, int workers) {
  const auto parts = map_blocks<CoMoments>(
      blocks, workers, [&](std::span<const float> a, std::span<const float> b, CoMoments& m) {
        for (std::size_t i = 0; i < a.size(); ++i)
          if (included(a[i], b[i], rule, t_a, t_b)) m.add(a[i], b[i]);
      });
  CoMoments total;
  for (const auto& p : parts) total.merge(p);
  if (total.n < 2)
    throw Error(ErrorKind::Degenerate, "PCC needs at least 2 included pixel pairs (got " +
                                           std::to_string(total.n) + ")");
  const auto r = total.correlation();
  if (!r) throw Error(ErrorKind::Degenerate, "PCC undefined: zero variance over included pairs");
  return *r;
}

// ---------------------------------------------------------------------------
// Costes

constexpr std::size_t kDistinctNeeded = 10;

struct Pass1 {
  CoMoments m;
  double a_min = std::numeric_limits<double>::infinity();
  double a_max = -std::numeric_limits<double>::infinity();
  std::vector<float> distinct_a, distinct_b;  // sorted, capped

  static void note(std::vector<float>& d, float v) {
    if (d.size() >= kDistinctNeeded) return;
    const auto it = std::lower_bound(d.begin(), d.end(), v);
    if (it == d.end() || *it != v) d.insert(it, v);
  }
  void merge(const Pass1& o) {
    m.merge(o.m);
    a_min = std::min(a_min, o.a_min);
    a_max = std::max(a_max, o.a_max);
    for (float v : o.distinct_a) note(distinct_a, v);
    for (float v : o.distinct_b) note(distinct_b, v);
  }
};

// Shifted sums with exact extrema; the extrema decide zero variance exactly.
struct Sums {
  std::uint64_t n = 0;
  long double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  double min_a = std::numeric_limits<double>::infinity(), max_a = -min_a;
  double min_b = min_a, max_b = -min_a;

  void add(long double da, long double db, double a, double b) {
    ++n;
    sa += da;
    sb += db;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
    min_a = std::min(min_a, a);
    max_a = std::max(max_a, a);
    min_b = std::min(min_b, b);
    max_b = std::max(max_b, b);
  }
  void merge(const Sums& o) {
    n += o.n;
    sa += o.sa;
    sb += o.sb;
    saa += o.saa;
    sbb += o.sbb;
    sab += o.sab;
    min_a = std::min(min_a, o.min_a);
    max_a = std::max(max_a, o.max_a);
    min_b = std::min(min_b, o.min_b);
    max_b = std::max(max_b, o.max_b);
  }
  std::optional<double> correlation() const {
    if (n < 2 || min_a == max_a || min_b == max_b) return std::nullopt;
    const long double nn = static_cast<long double>(n);
    const long double cov = nn * sab - sa * sb;
    const long double va = nn * saa - sa * sa;
    const long double vb = nn * sbb - sb * sb;
    if (!(va > 0) || !(vb > 0)) return std::nullopt;
    return std::clamp(static_cast<double>(cov / std::sqrt(va * vb)), -1.0, 1.0);
  }
};

template <typename Blocks>
CostesThresholds costes_impl(const Blocks& blocks, int workers) {
  const auto p1parts = map_blocks<Pass1>(
      blocks, workers, [](std::span<const float> a, std::span<const float> b, Pass1& p) {
        for (std::size_t i = 0; i < a.size(); ++i) {
          if (!(a[i] > 0.0f || b[i] > 0.0f)) continue;
          p.m.add(a[i], b[i]);
          p.a_min = std::min(p.a_min, static_cast<double>(a[i]));
          p.a_max = std::max(p.a_max, static_cast<double>(a[i]));
          Pass1::note(p.distinct_a, a[i]);
          Pass1::note(p.distinct_b, b[i]);
        }
      });
  Pass1 s;
  for (const auto& p : p1parts) s.merge(p);
  if (s.distinct_a.size() < kDistinctNeeded || s.distinct_b.size() < kDistinctNeeded)
    throw Error(ErrorKind::Degenerate,
                "Costes thresholds need at least 10 distinct values per channel");
  if (!(s.m.m2_a > 0.0))
    throw Error(ErrorKind::Degenerate, "Costes regression degenerate: zero variance in a");

  CostesThresholds out;
  out.slope = s.m.c_ab / s.m.m2_a;
  out.intercept = s.m.mean_b - out.slope * s.m.mean_a;
  out.a_min = s.a_min;
  out.a_max = s.a_max;
  const double step = (s.a_max - s.a_min) / kCostesSteps;
  std::array<double, kCostesSteps + 1> ta{}, tb{};
  for (int k = 0; k <= kCostesSteps; ++k) {
    ta[static_cast<std::size_t>(k)] = s.a_min + k * step;
    tb[static_cast<std::size_t>(k)] = out.slope * ta[static_cast<std::size_t>(k)] + out.intercept;
  }
  const long double mean_a = s.m.mean_a;
  const long double mean_b = s.m.mean_b;
  // First candidate index in [1, 256] whose threshold exceeds v, or 257.
  auto entry = [](const std::array<double, kCostesSteps + 1>& t, double v) {
    return static_cast<int>(std::upper_bound(t.begin() + 1, t.end(), v) - t.begin());
  };

  // per_k[k] holds the below-threshold statistics of candidate k.
  std::vector<Sums> per_k(kCostesSteps + 2);
  if (out.slope >= 0.0) {
    // Thresholds rise with k, so each pair belongs to every candidate from
    // its entry index upward: bucket by entry, then prefix-sum.
    const auto parts = map_blocks<std::vector<Sums>>(
        blocks, workers,
        [&](std::span<const float> a, std::span<const float> b, std::vector<Sums>& buckets) {
          buckets.resize(kCostesSteps + 2);
          for (std::size_t i = 0; i < a.size(); ++i) {
            if (!(a[i] > 0.0f || b[i] > 0.0f)) continue;
            const int k = std::max(entry(ta, a[i]), entry(tb, b[i]));
            if (k > kCostesSteps) continue;
            buckets[static_cast<std::size_t>(k)].add(a[i] - mean_a, b[i] - mean_b, a[i], b[i]);
          }
        });
    for (const auto& part : parts)
      for (std::size_t k = 0; k < part.size(); ++k) per_k[k].merge(part[k]);
    for (int k = 2; k <= kCostesSteps; ++k)
      per_k[static_cast<std::size_t>(k)].merge(per_k[static_cast<std::size_t>(k - 1)]);
  } else {
    const auto parts = map_blocks<std::vector<Sums>>(
        blocks, workers,
        [&](std::span<const float> a, std::span<const float> b, std::vector<Sums>& acc) {
          acc.resize(kCostesSteps + 2);
          for (std::size_t i = 0; i < a.size(); ++i) {
            if (!(a[i] > 0.0f || b[i] > 0.0f)) continue;
            const long double da = a[i] - mean_a, db = b[i] - mean_b;
            for (int k = entry(ta, a[i]); k <= kCostesSteps; ++k)
              if (b[i] < tb[static_cast<std::size_t>(k)])
                acc[static_cast<std::size_t>(k)].add(da, db, a[i], b[i]);
          }
        });
    for (const auto& part : parts)
      for (std::size_t k = 0; k < part.size(); ++k) per_k[k].merge(part[k]);
  }

  out.index = 1;
  out.at_floor = true;
  for (int k = kCostesSteps; k >= 1; --k) {
    const auto r = per_k[static_cast<std::size_t>(k)].correlation();
    if (r && *r <= 0.0) {
      out.index = k;
      out.at_floor = false;
      break;
    }
  }
  out.t_a = ta[static_cast<std::size_t>(out.index)];
  out.t_b = tb[static_cast<std::size_t>(out.index)];
  out.below_threshold_pcc = per_k[static_cast<std::size_t>(out.index)].correlation();
  return out;
}

// ---------------------------------------------------------------------------
// Report

struct ReportPart {
  CoMoments total, coloc;
  QuadrantCounts q;
  double a_white = 0, a_green = 0, a_red = 0;
  double b_white = 0, b_green = 0, b_red = 0;

  void merge(const ReportPart& o) {
    total.merge(o.total);
    coloc.merge(o.coloc);
    q.white += o.q.white;
    q.red += o.q.red;
    q.green += o.q.green;
    q.black += o.q.black;
    a_white += o.a_white;
    a_green += o.a_green;
    a_red += o.a_red;
    b_white += o.b_white;
    b_green += o.b_green;
    b_red += o.b_red;
  }
};

std::optional<double> percent(double num, double den) {
  if (!(den > 0.0)) return std::nullopt;
  return 100.0 * num / den;
}

template <typename Blocks>
ColocReport report_impl(const Blocks& blocks, const CostesThresholds& t, int workers) {
  const double ta = t.t_a, tb = t.t_b;
  const auto parts = map_blocks<ReportPart>(
      blocks, workers, [&](std::span<const float> a, std::span<const float> b, ReportPart& p) {
        for (std::size_t i = 0; i < a.size(); ++i) {
          const double av = a[i], bv = b[i];
          if (!(av > 0.0 || bv > 0.0)) continue;
          p.total.add(av, bv);
          const bool ha = av > ta, hb = bv > tb;
          if (ha && hb) {
            ++p.q.white;
            p.coloc.add(av, bv);
            p.a_white += av;
            p.b_white += bv;
          } else if (ha) {
            ++p.q.red;
            p.a_red += av;
            p.b_red += bv;
          } else if (hb) {
            ++p.q.green;
            p.a_green += av;
            p.b_green += bv;
          } else {
            ++p.q.black;
          }
        }
      });
  ReportPart s;
  for (const auto& p : parts) s.merge(p);
  ColocReport r;
  r.thresholds = t;
  r.quadrants = s.q;
  r.included = s.total.n;
  r.pcc_total = s.total.correlation();
  r.pcc_coloc = s.coloc.correlation();
  const double w = static_cast<double>(s.q.white);
  const double red = static_cast<double>(s.q.red);
  const double green = static_cast<double>(s.q.green);
  r.pct_a_vol = percent(w, w + green);
  r.pct_b_vol = percent(w, w + red);
  r.pct_a_gt = percent(s.a_white, s.a_white + s.a_green);
  r.pct_b_gt = percent(s.b_white, s.b_white + s.b_red);
  r.pct_a_vol_alt = percent(w, w + red);
  r.pct_b_vol_alt = percent(w, w + green);
  r.pct_a_gt_alt = percent(s.a_white, s.a_white + s.a_red);
  r.pct_b_gt_alt = percent(s.b_white, s.b_white + s.b_green);
  return r;
}

nlohmann::json opt(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

double pcc(const Plane& a, const Plane& b, Inclusion rule, double t_a, double t_b) {
  check_pair(a, b);
  return pcc_impl(DenseBlocks{a, b}, rule, t_a, t_b, 1);
}

double pcc(const TiledPyramid& a, const TiledPyramid& b, Inclusion rule, double t_a, double t_b,
           int workers) {
  check_pair(a, b);
  return pcc_impl(PyramidBlocks{a, b}, rule, t_a, t_b, workers);
}

CostesThresholds CostesThresholds::manual(double t_a, double t_b) {
  CostesThresholds t;
  t.t_a = t_a;
  t.t_b = t_b;
  t.user_set = true;
  return t;
}

CostesThresholds costes_thresholds(const Plane& a, const Plane& b) {
  check_pair(a, b);
  return costes_impl(DenseBlocks{a, b}, 1);
}

CostesThresholds costes_thresholds(const TiledPyramid& a, const TiledPyramid& b, int workers) {
  check_pair(a, b);
  return costes_impl(PyramidBlocks{a, b}, workers);
}

ColocReport coloc_report(const Plane& a, const Plane& b, const CostesThresholds& t) {
  check_pair(a, b);
  return report_impl(DenseBlocks{a, b}, t, 1);
}

ColocReport coloc_report(const TiledPyramid& a, const TiledPyramid& b, const CostesThresholds& t,
                         int workers) {
  check_pair(a, b);
  return report_impl(PyramidBlocks{a, b}, t, workers);
}

std::string format_coloc_report(const ColocReport& r, const std::string& label_a,
                                const std::string& label_b) {
  using nlohmann::json;
  const auto& t = r.thresholds;
  json j;
  j["format"] = "wsireg-coloc-report";
  j["channels"] = {{"a", label_a}, {"b", label_b}};
  j["table"] = {{"PCC total", opt(r.pcc_total)}, {"PCC coloc", opt(r.pcc_coloc)},
                {"%A Vol", opt(r.pct_a_vol)},     {"%B Vol", opt(r.pct_b_vol)},
                {"%A > th", opt(r.pct_a_gt)},     {"%B > th", opt(r.pct_b_gt)}};
  j["alternate_pairing"] = {{"%A Vol", opt(r.pct_a_vol_alt)},
                            {"%B Vol", opt(r.pct_b_vol_alt)},
                            {"%A > th", opt(r.pct_a_gt_alt)},
                            {"%B > th", opt(r.pct_b_gt_alt)}};
  j["quadrants"] = {{"white", r.quadrants.white},
                    {"red", r.quadrants.red},
                    {"green", r.quadrants.green},
                    {"black", r.quadrants.black},
                    {"included", r.included}};
  j["thresholds"] = {{"t_a", t.t_a},
                     {"t_b", t.t_b},
                     {"slope", t.slope},
                     {"intercept", t.intercept},
                     {"index", t.index},
                     {"at_floor", t.at_floor},
                     {"user_set", t.user_set},
                     {"below_threshold_pcc", opt(t.below_threshold_pcc)}};
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// RCM

RcmClass rcm_class(double a, double b, double t_a, double t_b) {
  const bool ha = a > t_a, hb = b > t_b;
  if (ha && hb) return RcmClass::White;
  if (ha) return RcmClass::Red;
  if (hb) return RcmClass::Green;
  return RcmClass::Black;
}

std::array<std::uint8_t, 3> rcm_color(RcmClass c) {
  switch (c) {
    case RcmClass::White: return {255, 255, 255};
    case RcmClass::Red: return {255, 0, 0};
    case RcmClass::Green: return {0, 255, 0};
    case RcmClass::Black: break;
  }
  return {0, 0, 0};
}

ConfidenceMap classify_rcm(const Plane& pooled_a, const Plane& pooled_b, std::int64_t factor,
                           double t_a, double t_b) {
  check_pair(pooled_a, pooled_b);
  ConfidenceMap m;
  m.factor = factor;
  m.t_a = t_a;
  m.t_b = t_b;
  m.rgb = RgbImage(pooled_a.width(), pooled_a.height(), 3);
  m.classes = Image<std::uint8_t>(pooled_a.width(), pooled_a.height());
  for (std::int64_t y = 0; y < pooled_a.height(); ++y)
    for (std::int64_t x = 0; x < pooled_a.width(); ++x) {
      const RcmClass c = rcm_class(pooled_a(x, y), pooled_b(x, y), t_a, t_b);
      m.classes(x, y) = static_cast<std::uint8_t>(c);
      ++m.counts[static_cast<std::size_t>(c)];
      const auto rgb = rcm_color(c);
      for (int k = 0; k < 3; ++k) m.rgb(x, y, k) = rgb[static_cast<std::size_t>(k)];
    }
  return m;
}

ConfidenceMap build_rcm(const Plane& a, const Plane& b, std::int64_t factor,
                        const CostesThresholds& t) {
  check_pair(a, b);
  return classify_rcm(subsample(a, factor), subsample(b, factor), factor, t.t_a, t.t_b);
}

ConfidenceMap build_rcm(const TiledPyramid& a, const TiledPyramid& b, std::int64_t factor,
                        const CostesThresholds& t, int workers) {
  check_pair(a, b);
  return classify_rcm(subsample(a, factor, workers), subsample(b, factor, workers), factor, t.t_a,
                      t.t_b);
}

std::string format_rcm_sidecar(const ConfidenceMap& m) {
  nlohmann::json j = {{"format", "wsireg-rcm"},
                      {"factor", m.factor},
                      {"t_a", m.t_a},
                      {"t_b", m.t_b},
                      {"width", m.rgb.width()},
                      {"height", m.rgb.height()},
                      {"counts",
                       {{"white", m.counts[0]},
                        {"red", m.counts[1]},
                        {"green", m.counts[2]},
                        {"black", m.counts[3]}}}};
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// CQM

std::uint8_t cqm_code(double a, double b, double c, const std::array<double, 3>& t) {
  return static_cast<std::uint8_t>((a > t[0] ? 1 : 0) | (b > t[1] ? 2 : 0) | (c > t[2] ? 4 : 0));
}

std::array<std::uint8_t, 3> cqm_color(std::uint8_t code) {
  return {static_cast<std::uint8_t>(code & 1 ? 255 : 0),
          static_cast<std::uint8_t>(code & 2 ? 255 : 0),
          static_cast<std::uint8_t>(code & 4 ? 255 : 0)};
}

namespace {

void cqm_fill(const Plane& a, const Plane& b, const Plane& c, const std::array<double, 3>& t,
              RgbImage& rgb, Image<std::uint8_t>* codes, std::array<std::uint64_t, 8>& counts) {
  for (std::int64_t y = 0; y < a.height(); ++y)
    for (std::int64_t x = 0; x < a.width(); ++x) {
      const std::uint8_t code = cqm_code(a(x, y), b(x, y), c(x, y), t);
      ++counts[code];
      if (codes) (*codes)(x, y) = code;
      const auto col = cqm_color(code);
      for (int k = 0; k < 3; ++k) rgb(x, y, k) = col[static_cast<std::size_t>(k)];
    }
}

}  // namespace

CombinationMap build_cqm(const std::array<const Plane*, 3>& ch,
                         const std::array<double, 3>& thresholds) {
  for (const auto* p : ch)
    if (!p) throw Error(ErrorKind::InvalidArgument, "CQM needs three channels");
  check_pair(*ch[0], *ch[1]);
  check_pair(*ch[0], *ch[2]);
  CombinationMap m;
  m.thresholds = thresholds;
  m.rgb = RgbImage(ch[0]->width(), ch[0]->height(), 3);
  m.codes = Image<std::uint8_t>(ch[0]->width(), ch[0]->height());
  cqm_fill(*ch[0], *ch[1], *ch[2], thresholds, m.rgb, &m.codes, m.counts);
  return m;
}

CqmPyramidResult build_cqm(const std::array<const TiledPyramid*, 3>& ch,
                           const std::array<double, 3>& thresholds,
                           const std::filesystem::path& out_dir, const WriteOptions& options) {
  for (const auto* p : ch)
    if (!p) throw Error(ErrorKind::InvalidArgument, "CQM needs three channels");
  check_pair(*ch[0], *ch[1]);
  check_pair(*ch[0], *ch[2]);
  PyramidWriter writer(out_dir, ch[0]->width(), ch[0]->height(), 3, SampleType::UInt8, options);
  const auto& g = writer.level0();
  CqmPyramidResult res;
  res.thresholds = thresholds;
  std::mutex m;
  parallel_for(g.tile_count(), options.workers, [&](std::int64_t i) {
    const std::int64_t col = i % g.cols(), row = i / g.cols();
    const Rect r = g.tile_rect(col, row);
    const Plane a = ch[0]->read_region(0, r);
    const Plane b = ch[1]->read_region(0, r);
    const Plane c = ch[2]->read_region(0, r);
    RgbImage rgb(r.w, r.h, 3);
    std::array<std::uint64_t, 8> counts{};
    cqm_fill(a, b, c, thresholds, rgb, nullptr, counts);
    writer.write_tile(col, row, rgb);
    std::lock_guard lock(m);
    for (std::size_t k = 0; k < 8; ++k) res.counts[k] += counts[k];
  });
  res.rgb = writer.finish();
  return res;
}

std::string format_cqm_sidecar(const std::array<std::uint64_t, 8>& counts,
                               const std::array<double, 3>& thresholds,
                               const std::array<std::string, 3>& labels) {
  nlohmann::json combos = nlohmann::json::array();
  std::uint64_t total = 0;
  for (std::uint8_t code = 0; code < 8; ++code) {
    std::vector<std::string> above;
    for (int k = 0; k < 3; ++k)
      if (code & (1 << k)) above.push_back(labels[static_cast<std::size_t>(k)]);
    const auto col = cqm_color(code);
    combos.push_back({{"code", code},
                      {"above", above},
                      {"rgb", {col[0], col[1], col[2]}},
                      {"count", counts[code]}});
    total += counts[code];
  }
  nlohmann::json j = {{"format", "wsireg-cqm"},
                      {"channels", labels},
                      {"thresholds", thresholds},
                      {"combinations", combos},
                      {"total", total}};
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// 2D histogram

int histogram_bin(double v, int bins) {
  if (!(v > 0.0)) return 0;
  if (v >= 1.0) return bins - 1;
  return std::min(static_cast<int>(std::floor(v * bins)), bins - 1);
}

namespace {

template <typename Blocks>
Histogram2D histogram_impl(const Blocks& blocks, int bins, int workers) {
  if (bins < 2) throw Error(ErrorKind::InvalidArgument, "histogram needs at least 2 bins");
  Histogram2D h;
  h.bins = bins;
  h.counts.assign(static_cast<std::size_t>(bins) * static_cast<std::size_t>(bins), 0);
  std::mutex m;
  parallel_for(blocks.count(), workers, [&](std::int64_t i) {
    blocks.visit(i, [&](std::span<const float> a, std::span<const float> b) {
      std::vector<std::uint64_t> local(h.counts.size(), 0);
      std::uint64_t n = 0;
      for (std::size_t k = 0; k < a.size(); ++k) {
        if (!(a[k] > 0.0f || b[k] > 0.0f)) continue;
        ++local[static_cast<std::size_t>(histogram_bin(a[k], bins)) * static_cast<std::size_t>(bins) +
                static_cast<std::size_t>(histogram_bin(b[k], bins))];
        ++n;
      }
      std::lock_guard lock(m);
      for (std::size_t k = 0; k < local.size(); ++k) h.counts[k] += local[k];
      h.total += n;
    });
  });
  return h;
}

}  // namespace

Histogram2D histogram2d(const Plane& a, const Plane& b, int bins) {
  check_pair(a, b);
  return histogram_impl(DenseBlocks{a, b}, bins, 1);
}

Histogram2D histogram2d(const TiledPyramid& a, const TiledPyramid& b, int bins, int workers) {
  check_pair(a, b);
  return histogram_impl(PyramidBlocks{a, b}, bins, workers);
}

Image<std::uint8_t> Histogram2D::render() const {
  Image<std::uint8_t> img(bins, bins);
  std::uint64_t peak = 0;
  for (auto c : counts) peak = std::max(peak, c);
  if (peak == 0) return img;
  const double scale = 255.0 / std::log1p(static_cast<double>(peak));
  for (int ia = 0; ia < bins; ++ia)
    for (int ib = 0; ib < bins; ++ib) {
      const auto c = at(ia, ib);
      img(ia, bins - 1 - ib) =
          static_cast<std::uint8_t>(std::lround(std::log1p(static_cast<double>(c)) * scale));
    }
  return img;
}

}  // namespace wsireg
