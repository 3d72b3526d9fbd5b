#include "wsireg/stain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

namespace wsireg {

using nlohmann::json;

StainVectors make_stain_vectors(const Eigen::Matrix3d& rows, std::array<std::string, 3> labels) {
  StainVectors sv;
  sv.labels = std::move(labels);
  for (int i = 0; i < 3; ++i) {
    const double n = rows.row(i).norm();
    if (!(n > 0.0) || !std::isfinite(n))
      throw Error(ErrorKind::Singular, "stain vector " + sv.labels[static_cast<std::size_t>(i)] +
                                           " has zero or non-finite norm");
    sv.od.row(i) = rows.row(i) / n;
  }
  if (std::abs(sv.od.determinant()) <= 1e-8)
    throw Error(ErrorKind::Singular, "stain matrix is singular (|det| <= 1e-8)");
  return sv;
}

StainVectors reference_hdab_vectors() {
  const Eigen::Vector3d h(0.650, 0.704, 0.286);
  const Eigen::Vector3d dab(0.268, 0.570, 0.776);
  Eigen::Matrix3d m;
  m.row(0) = h.normalized();
  m.row(1) = dab.normalized();
  m.row(2) = m.row(0).cross(m.row(1)).normalized();
  return make_stain_vectors(m);
}

std::array<double, 3> rgb_to_od(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  auto od = [](std::uint8_t v) {
    return -std::log10(static_cast<double>(std::max<int>(v, 1)) / 255.0);
  };
  return {od(r), od(g), od(b)};
}

std::array<double, 3> rgb_to_od(Rgb8 rgb) { return rgb_to_od(rgb.r, rgb.g, rgb.b); }

Deconvolver::Deconvolver(const StainVectors& sv) : sv_(sv) {
  if (std::abs(sv.od.determinant()) <= 1e-8)
    throw Error(ErrorKind::Singular, "stain matrix is singular (|det| <= 1e-8)");
  inverse_ = sv.od.inverse();
  for (int v = 0; v < 256; ++v)
    od_lut_[static_cast<std::size_t>(v)] = -std::log10(std::max(v, 1) / 255.0);
}

std::array<double, 3> Deconvolver::concentrations(std::uint8_t r, std::uint8_t g,
                                                  std::uint8_t b) const {
  const double o0 = od_lut_[r];
  const double o1 = od_lut_[g];
  const double o2 = od_lut_[b];
  std::array<double, 3> c{};
  for (int j = 0; j < 3; ++j) {
    const double v = o0 * inverse_(0, j) + o1 * inverse_(1, j) + o2 * inverse_(2, j);
    c[static_cast<std::size_t>(j)] = v > 0.0 ? v : 0.0;
  }
  return c;
}

std::array<double, 3> Deconvolver::max_concentration() const {
  const double od_max = od_lut_[0];
  std::array<double, 3> out{};
  for (int j = 0; j < 3; ++j) {
    double m = 0.0;
    for (int i = 0; i < 3; ++i) m += std::max(0.0, inverse_(i, j)) * od_max;
    out[static_cast<std::size_t>(j)] = m;
  }
  return out;
}

std::array<ChannelPlane, 3> Deconvolver::operator()(const RgbImage& rgb) const {
  if (rgb.channels() != 3)
    throw Error(ErrorKind::InvalidArgument, "deconvolution needs a 3-channel RGB raster");
  std::array<ChannelPlane, 3> out;
  for (std::size_t k = 0; k < 3; ++k) {
    out[k].values = Plane(rgb.width(), rgb.height());
    out[k].stain_label = sv_.labels[k];
    out[k].provenance = "deconvolve";
  }
  const auto src = rgb.samples();
  auto h = out[0].values.samples();
  auto d = out[1].values.samples();
  auto res = out[2].values.samples();
  for (std::size_t i = 0; i < h.size(); ++i) {
    const auto c = concentrations(src[3 * i], src[3 * i + 1], src[3 * i + 2]);
    h[i] = static_cast<float>(c[0]);
    d[i] = static_cast<float>(c[1]);
    res[i] = static_cast<float>(c[2]);
  }
  return out;
}

std::array<ChannelPlane, 3> deconvolve(const RgbImage& rgb, const StainVectors& sv) {
  return Deconvolver(sv)(rgb);
}

RgbImage recompose(const Plane& h, const Plane& dab, const Plane& residual,
                   const StainVectors& sv) {
  if (h.width() != dab.width() || h.width() != residual.width() ||
      h.height() != dab.height() || h.height() != residual.height())
    throw Error(ErrorKind::InvalidArgument, "concentration planes differ in size");
  RgbImage out(h.width(), h.height(), 3);
  auto dst = out.samples();
  for (std::size_t i = 0; i < h.samples().size(); ++i) {
    const Eigen::RowVector3d c(h.samples()[i], dab.samples()[i], residual.samples()[i]);
    const Eigen::RowVector3d od = c * sv.od;
    for (int k = 0; k < 3; ++k) {
      const double v = 255.0 * std::pow(10.0, -od(k));
      dst[3 * i + static_cast<std::size_t>(k)] =
          static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  return out;
}

namespace {

Eigen::Vector3d mean_od(std::span<const Rgb8> samples, const std::string& label) {
  if (samples.size() < 10)
    throw Error(ErrorKind::InvalidArgument, "palette needs >= 10 samples for stain " + label +
                                                " (got " + std::to_string(samples.size()) + ")");
  Eigen::Vector3d sum = Eigen::Vector3d::Zero();
  for (const auto& s : samples) {
    const auto od = rgb_to_od(s);
    sum += Eigen::Vector3d(od[0], od[1], od[2]);
  }
  const Eigen::Vector3d mean = sum / static_cast<double>(samples.size());
  if (mean.norm() < 1e-3)
    throw Error(ErrorKind::Degenerate,
                "degenerate palette samples for stain " + label + " (mean OD norm < 1e-3)");
  return mean.normalized();
}

}  // namespace

StainVectors estimate_palette(std::span<const Rgb8> h_samples, std::span<const Rgb8> dab_samples,
                              std::array<std::string, 3> labels) {
  const Eigen::Vector3d h = mean_od(h_samples, labels[0]);
  const Eigen::Vector3d dab = mean_od(dab_samples, labels[1]);
  const double angle = std::acos(std::clamp(h.dot(dab), -1.0, 1.0)) * 180.0 / std::numbers::pi;
  if (angle < 5.0)
    throw Error(ErrorKind::Degenerate, "stain vectors " + labels[0] + " and " + labels[1] +
                                           " are nearly parallel (" + std::to_string(angle) +
                                           " deg < 5 deg)");
  Eigen::Matrix3d m;
  m.row(0) = h.transpose();
  m.row(1) = dab.transpose();
  m.row(2) = h.cross(dab).normalized().transpose();
  return make_stain_vectors(m, std::move(labels));
}

namespace {

std::uint64_t nearest_rank(std::uint64_t n, double pct) {
  const double exact = pct * static_cast<double>(n) / 100.0;
  auto rank = static_cast<std::uint64_t>(std::ceil(exact - 1e-9));
  return std::clamp<std::uint64_t>(rank, 1, n);
}

void check_pct(double pct) {
  if (!(pct > 0.0 && pct <= 100.0))
    throw Error(ErrorKind::InvalidArgument, "percentile must be in (0, 100]");
}

}  // namespace

double positive_percentile(std::span<const float> values, double pct) {
  check_pct(pct);
  std::vector<float> pos;
  pos.reserve(values.size());
  for (float v : values)
    if (v > 0.0f) pos.push_back(v);
  if (pos.empty()) return 0.0;
  const auto rank = nearest_rank(pos.size(), pct);
  auto nth = pos.begin() + static_cast<std::ptrdiff_t>(rank - 1);
  std::nth_element(pos.begin(), nth, pos.end());
  return *nth;
}

Plane stretch_to(const Plane& plane, double reference) {
  Plane out(plane.width(), plane.height(), plane.channels());
  if (reference <= 0.0) return out;
  std::transform(plane.samples().begin(), plane.samples().end(), out.samples().begin(),
                 [reference](float v) {
                   return static_cast<float>(std::min(std::max(0.0f, v) / reference, 1.0));
                 });
  return out;
}

Plane percentile_stretch(const Plane& plane, double pct) {
  if (plane.empty()) throw Error(ErrorKind::InvalidArgument, "cannot stretch an empty plane");
  return stretch_to(plane, positive_percentile(plane.samples(), pct));
}

Plane gamma_correct(const Plane& plane, double gamma) {
  if (!(gamma > 0.0)) throw Error(ErrorKind::InvalidArgument, "gamma must be > 0");
  const double inv = 1.0 / gamma;
  Plane out(plane.width(), plane.height(), plane.channels());
  std::transform(plane.samples().begin(), plane.samples().end(), out.samples().begin(),
                 [inv](float v) {
                   return v <= 0.0f ? 0.0f : static_cast<float>(std::pow(static_cast<double>(v), inv));
                 });
  return out;
}

// ---------------------------------------------------------------------------

StreamingPercentile::StreamingPercentile(double pct, double upper_bound, std::size_t bins)
    : pct_(pct), upper_(upper_bound), counts_(bins, 0) {
  check_pct(pct);
  if (!(upper_bound > 0.0)) throw Error(ErrorKind::InvalidArgument, "upper bound must be > 0");
}

std::size_t StreamingPercentile::bin_of(float v) const {
  const double pos = static_cast<double>(v) / upper_ * static_cast<double>(counts_.size());
  return std::min(counts_.size() - 1, static_cast<std::size_t>(std::max(0.0, pos)));
}

void StreamingPercentile::observe_first_pass(std::span<const float> values) {
  for (float v : values)
    if (v > 0.0f) {
      ++counts_[bin_of(v)];
      ++total_;
    }
}

void StreamingPercentile::end_first_pass() {
  first_done_ = true;
  if (total_ == 0) {
    done_ = true;
    value_ = 0.0;
    return;
  }
  rank_ = nearest_rank(total_, pct_);
  std::uint64_t cum = 0;
  for (std::size_t b = 0; b < counts_.size(); ++b) {
    if (cum + counts_[b] >= rank_) {
      target_bin_ = b;
      below_target_ = cum;
      break;
    }
    cum += counts_[b];
  }
  candidates_.reserve(static_cast<std::size_t>(counts_[target_bin_]));
}

void StreamingPercentile::observe_second_pass(std::span<const float> values) {
  for (float v : values)
    if (v > 0.0f && bin_of(v) == target_bin_) candidates_.push_back(v);
}

double StreamingPercentile::result() {
  if (!first_done_) throw Error(ErrorKind::InvalidArgument, "percentile first pass not finished");
  if (!done_) {
    const auto k = static_cast<std::ptrdiff_t>(rank_ - below_target_ - 1);
    if (k < 0 || k >= static_cast<std::ptrdiff_t>(candidates_.size()))
      throw Error(ErrorKind::InvalidArgument, "second pass saw different data than the first");
    std::nth_element(candidates_.begin(), candidates_.begin() + k, candidates_.end());
    value_ = candidates_[static_cast<std::size_t>(k)];
    done_ = true;
  }
  return value_;
}

// ---------------------------------------------------------------------------

std::string format_stain_vectors(const StainVectors& sv) {
  json rows = json::array();
  for (int i = 0; i < 3; ++i)
    rows.push_back({{"label", sv.labels[static_cast<std::size_t>(i)]},
                    {"od", {sv.od(i, 0), sv.od(i, 1), sv.od(i, 2)}}});
  return json{{"format", "wsireg-stain-vectors"}, {"version", 1}, {"rows", rows}}.dump(2) + "\n";
}

StainVectors parse_stain_vectors(const std::string& text) {
  try {
    const json j = json::parse(text);
    const auto& rows = j.at("rows");
    if (!rows.is_array() || rows.size() != 3)
      throw Error(ErrorKind::Format, "stain vectors need exactly 3 rows");
    Eigen::Matrix3d m;
    std::array<std::string, 3> labels;
    for (std::size_t i = 0; i < 3; ++i) {
      labels[i] = rows[i].at("label").get<std::string>();
      const auto od = rows[i].at("od").get<std::vector<double>>();
      if (od.size() != 3) throw Error(ErrorKind::Format, "stain vector rows need 3 components");
      for (int k = 0; k < 3; ++k) m(static_cast<int>(i), k) = od[static_cast<std::size_t>(k)];
    }
    return make_stain_vectors(m, labels);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, std::string("malformed stain vectors: ") + e.what());
  }
}

void save_stain_vectors(const StainVectors& sv, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << format_stain_vectors(sv);
}

StainVectors load_stain_vectors(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_stain_vectors(ss.str());
}

}  // namespace wsireg
