#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "wsireg/error.hpp"

namespace wsireg {

/// Axis-aligned rectangle in pixel coordinates. Unless an operation says
/// otherwise the coordinates are level-0 pixels.
struct Rect {
  std::int64_t x = 0;
  std::int64_t y = 0;
  std::int64_t w = 0;
  std::int64_t h = 0;

  std::int64_t right() const { return x + w; }
  std::int64_t bottom() const { return y + h; }
  bool empty() const { return w <= 0 || h <= 0; }

  bool contains(double px, double py) const {
    return px >= static_cast<double>(x) && py >= static_cast<double>(y) &&
           px <= static_cast<double>(x + w - 1) &&
           py <= static_cast<double>(y + h - 1);
  }

  bool inside(std::int64_t width, std::int64_t height) const {
    return x >= 0 && y >= 0 && w > 0 && h > 0 && x + w <= width &&
           y + h <= height;
  }

  double center_x() const { return static_cast<double>(x) + (w - 1) / 2.0; }
  double center_y() const { return static_cast<double>(y) + (h - 1) / 2.0; }

  friend bool operator==(const Rect&, const Rect&) = default;
};

inline Rect intersect(const Rect& a, const Rect& b) {
  const std::int64_t x0 = std::max(a.x, b.x);
  const std::int64_t y0 = std::max(a.y, b.y);
  const std::int64_t x1 = std::min(a.right(), b.right());
  const std::int64_t y1 = std::min(a.bottom(), b.bottom());
  if (x1 <= x0 || y1 <= y0) return {x0, y0, 0, 0};
  return {x0, y0, x1 - x0, y1 - y0};
}

inline std::string to_string(const Rect& r) {
  return "(" + std::to_string(r.x) + "," + std::to_string(r.y) + " " +
         std::to_string(r.w) + "x" + std::to_string(r.h) + ")";
}

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

/// Dense interleaved raster. Samples of pixel (x, y) live at
/// ((y * width + x) * channels + c).
template <typename T>
class Image {
 public:
  using value_type = T;

  Image() = default;
  Image(std::int64_t width, std::int64_t height, int channels = 1,
        T fill = T{})
      : width_(width), height_(height), channels_(channels) {
    if (width < 0 || height < 0 || channels < 1)
      throw Error(ErrorKind::InvalidArgument, "invalid image dimensions");
    data_.assign(static_cast<std::size_t>(width * height * channels), fill);
  }

  std::int64_t width() const { return width_; }
  std::int64_t height() const { return height_; }
  int channels() const { return channels_; }
  std::int64_t pixel_count() const { return width_ * height_; }
  bool empty() const { return data_.empty(); }

  T& operator()(std::int64_t x, std::int64_t y, int c = 0) {
    return data_[index(x, y, c)];
  }
  const T& operator()(std::int64_t x, std::int64_t y, int c = 0) const {
    return data_[index(x, y, c)];
  }

  std::span<T> samples() { return data_; }
  std::span<const T> samples() const { return data_; }

  std::span<T> row(std::int64_t y) {
    return std::span<T>(data_).subspan(
        static_cast<std::size_t>(y * width_ * channels_),
        static_cast<std::size_t>(width_ * channels_));
  }
  std::span<const T> row(std::int64_t y) const {
    return std::span<const T>(data_).subspan(
        static_cast<std::size_t>(y * width_ * channels_),
        static_cast<std::size_t>(width_ * channels_));
  }

  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  std::size_t index(std::int64_t x, std::int64_t y, int c) const {
    return static_cast<std::size_t>((y * width_ + x) * channels_ + c);
  }

  std::int64_t width_ = 0;
  std::int64_t height_ = 0;
  int channels_ = 1;
  std::vector<T> data_;
};

using Plane = Image<float>;
using RgbImage = Image<std::uint8_t>;

/// Copies `r` out of `src`. Throws when `r` does not lie inside the image.
template <typename T>
Image<T> crop(const Image<T>& src, const Rect& r) {
  if (!r.inside(src.width(), src.height()))
    throw Error(ErrorKind::InvalidArgument,
                "crop rect " + to_string(r) + " outside image");
  Image<T> out(r.w, r.h, src.channels());
  const auto c = static_cast<std::size_t>(src.channels());
  for (std::int64_t y = 0; y < r.h; ++y) {
    auto from = src.row(r.y + y).subspan(static_cast<std::size_t>(r.x) * c,
                                         static_cast<std::size_t>(r.w) * c);
    std::copy(from.begin(), from.end(), out.row(y).begin());
  }
  return out;
}

/// Pastes `src` into `dst` with its top-left corner at (x, y).
template <typename T>
void paste(Image<T>& dst, const Image<T>& src, std::int64_t x,
           std::int64_t y) {
  const auto c = static_cast<std::size_t>(src.channels());
  for (std::int64_t row = 0; row < src.height(); ++row) {
    auto from = src.row(row);
    std::copy(from.begin(), from.end(),
              dst.row(y + row).begin() + static_cast<std::ptrdiff_t>(x * c));
  }
}

template <typename To, typename From>
Image<To> convert(const Image<From>& src) {
  Image<To> out(src.width(), src.height(), src.channels());
  std::transform(src.samples().begin(), src.samples().end(),
                 out.samples().begin(),
                 [](From v) { return static_cast<To>(v); });
  return out;
}

/// Extracts one channel of a multi-channel image.
template <typename T>
Image<T> channel(const Image<T>& src, int c) {
  Image<T> out(src.width(), src.height(), 1);
  for (std::int64_t y = 0; y < src.height(); ++y)
    for (std::int64_t x = 0; x < src.width(); ++x) out(x, y) = src(x, y, c);
  return out;
}

}  // namespace wsireg
