#include "wsireg/tile_codec.hpp"

#include <fstream>
#include <iterator>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace wsireg {
namespace {

// OpenCV stores 3-channel data as BGR; our rasters are RGB.
void swap_red_blue(std::uint8_t* data, std::size_t pixels) {
  for (std::size_t i = 0; i < pixels; ++i) std::swap(data[3 * i], data[3 * i + 2]);
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image<std::uint8_t>& img) {
  if (img.channels() != 1 && img.channels() != 3)
    throw Error(ErrorKind::InvalidArgument, "PNG tiles must have 1 or 3 channels");
  Image<std::uint8_t> copy = img;
  if (img.channels() == 3)
    swap_red_blue(copy.samples().data(), static_cast<std::size_t>(img.pixel_count()));
  const cv::Mat mat(static_cast<int>(img.height()), static_cast<int>(img.width()),
                    CV_8UC(img.channels()), copy.samples().data());
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".png", mat, out, {cv::IMWRITE_PNG_COMPRESSION, 6}))
    throw Error(ErrorKind::Io, "PNG encoding failed");
  return out;
}

std::vector<std::uint8_t> encode_tiff(const Image<float>& img) {
  if (img.channels() != 1)
    throw Error(ErrorKind::InvalidArgument, "float tiles must be single-channel");
  const cv::Mat mat(static_cast<int>(img.height()), static_cast<int>(img.width()),
                    CV_32FC1, const_cast<float*>(img.samples().data()));
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".tiff", mat, out))
    throw Error(ErrorKind::Io, "TIFF encoding failed");
  return out;
}

AnyImage decode_image(const std::vector<std::uint8_t>& bytes) {
  const cv::Mat mat = cv::imdecode(bytes, cv::IMREAD_UNCHANGED);
  if (mat.empty()) throw Error(ErrorKind::Format, "undecodable image data");
  const std::int64_t w = mat.cols;
  const std::int64_t h = mat.rows;
  const int depth = mat.depth();
  const int ch = mat.channels();
  if (depth == CV_8U && (ch == 1 || ch == 3 || ch == 4)) {
    const int out_ch = ch == 1 ? 1 : 3;
    Image<std::uint8_t> img(w, h, out_ch);
    for (std::int64_t y = 0; y < h; ++y) {
      const std::uint8_t* in = mat.ptr<std::uint8_t>(static_cast<int>(y));
      auto row = img.row(y);
      for (std::int64_t x = 0; x < w; ++x) {
        if (out_ch == 1) {
          row[static_cast<std::size_t>(x)] = in[x];
        } else {
          // BGR(A) -> RGB
          const std::uint8_t* px = in + x * ch;
          row[static_cast<std::size_t>(3 * x)] = px[2];
          row[static_cast<std::size_t>(3 * x + 1)] = px[1];
          row[static_cast<std::size_t>(3 * x + 2)] = px[0];
        }
      }
    }
    return img;
  }
  if (depth == CV_32F && ch == 1) {
    Image<float> img(w, h, 1);
    for (std::int64_t y = 0; y < h; ++y) {
      const float* in = mat.ptr<float>(static_cast<int>(y));
      std::copy(in, in + w, img.row(y).begin());
    }
    return img;
  }
  throw Error(ErrorKind::Format, "unsupported sample layout (need 8-bit 1/3 channel or float32 1 channel)");
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path,
                      const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::Io, "short write to " + path.string());
}

AnyImage read_image_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw Error(ErrorKind::Io, "no such file: " + path.string());
  return decode_image(read_file_bytes(path));
}

}  // namespace wsireg
