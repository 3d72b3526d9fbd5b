#pragma once

#include <cstdint>
#include <filesystem>
#include <variant>
#include <vector>

#include "wsireg/image.hpp"

namespace wsireg {

using AnyImage = std::variant<Image<std::uint8_t>, Image<float>>;

// Lossless tile encoding: 8-bit rasters (1 or 3 channels, RGB order) as PNG,
// single-channel float32 rasters as TIFF.
std::vector<std::uint8_t> encode_png(const Image<std::uint8_t>& img);
std::vector<std::uint8_t> encode_tiff(const Image<float>& img);

AnyImage decode_image(const std::vector<std::uint8_t>& bytes);
AnyImage read_image_file(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path,
                      const std::vector<std::uint8_t>& bytes);

}  // namespace wsireg
