#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "wsireg/image.hpp"
#include "wsireg/tile_codec.hpp"

namespace wsireg {

enum class SampleType { UInt8, Float32 };

std::string to_string(SampleType t);
SampleType sample_type_from_string(const std::string& s);

/// Geometry of one pyramid level: a grid of square tiles, edge tiles partial.
struct TileGrid {
  std::int64_t width = 0;
  std::int64_t height = 0;
  int tile_size = 512;
  int channels = 1;
  SampleType sample_type = SampleType::Float32;

  std::int64_t cols() const { return (width + tile_size - 1) / tile_size; }
  std::int64_t rows() const { return (height + tile_size - 1) / tile_size; }
  std::int64_t tile_count() const { return cols() * rows(); }
  Rect tile_rect(std::int64_t col, std::int64_t row) const;
};

/// Everything stored in a pyramid manifest.
struct PyramidInfo {
  std::string slide_id;
  std::int64_t width = 0;
  std::int64_t height = 0;
  int tile_size = 512;
  int downsample_factor = 2;
  double pixel_size_um = 0.25;
  int channels = 1;
  SampleType sample_type = SampleType::Float32;
  std::vector<std::string> channel_names;
  std::vector<TileGrid> levels;

  std::string tile_extension() const {
    return sample_type == SampleType::UInt8 ? ".png" : ".tiff";
  }
};

inline constexpr const char* kManifestName = "manifest.json";
inline constexpr const char* kTilePattern = "L{level}_{col}_{row}";

/// Level dimensions for a pyramid: halve (by `factor`) until both
/// dimensions fit in one tile.
std::vector<TileGrid> pyramid_levels(std::int64_t width, std::int64_t height,
                                     int tile_size, int factor, int channels,
                                     SampleType type, bool single_level);

std::string tile_file_name(int level, std::int64_t col, std::int64_t row,
                           const std::string& extension);

/// Immutable, lazily-read handle on a tiled pyramid. Copies share the tile
/// cache. Safe for concurrent readers.
class TiledPyramid {
 public:
  TiledPyramid() = default;

  const PyramidInfo& info() const;
  const std::filesystem::path& directory() const;
  std::filesystem::path manifest_path() const;
  int level_count() const { return static_cast<int>(info().levels.size()); }
  const TileGrid& grid(int level) const;
  std::int64_t width() const { return info().width; }
  std::int64_t height() const { return info().height; }
  int channels() const { return info().channels; }

  /// Level-0 pixels represented by one pixel of `level`.
  std::int64_t level_scale(int level) const;

  std::filesystem::path tile_path(int level, std::int64_t col,
                                  std::int64_t row) const;

  /// Decoded tile, shared with the cache.
  std::shared_ptr<const AnyImage> tile(int level, std::int64_t col,
                                       std::int64_t row) const;

  /// Assembles `r` (in `level` coordinates) from the tiles it touches.
  /// 8-bit samples are widened to float exactly.
  Plane read_region(int level, const Rect& r, int workers = 1) const;
  /// Same as read_region but only valid for 8-bit pyramids.
  Image<std::uint8_t> read_region_u8(int level, const Rect& r,
                                     int workers = 1) const;

  Rect full_rect(int level = 0) const;

 private:
  friend TiledPyramid open_pyramid(const std::filesystem::path&);
  friend class PyramidWriter;

  struct State;
  TiledPyramid(std::filesystem::path dir, PyramidInfo info,
               std::size_t cache_tiles);

  std::shared_ptr<State> state_;
};

/// Opens a pyramid from its manifest (or the directory holding it). Verifies
/// that every tile file exists but decodes nothing.
TiledPyramid open_pyramid(const std::filesystem::path& manifest_or_dir);

PyramidInfo parse_manifest(const std::string& text);
std::string format_manifest(const PyramidInfo& info);

struct WriteOptions {
  int tile_size = 512;
  int downsample_factor = 2;
  double pixel_size_um = 0.25;
  std::string slide_id;
  std::vector<std::string> channel_names;
  bool single_level = false;
  int workers = 1;
};

/// Streams level-0 tiles to disk, then derives the coarser levels. A
/// level-k pixel holds the mean of the level-0 pixels it covers, so
/// partial edge blocks are weighted by their true pixel counts.
class PyramidWriter {
 public:
  PyramidWriter(std::filesystem::path out_dir, std::int64_t width,
                std::int64_t height, int channels, SampleType type,
                WriteOptions options);

  const TileGrid& level0() const { return info_.levels.front(); }
  const PyramidInfo& info() const { return info_; }

  /// Thread-safe for distinct tiles.
  void write_tile(std::int64_t col, std::int64_t row,
                  const Image<std::uint8_t>& tile);
  void write_tile(std::int64_t col, std::int64_t row, const Image<float>& tile);

  TiledPyramid finish();

 private:
  void check_tile(std::int64_t col, std::int64_t row, std::int64_t w,
                  std::int64_t h, int channels, SampleType type);
  void mark_written(std::int64_t col, std::int64_t row);

  std::filesystem::path dir_;
  PyramidInfo info_;
  WriteOptions options_;
  std::mutex mutex_;
  std::vector<bool> written_;
  bool finished_ = false;
};

TiledPyramid write_pyramid(const Image<std::uint8_t>& source,
                           const std::filesystem::path& out_dir,
                           const WriteOptions& options);
TiledPyramid write_pyramid(const Image<float>& source,
                           const std::filesystem::path& out_dir,
                           const WriteOptions& options);

/// Mean-pools level 0 by `factor` (edge blocks partial). Uses the deepest
/// stored level whose scale divides `factor` so level 0 is never loaded
/// whole. 8-bit pyramids always pool from level 0 because their coarse
/// levels are rounded.
Plane subsample(const TiledPyramid& p, std::int64_t factor, int workers = 1);

/// Mean-pools a dense raster by `factor` (edge blocks partial).
Plane subsample(const Plane& src, std::int64_t factor);

}  // namespace wsireg
