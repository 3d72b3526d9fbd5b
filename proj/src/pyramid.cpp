#include "wsireg/pyramid.hpp"

#include <cmath>
#include <fstream>
#include <list>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "wsireg/parallel.hpp"

namespace wsireg {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(SampleType t) {
  return t == SampleType::UInt8 ? "uint8" : "float32";
}

SampleType sample_type_from_string(const std::string& s) {
  if (s == "uint8") return SampleType::UInt8;
  if (s == "float32") return SampleType::Float32;
  throw Error(ErrorKind::Format, "unknown bit_depth '" + s + "'");
}

Rect TileGrid::tile_rect(std::int64_t col, std::int64_t row) const {
  const std::int64_t x = col * tile_size;
  const std::int64_t y = row * tile_size;
  return {x, y, std::min<std::int64_t>(tile_size, width - x),
          std::min<std::int64_t>(tile_size, height - y)};
}

std::vector<TileGrid> pyramid_levels(std::int64_t width, std::int64_t height,
                                     int tile_size, int factor, int channels,
                                     SampleType type, bool single_level) {
  if (width <= 0 || height <= 0)
    throw Error(ErrorKind::InvalidArgument, "pyramid dimensions must be positive");
  if (tile_size < 1)
    throw Error(ErrorKind::InvalidArgument, "tile_size must be >= 1");
  if (factor < 2)
    throw Error(ErrorKind::InvalidArgument, "downsample_factor must be >= 2");
  std::vector<TileGrid> levels;
  std::int64_t w = width;
  std::int64_t h = height;
  for (;;) {
    levels.push_back({w, h, tile_size, channels, type});
    if (single_level || (w <= tile_size && h <= tile_size)) break;
    w = (w + factor - 1) / factor;
    h = (h + factor - 1) / factor;
  }
  return levels;
}

std::string tile_file_name(int level, std::int64_t col, std::int64_t row,
                           const std::string& extension) {
  return "L" + std::to_string(level) + "_" + std::to_string(col) + "_" +
         std::to_string(row) + extension;
}

// ---------------------------------------------------------------------------
// Manifest

std::string format_manifest(const PyramidInfo& info) {
  json levels = json::array();
  for (std::size_t k = 0; k < info.levels.size(); ++k) {
    const auto& g = info.levels[k];
    levels.push_back({{"level", k},
                      {"width", g.width},
                      {"height", g.height},
                      {"cols", g.cols()},
                      {"rows", g.rows()}});
  }
  const json j = {{"format", "wsireg-pyramid"},
                  {"version", 1},
                  {"slide_id", info.slide_id},
                  {"width", info.width},
                  {"height", info.height},
                  {"tile_size", info.tile_size},
                  {"downsample_factor", info.downsample_factor},
                  {"pixel_size_um", info.pixel_size_um},
                  {"channels", info.channels},
                  {"bit_depth", to_string(info.sample_type)},
                  {"channel_names", info.channel_names},
                  {"tile_pattern", kTilePattern},
                  {"tile_extension", info.tile_extension()},
                  {"levels", levels}};
  return j.dump(2) + "\n";
}

PyramidInfo parse_manifest(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, std::string("malformed manifest: ") + e.what());
  }
  PyramidInfo info;
  try {
    if (j.value("format", "") != "wsireg-pyramid")
      throw Error(ErrorKind::Format, "malformed manifest: format is not wsireg-pyramid");
    info.slide_id = j.value("slide_id", "");
    info.width = j.at("width").get<std::int64_t>();
    info.height = j.at("height").get<std::int64_t>();
    info.tile_size = j.at("tile_size").get<int>();
    info.downsample_factor = j.at("downsample_factor").get<int>();
    info.pixel_size_um = j.at("pixel_size_um").get<double>();
    info.channels = j.at("channels").get<int>();
    info.sample_type = sample_type_from_string(j.at("bit_depth").get<std::string>());
    info.channel_names = j.value("channel_names", std::vector<std::string>{});
    if (j.value("tile_pattern", std::string(kTilePattern)) != kTilePattern)
      throw Error(ErrorKind::Format, "malformed manifest: unsupported tile_pattern");
    const auto& lv = j.at("levels");
    if (!lv.is_array() || lv.empty())
      throw Error(ErrorKind::Format, "malformed manifest: levels must be a non-empty array");
    if (info.pixel_size_um <= 0)
      throw Error(ErrorKind::Format, "malformed manifest: pixel_size_um must be > 0");
    if (info.channels != 1 && info.channels != 3)
      throw Error(ErrorKind::Format, "malformed manifest: channels must be 1 or 3");
    if (info.sample_type == SampleType::Float32 && info.channels != 1)
      throw Error(ErrorKind::Format, "malformed manifest: float32 pyramids are single-channel");
    const auto expected =
        pyramid_levels(info.width, info.height, info.tile_size, info.downsample_factor,
                       info.channels, info.sample_type, lv.size() == 1);
    if (expected.size() != lv.size())
      throw Error(ErrorKind::Format, "malformed manifest: level count inconsistent with dimensions");
    for (std::size_t k = 0; k < lv.size(); ++k) {
      if (lv[k].at("width").get<std::int64_t>() != expected[k].width ||
          lv[k].at("height").get<std::int64_t>() != expected[k].height)
        throw Error(ErrorKind::Format, "malformed manifest: level " + std::to_string(k) +
                                           " dimensions violate the ceil(previous/factor) rule");
    }
    info.levels = expected;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, std::string("malformed manifest: ") + e.what());
  }
  return info;
}

// ---------------------------------------------------------------------------
// TiledPyramid

struct TiledPyramid::State {
  fs::path dir;
  PyramidInfo info;
  std::size_t capacity = 32;

  std::mutex mutex;
  std::list<std::uint64_t> lru;
  std::unordered_map<std::uint64_t,
                     std::pair<std::shared_ptr<const AnyImage>, std::list<std::uint64_t>::iterator>>
      cache;
};

TiledPyramid::TiledPyramid(fs::path dir, PyramidInfo info, std::size_t cache_tiles)
    : state_(std::make_shared<State>()) {
  state_->dir = std::move(dir);
  state_->info = std::move(info);
  state_->capacity = cache_tiles;
}

const PyramidInfo& TiledPyramid::info() const { return state_->info; }
const fs::path& TiledPyramid::directory() const { return state_->dir; }
fs::path TiledPyramid::manifest_path() const { return state_->dir / kManifestName; }

const TileGrid& TiledPyramid::grid(int level) const {
  if (level < 0 || level >= level_count())
    throw Error(ErrorKind::InvalidArgument, "level " + std::to_string(level) + " does not exist");
  return info().levels[static_cast<std::size_t>(level)];
}

std::int64_t TiledPyramid::level_scale(int level) const {
  std::int64_t s = 1;
  for (int k = 0; k < level; ++k) s *= info().downsample_factor;
  return s;
}

Rect TiledPyramid::full_rect(int level) const {
  const auto& g = grid(level);
  return {0, 0, g.width, g.height};
}

fs::path TiledPyramid::tile_path(int level, std::int64_t col, std::int64_t row) const {
  return state_->dir / tile_file_name(level, col, row, info().tile_extension());
}

std::shared_ptr<const AnyImage> TiledPyramid::tile(int level, std::int64_t col,
                                                   std::int64_t row) const {
  const auto& g = grid(level);
  if (col < 0 || row < 0 || col >= g.cols() || row >= g.rows())
    throw Error(ErrorKind::InvalidArgument, "tile (" + std::to_string(col) + "," +
                                                std::to_string(row) + ") outside level " +
                                                std::to_string(level));
  const std::uint64_t key = (static_cast<std::uint64_t>(level) << 56) ^
                            (static_cast<std::uint64_t>(col) << 28) ^
                            static_cast<std::uint64_t>(row);
  auto& st = *state_;
  {
    std::lock_guard lock(st.mutex);
    if (auto it = st.cache.find(key); it != st.cache.end()) {
      st.lru.splice(st.lru.begin(), st.lru, it->second.second);
      return it->second.first;
    }
  }
  const fs::path path = tile_path(level, col, row);
  std::shared_ptr<const AnyImage> decoded;
  try {
    decoded = std::make_shared<const AnyImage>(read_image_file(path));
  } catch (const Error& e) {
    throw Error(ErrorKind::Io, "unreadable tile level " + std::to_string(level) + " (" +
                                   std::to_string(col) + "," + std::to_string(row) +
                                   "): " + e.what());
  }
  const Rect tr = g.tile_rect(col, row);
  const bool ok = std::visit(
      [&](const auto& img) {
        using T = typename std::decay_t<decltype(img)>::value_type;
        const bool type_ok = std::is_same_v<T, std::uint8_t>
                                 ? info().sample_type == SampleType::UInt8
                                 : info().sample_type == SampleType::Float32;
        return type_ok && img.width() == tr.w && img.height() == tr.h &&
               img.channels() == info().channels;
      },
      *decoded);
  if (!ok)
    throw Error(ErrorKind::Format, "tile level " + std::to_string(level) + " (" +
                                       std::to_string(col) + "," + std::to_string(row) +
                                       ") has unexpected geometry or sample type");
  if (st.capacity > 0) {
    std::lock_guard lock(st.mutex);
    if (st.cache.find(key) == st.cache.end()) {
      st.lru.push_front(key);
      st.cache.emplace(key, std::make_pair(decoded, st.lru.begin()));
      while (st.cache.size() > st.capacity) {
        st.cache.erase(st.lru.back());
        st.lru.pop_back();
      }
    }
  }
  return decoded;
}

namespace {

template <typename Out>
Image<Out> assemble(const TiledPyramid& p, int level, const Rect& r, int workers) {
  const auto& g = p.grid(level);
  if (r.w <= 0 || r.h <= 0)
    throw Error(ErrorKind::InvalidArgument, "region " + to_string(r) + " is empty");
  if (!r.inside(g.width, g.height))
    throw Error(ErrorKind::InvalidArgument, "region " + to_string(r) +
                                                " out of bounds for level " +
                                                std::to_string(level));
  Image<Out> out(r.w, r.h, g.channels);
  const std::int64_t c0 = r.x / g.tile_size;
  const std::int64_t c1 = (r.right() - 1) / g.tile_size;
  const std::int64_t r0 = r.y / g.tile_size;
  const std::int64_t r1 = (r.bottom() - 1) / g.tile_size;
  const std::int64_t ncols = c1 - c0 + 1;
  const auto ch = static_cast<std::size_t>(g.channels);
  parallel_for(ncols * (r1 - r0 + 1), workers, [&](std::int64_t i) {
    const std::int64_t col = c0 + i % ncols;
    const std::int64_t row = r0 + i / ncols;
    const Rect tr = g.tile_rect(col, row);
    const Rect part = intersect(tr, r);
    const auto decoded = p.tile(level, col, row);
    std::visit(
        [&](const auto& img) {
          for (std::int64_t y = part.y; y < part.bottom(); ++y) {
            auto src = img.row(y - tr.y).subspan(static_cast<std::size_t>(part.x - tr.x) * ch,
                                                 static_cast<std::size_t>(part.w) * ch);
            auto dst = out.row(y - r.y).subspan(static_cast<std::size_t>(part.x - r.x) * ch,
                                                static_cast<std::size_t>(part.w) * ch);
            std::transform(src.begin(), src.end(), dst.begin(),
                           [](auto v) { return static_cast<Out>(v); });
          }
        },
        *decoded);
  });
  return out;
}

}  // namespace

Plane TiledPyramid::read_region(int level, const Rect& r, int workers) const {
  return assemble<float>(*this, level, r, workers);
}

Image<std::uint8_t> TiledPyramid::read_region_u8(int level, const Rect& r, int workers) const {
  if (info().sample_type != SampleType::UInt8)
    throw Error(ErrorKind::InvalidArgument, "read_region_u8 on a float32 pyramid");
  return assemble<std::uint8_t>(*this, level, r, workers);
}

TiledPyramid open_pyramid(const fs::path& manifest_or_dir) {
  fs::path manifest = manifest_or_dir;
  if (fs::is_directory(manifest)) manifest /= kManifestName;
  if (!fs::exists(manifest))
    throw Error(ErrorKind::Io, "missing manifest: " + manifest.string());
  std::ifstream in(manifest);
  std::stringstream ss;
  ss << in.rdbuf();
  PyramidInfo info = parse_manifest(ss.str());
  TiledPyramid p(manifest.parent_path(), std::move(info), 32);
  for (int k = 0; k < p.level_count(); ++k) {
    const auto& g = p.grid(k);
    for (std::int64_t row = 0; row < g.rows(); ++row)
      for (std::int64_t col = 0; col < g.cols(); ++col)
        if (!fs::exists(p.tile_path(k, col, row)))
          throw Error(ErrorKind::Io, "missing tile file for level " + std::to_string(k) + " (" +
                                         std::to_string(col) + "," + std::to_string(row) +
                                         "): " + p.tile_path(k, col, row).string());
  }
  return p;
}

// ---------------------------------------------------------------------------
// Writing

PyramidWriter::PyramidWriter(fs::path out_dir, std::int64_t width, std::int64_t height,
                             int channels, SampleType type, WriteOptions options)
    : dir_(std::move(out_dir)), options_(std::move(options)) {
  if (type == SampleType::Float32 && channels != 1)
    throw Error(ErrorKind::InvalidArgument, "float32 pyramids must be single-channel");
  if (channels != 1 && channels != 3)
    throw Error(ErrorKind::InvalidArgument, "pyramids have 1 or 3 channels");
  if (options_.pixel_size_um <= 0)
    throw Error(ErrorKind::InvalidArgument, "pixel_size_um must be > 0");
  info_.slide_id = options_.slide_id;
  info_.width = width;
  info_.height = height;
  info_.tile_size = options_.tile_size;
  info_.downsample_factor = options_.downsample_factor;
  info_.pixel_size_um = options_.pixel_size_um;
  info_.channels = channels;
  info_.sample_type = type;
  info_.channel_names = options_.channel_names;
  if (info_.channel_names.empty())
    info_.channel_names = channels == 3 ? std::vector<std::string>{"R", "G", "B"}
                                        : std::vector<std::string>{"value"};
  info_.levels = pyramid_levels(width, height, options_.tile_size, options_.downsample_factor,
                                channels, type, options_.single_level);
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (!fs::is_directory(dir_))
    throw Error(ErrorKind::Io, "cannot create output directory " + dir_.string());
  written_.assign(static_cast<std::size_t>(level0().tile_count()), false);
}

void PyramidWriter::check_tile(std::int64_t col, std::int64_t row, std::int64_t w,
                               std::int64_t h, int channels, SampleType type) {
  if (finished_) throw Error(ErrorKind::InvalidArgument, "pyramid already finished");
  const auto& g = level0();
  if (col < 0 || row < 0 || col >= g.cols() || row >= g.rows())
    throw Error(ErrorKind::InvalidArgument, "tile index outside level 0");
  const Rect tr = g.tile_rect(col, row);
  if (tr.w != w || tr.h != h || channels != info_.channels || type != info_.sample_type)
    throw Error(ErrorKind::InvalidArgument, "tile (" + std::to_string(col) + "," +
                                                std::to_string(row) +
                                                ") has wrong geometry or sample type");
}

void PyramidWriter::mark_written(std::int64_t col, std::int64_t row) {
  std::lock_guard lock(mutex_);
  written_[static_cast<std::size_t>(row * level0().cols() + col)] = true;
}

void PyramidWriter::write_tile(std::int64_t col, std::int64_t row,
                               const Image<std::uint8_t>& tile) {
  check_tile(col, row, tile.width(), tile.height(), tile.channels(), SampleType::UInt8);
  write_file_bytes(dir_ / tile_file_name(0, col, row, info_.tile_extension()), encode_png(tile));
  mark_written(col, row);
}

void PyramidWriter::write_tile(std::int64_t col, std::int64_t row, const Image<float>& tile) {
  check_tile(col, row, tile.width(), tile.height(), tile.channels(), SampleType::Float32);
  write_file_bytes(dir_ / tile_file_name(0, col, row, info_.tile_extension()), encode_tiff(tile));
  mark_written(col, row);
}

namespace {

// Level-0 pixels covered along one axis by pixel `i` of a level whose scale is `s`.
inline double coverage(std::int64_t i, std::int64_t s, std::int64_t extent0) {
  return static_cast<double>(std::min(s, extent0 - i * s));
}

}  // namespace

TiledPyramid PyramidWriter::finish() {
  {
    std::lock_guard lock(mutex_);
    for (std::size_t i = 0; i < written_.size(); ++i)
      if (!written_[i])
        throw Error(ErrorKind::InvalidArgument,
                    "level-0 tile (" + std::to_string(static_cast<std::int64_t>(i) % level0().cols()) +
                        "," + std::to_string(static_cast<std::int64_t>(i) / level0().cols()) +
                        ") never written");
    finished_ = true;
  }
  TiledPyramid partial(dir_, info_, 64);
  const int d = info_.downsample_factor;
  const int ch = info_.channels;
  for (std::size_t k = 0; k + 1 < info_.levels.size(); ++k) {
    const auto& fine = info_.levels[k];
    const auto& coarse = info_.levels[k + 1];
    const std::int64_t scale = partial.level_scale(static_cast<int>(k));
    parallel_for(coarse.tile_count(), options_.workers, [&](std::int64_t t) {
      const std::int64_t col = t % coarse.cols();
      const std::int64_t row = t / coarse.cols();
      const Rect cr = coarse.tile_rect(col, row);
      const Rect fr = intersect({cr.x * d, cr.y * d, cr.w * d, cr.h * d},
                                {0, 0, fine.width, fine.height});
      const Plane src = partial.read_region(static_cast<int>(k), fr);
      Plane acc(cr.w, cr.h, ch);
      for (std::int64_t y = 0; y < cr.h; ++y) {
        for (std::int64_t x = 0; x < cr.w; ++x) {
          for (int c = 0; c < ch; ++c) {
            double sum = 0.0;
            double weight = 0.0;
            for (std::int64_t fy = (cr.y + y) * d; fy < std::min((cr.y + y + 1) * d, fine.height); ++fy) {
              const double wy = coverage(fy, scale, info_.height);
              for (std::int64_t fx = (cr.x + x) * d; fx < std::min((cr.x + x + 1) * d, fine.width); ++fx) {
                const double w = wy * coverage(fx, scale, info_.width);
                sum += w * src(fx - fr.x, fy - fr.y, c);
                weight += w;
              }
            }
            acc(x, y, c) = static_cast<float>(sum / weight);
          }
        }
      }
      const fs::path path = dir_ / tile_file_name(static_cast<int>(k + 1), col, row, info_.tile_extension());
      if (info_.sample_type == SampleType::UInt8) {
        Image<std::uint8_t> out(cr.w, cr.h, ch);
        std::transform(acc.samples().begin(), acc.samples().end(), out.samples().begin(),
                       [](float v) {
                         return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
                       });
        write_file_bytes(path, encode_png(out));
      } else {
        write_file_bytes(path, encode_tiff(acc));
      }
    });
  }
  {
    std::ofstream out(dir_ / kManifestName, std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot write manifest in " + dir_.string());
    out << format_manifest(info_);
  }
  return open_pyramid(dir_ / kManifestName);
}

namespace {

template <typename T>
TiledPyramid write_dense(const Image<T>& source, const fs::path& out_dir,
                         const WriteOptions& options, SampleType type) {
  if (source.width() == 0 || source.height() == 0)
    throw Error(ErrorKind::InvalidArgument, "cannot write a pyramid with zero dimensions");
  PyramidWriter writer(out_dir, source.width(), source.height(), source.channels(), type, options);
  const auto& g = writer.level0();
  parallel_for(g.tile_count(), options.workers, [&](std::int64_t t) {
    const std::int64_t col = t % g.cols();
    const std::int64_t row = t / g.cols();
    writer.write_tile(col, row, crop(source, g.tile_rect(col, row)));
  });
  return writer.finish();
}

}  // namespace

TiledPyramid write_pyramid(const Image<std::uint8_t>& source, const fs::path& out_dir,
                           const WriteOptions& options) {
  return write_dense(source, out_dir, options, SampleType::UInt8);
}

TiledPyramid write_pyramid(const Image<float>& source, const fs::path& out_dir,
                           const WriteOptions& options) {
  if (source.channels() != 1)
    throw Error(ErrorKind::InvalidArgument, "float32 pyramids must be single-channel");
  return write_dense(source, out_dir, options, SampleType::Float32);
}

// ---------------------------------------------------------------------------
// Subsampling

Plane subsample(const Plane& src, std::int64_t factor) {
  if (factor < 1) throw Error(ErrorKind::InvalidArgument, "subsample factor must be >= 1");
  const std::int64_t ow = (src.width() + factor - 1) / factor;
  const std::int64_t oh = (src.height() + factor - 1) / factor;
  const int ch = src.channels();
  Plane out(ow, oh, ch);
  for (std::int64_t oy = 0; oy < oh; ++oy) {
    const std::int64_t y1 = std::min((oy + 1) * factor, src.height());
    for (std::int64_t ox = 0; ox < ow; ++ox) {
      const std::int64_t x1 = std::min((ox + 1) * factor, src.width());
      for (int c = 0; c < ch; ++c) {
        double sum = 0.0;
        for (std::int64_t y = oy * factor; y < y1; ++y)
          for (std::int64_t x = ox * factor; x < x1; ++x) sum += src(x, y, c);
        out(ox, oy, c) = static_cast<float>(sum / static_cast<double>((y1 - oy * factor) * (x1 - ox * factor)));
      }
    }
  }
  return out;
}

Plane subsample(const TiledPyramid& p, std::int64_t factor, int workers) {
  if (factor < 1) throw Error(ErrorKind::InvalidArgument, "subsample factor must be >= 1");
  int level = 0;
  if (p.info().sample_type == SampleType::Float32) {
    while (level + 1 < p.level_count() && factor % p.level_scale(level + 1) == 0) ++level;
  }
  const std::int64_t scale = p.level_scale(level);
  const std::int64_t residual = factor / scale;
  const auto& g = p.grid(level);
  const std::int64_t ow = (p.width() + factor - 1) / factor;
  const std::int64_t oh = (p.height() + factor - 1) / factor;
  const int ch = p.channels();
  Plane out(ow, oh, ch);
  const std::int64_t rows_per_band = std::max<std::int64_t>(1, g.tile_size / residual);
  const std::int64_t bands = (oh + rows_per_band - 1) / rows_per_band;
  parallel_for(bands, workers, [&](std::int64_t b) {
    const std::int64_t oy0 = b * rows_per_band;
    const std::int64_t oy1 = std::min(oh, oy0 + rows_per_band);
    const Rect band{0, oy0 * residual, g.width,
                    std::min(g.height, oy1 * residual) - oy0 * residual};
    const Plane src = p.read_region(level, band);
    std::vector<double> sum(static_cast<std::size_t>(ch));
    for (std::int64_t oy = oy0; oy < oy1; ++oy) {
      const std::int64_t y1 = std::min((oy + 1) * residual, g.height);
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        const std::int64_t x1 = std::min((ox + 1) * residual, g.width);
        std::fill(sum.begin(), sum.end(), 0.0);
        double weight = 0.0;
        for (std::int64_t y = oy * residual; y < y1; ++y) {
          const double wy = coverage(y, scale, p.height());
          for (std::int64_t x = ox * residual; x < x1; ++x) {
            const double w = wy * coverage(x, scale, p.width());
            for (int c = 0; c < ch; ++c) sum[static_cast<std::size_t>(c)] += w * src(x, y - band.y, c);
            weight += w;
          }
        }
        for (int c = 0; c < ch; ++c)
          out(ox, oy, c) = static_cast<float>(sum[static_cast<std::size_t>(c)] / weight);
      }
    }
  });
  return out;
}

}  // namespace wsireg
