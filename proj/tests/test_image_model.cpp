#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "test_util.hpp"
#include "wsireg/pyramid.hpp"

namespace wsireg {
namespace {

using testing::TempDir;

Plane checkerboard(std::int64_t w, std::int64_t h, int cell) {
  Plane p(w, h);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      p(x, y) = static_cast<float>(((x / cell + y / cell) % 2) * 0.5 + (x + 3 * y) % 7 * 0.01);
  return p;
}

// Dense oracle: copies pixels one at a time.
template <typename T>
Image<T> dense_crop(const Image<T>& src, const Rect& r) {
  Image<T> out(r.w, r.h, src.channels());
  for (std::int64_t y = 0; y < r.h; ++y)
    for (std::int64_t x = 0; x < r.w; ++x)
      for (int c = 0; c < src.channels(); ++c) out(x, y, c) = src(r.x + x, r.y + y, c);
  return out;
}

TEST(PyramidGeometry, CeilTileCounts) {
  const auto levels = pyramid_levels(100, 100, 64, 2, 1, SampleType::Float32, false);
  EXPECT_EQ(levels[0].cols(), 2);
  EXPECT_EQ(levels[0].rows(), 2);
  EXPECT_EQ(levels[0].tile_rect(1, 1), (Rect{64, 64, 36, 36}));
}

TEST(PyramidGeometry, LevelDimensionsFollowCeilRule) {
  const auto levels = pyramid_levels(90000, 90000, 512, 2, 3, SampleType::UInt8, false);
  EXPECT_EQ(levels[1].width, 45000);
  EXPECT_EQ(levels[1].height, 45000);
  for (std::size_t k = 0; k + 1 < levels.size(); ++k)
    EXPECT_EQ(levels[k + 1].width, (levels[k].width + 1) / 2);
  EXPECT_LE(levels.back().width, 512);
  EXPECT_GT(levels[levels.size() - 2].width, 512);
}

TEST(PyramidGeometry, StopsWhenBothDimensionsFitOneTile) {
  const auto levels = pyramid_levels(256, 256, 128, 2, 1, SampleType::Float32, false);
  ASSERT_EQ(levels.size(), 2u);
  EXPECT_EQ(levels[0].width, 256);
  EXPECT_EQ(levels[1].width, 128);
}

TEST(Pyramid, ConstantImagePreservedAtLevel0) {
  TempDir dir;
  Plane src(256, 256, 1, 0.375f);
  auto p = write_pyramid(src, dir.path(), {.tile_size = 128, .downsample_factor = 2});
  ASSERT_EQ(p.level_count(), 2);
  EXPECT_EQ(p.read_region(0, p.full_rect()), src);
  const Plane l1 = p.read_region(1, p.full_rect(1));
  for (float v : l1.samples()) EXPECT_FLOAT_EQ(v, 0.375f);
}

TEST(Pyramid, Level1IsBlockMeans) {
  TempDir dir;
  Plane src(4, 4);
  for (int i = 0; i < 16; ++i) src(i % 4, i / 4) = static_cast<float>(i);
  auto p = write_pyramid(src, dir.path(), {.tile_size = 2, .downsample_factor = 2});
  ASSERT_GE(p.level_count(), 2);
  const Plane l1 = p.read_region(1, p.full_rect(1));
  // Hand-computed: blocks {0,1,4,5} {2,3,6,7} {8,9,12,13} {10,11,14,15}.
  EXPECT_FLOAT_EQ(l1(0, 0), 2.5f);
  EXPECT_FLOAT_EQ(l1(1, 0), 4.5f);
  EXPECT_FLOAT_EQ(l1(0, 1), 10.5f);
  EXPECT_FLOAT_EQ(l1(1, 1), 12.5f);
}

TEST(Pyramid, CoarseLevelsWeightPartialEdgeBlocks) {
  TempDir dir;
  // Width 3 at factor 2: the second level pixel must be the mean of all
  // three level-0 pixels, not the mean of the two level-1 means.
  Plane src(3, 1);
  src(0, 0) = 0.0f;
  src(1, 0) = 3.0f;
  src(2, 0) = 9.0f;
  auto p = write_pyramid(src, dir.path(), {.tile_size = 1, .downsample_factor = 2});
  ASSERT_EQ(p.level_count(), 3);
  EXPECT_FLOAT_EQ(p.read_region(2, p.full_rect(2))(0, 0), 4.0f);
}

TEST(Pyramid, RoundTripRgb) {
  TempDir dir;
  const RgbImage src = testing::random_rgb(70, 45, 7);
  auto p = write_pyramid(src, dir.path(), {.tile_size = 32, .slide_id = "rgb"});
  auto reopened = open_pyramid(p.manifest_path());
  EXPECT_EQ(reopened.info().slide_id, "rgb");
  EXPECT_EQ(reopened.read_region_u8(0, reopened.full_rect()), src);
  const Plane widened = reopened.read_region(0, {5, 6, 40, 30});
  EXPECT_EQ(widened, convert<float>(dense_crop(src, {5, 6, 40, 30})));
}

TEST(Pyramid, ReadRegionSingleTileIsVerbatim) {
  TempDir dir;
  const Plane src = checkerboard(100, 100, 8);
  auto p = write_pyramid(src, dir.path(), {.tile_size = 64});
  const auto tile = p.tile(0, 1, 0);
  EXPECT_EQ(p.read_region(0, {64, 0, 36, 64}), std::get<Plane>(*tile));
}

TEST(Pyramid, ReadRegionStraddlingFourTilesMatchesDenseCrop) {
  TempDir dir;
  const Plane src = checkerboard(128, 128, 5);
  auto p = write_pyramid(src, dir.path(), {.tile_size = 64});
  const Rect r{40, 50, 50, 40};
  EXPECT_EQ(p.read_region(0, r), dense_crop(src, r));
}

TEST(Pyramid, ReadRegionRejectsEmptyAndOutOfBounds) {
  TempDir dir;
  auto p = write_pyramid(checkerboard(64, 64, 4), dir.path(), {.tile_size = 32});
  EXPECT_THROW(p.read_region(0, {0, 0, 0, 10}), Error);
  EXPECT_THROW(p.read_region(0, {60, 0, 10, 10}), Error);
  EXPECT_THROW(p.read_region(3, {0, 0, 1, 1}), Error);
}

TEST(Pyramid, RandomRectsMatchDenseCropForAnyWorkerCount) {
  TempDir dir;
  const Plane src = testing::random_plane(301, 219, 11);
  auto p = write_pyramid(src, dir.path(), {.tile_size = 37, .workers = 3});
  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; ++i) {
    const std::int64_t x = std::uniform_int_distribution<std::int64_t>(0, 300)(rng);
    const std::int64_t y = std::uniform_int_distribution<std::int64_t>(0, 218)(rng);
    const std::int64_t w = std::uniform_int_distribution<std::int64_t>(1, 301 - x)(rng);
    const std::int64_t h = std::uniform_int_distribution<std::int64_t>(1, 219 - y)(rng);
    const Rect r{x, y, w, h};
    const Plane expected = dense_crop(src, r);
    ASSERT_EQ(p.read_region(0, r, 1), expected) << to_string(r);
    ASSERT_EQ(p.read_region(0, r, 4), expected) << to_string(r);
  }
}

TEST(Pyramid, TileReadOrderDoesNotMatter) {
  TempDir dir;
  const Plane src = testing::random_plane(96, 96, 3);
  auto p = write_pyramid(src, dir.path(), {.tile_size = 32});
  const Plane first = p.read_region(0, p.full_rect());
  // Reopen with a cold cache and touch tiles in reverse order first.
  auto q = open_pyramid(dir.path());
  for (int row = 2; row >= 0; --row)
    for (int col = 2; col >= 0; --col) (void)q.tile(0, col, row);
  EXPECT_EQ(q.read_region(0, q.full_rect()), first);
}

TEST(Pyramid, OpenIsLazy) {
  TempDir dir;
  write_pyramid(checkerboard(64, 64, 4), dir.path(), {.tile_size = 32});
  // Corrupt a tile: open still succeeds, reading that tile fails.
  std::ofstream(dir / "L0_1_1.tiff", std::ios::trunc) << "not a tiff";
  auto p = open_pyramid(dir.path());
  EXPECT_NO_THROW(p.read_region(0, {0, 0, 32, 32}));
  EXPECT_THROW(p.read_region(0, {32, 32, 8, 8}), Error);
}

TEST(Pyramid, OpenErrors) {
  TempDir dir;
  EXPECT_THROW(open_pyramid(dir / "nope.json"), Error);
  write_pyramid(checkerboard(64, 64, 4), dir.path(), {.tile_size = 32});
  std::filesystem::remove(dir / "L0_1_0.tiff");
  try {
    open_pyramid(dir.path());
    FAIL() << "expected missing-tile error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("(1,0)"), std::string::npos) << e.what();
  }
  std::ofstream(dir / "manifest.json", std::ios::trunc) << "{ broken";
  EXPECT_THROW(open_pyramid(dir.path()), Error);
}

TEST(Pyramid, ManifestViolatingCeilRuleIsRejected) {
  TempDir dir;
  write_pyramid(checkerboard(100, 100, 4), dir.path(), {.tile_size = 32});
  std::ifstream in(dir / "manifest.json");
  auto j = nlohmann::json::parse(in);
  j["levels"][1]["width"] = 49;
  std::ofstream(dir / "manifest.json", std::ios::trunc) << j.dump();
  EXPECT_THROW(open_pyramid(dir.path()), Error);
}

TEST(Pyramid, RejectsZeroDimensions) {
  TempDir dir;
  EXPECT_THROW(write_pyramid(Plane(0, 5), dir.path(), {}), Error);
}

TEST(Subsample, FactorOneIsLevel0) {
  TempDir dir;
  const Plane src = testing::random_plane(50, 40, 2);
  auto p = write_pyramid(src, dir.path(), {.tile_size = 16});
  EXPECT_EQ(subsample(p, 1), src);
}

TEST(Subsample, QuadrantMeansAtFactor200) {
  TempDir dir;
  const Plane src = testing::random_plane(400, 400, 9);
  auto p = write_pyramid(src, dir.path(), {.tile_size = 64});
  const Plane out = subsample(p, 200);
  ASSERT_EQ(out.width(), 2);
  ASSERT_EQ(out.height(), 2);
  for (int qy = 0; qy < 2; ++qy)
    for (int qx = 0; qx < 2; ++qx) {
      double sum = 0.0;
      for (int y = 0; y < 200; ++y)
        for (int x = 0; x < 200; ++x) sum += src(qx * 200 + x, qy * 200 + y);
      EXPECT_NEAR(out(qx, qy), sum / 40000.0, 1e-6);
    }
}

TEST(Subsample, PartialEdgeBlocksUseTrueCounts) {
  TempDir dir;
  const Plane src = testing::random_plane(203, 117, 4);
  auto p = write_pyramid(src, dir.path(), {.tile_size = 32});
  const Plane expected = subsample(src, 8);
  const Plane got = subsample(p, 8, 2);
  ASSERT_EQ(got.width(), 26);
  ASSERT_EQ(got.height(), 15);
  for (std::size_t i = 0; i < got.samples().size(); ++i)
    EXPECT_NEAR(got.samples()[i], expected.samples()[i], 1e-6);
}

TEST(Subsample, ComposesAcrossFactors) {
  TempDir dir;
  const Plane src = testing::random_plane(240, 180, 21);
  auto p = write_pyramid(src, dir.path(), {.tile_size = 32});
  for (auto [a, b] : {std::pair{2, 3}, std::pair{4, 5}, std::pair{6, 2}, std::pair{3, 4}}) {
    const Plane once = subsample(p, a * b);
    const Plane twice = subsample(subsample(p, a), b);
    ASSERT_EQ(once.width(), twice.width());
    for (std::size_t i = 0; i < once.samples().size(); ++i)
      ASSERT_NEAR(once.samples()[i], twice.samples()[i], 1e-6) << a << "x" << b;
  }
}

TEST(Subsample, WorkerCountIndependent) {
  TempDir dir;
  const Plane src = testing::random_plane(330, 270, 8);
  auto p = write_pyramid(src, dir.path(), {.tile_size = 40});
  EXPECT_EQ(subsample(p, 12, 1), subsample(p, 12, 5));
}

TEST(Subsample, OutputShapeForWholeSlide) {
  const auto levels = pyramid_levels(90000, 90000, 512, 2, 1, SampleType::Float32, false);
  EXPECT_EQ((levels[0].width + 199) / 200, 450);
  EXPECT_THROW(subsample(Plane(4, 4), 0), Error);
}

}  // namespace
}  // namespace wsireg
