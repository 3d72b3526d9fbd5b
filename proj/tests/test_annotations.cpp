#include <gtest/gtest.h>

#include "test_util.hpp"
#include "wsireg/annotations.hpp"
#include "wsireg/error.hpp"

namespace wsireg {
namespace {

AnnotationDocument sample_doc() {
  AnnotationDocument d;
  d.pair_id = "p1";
  d.fixed_slide = "he";
  d.moving_slide = "cd8";
  d.revision = 3;
  RegionPair r;
  r.name = "C4";
  r.fixed_rect = {10, 20, 300, 200};
  r.moving_rect = {15, 18, 310, 190};
  r.landmarks = {{{50.5, 60}, {55, 61.25}}, {{200, 150}, {204, 149}}};
  r.source = RegionSource::Manual;
  d.regions.push_back(r);
  RegionPair q = r;
  q.name = "C5";
  q.source = RegionSource::Automatic;
  q.polygon = {{10, 20}, {300, 20}, {10, 200}};
  d.regions.push_back(q);
  d.palette_samples.push_back({"he", "H", 12, 34, {80, 60, 140}});
  return d;
}

const SlideBounds kFixed{"he", 1000, 800};
const SlideBounds kMoving{"cd8", 1000, 800};

TEST(Annotations, RoundTripIsCanonical) {
  const auto d = sample_doc();
  const auto text = format_annotations(d);
  const auto back = parse_annotations(text);
  EXPECT_EQ(back, d);
  EXPECT_EQ(format_annotations(back), text);
  EXPECT_TRUE(validate_annotations(d, kFixed, kMoving).empty());
}

TEST(Annotations, HandWrittenDocumentParses) {
  const std::string text = R"({
    "schema": "wsireg-annotations/1", "pair_id": "x", "fixed_slide": "a", "moving_slide": "b",
    "regions": [{"name": "r", "fixed_rect": {"x": 0, "y": 0, "w": 10, "h": 10},
                 "moving_rect": {"x": 1, "y": 1, "w": 9, "h": 9},
                 "landmarks": [{"fixed": [1, 2], "moving": [3, 4]}]}]
  })";
  const auto d = parse_annotations(text);
  EXPECT_EQ(d.revision, 0);
  ASSERT_EQ(d.regions.size(), 1u);
  EXPECT_EQ(d.regions[0].source, RegionSource::Manual);
  EXPECT_EQ(d.regions[0].landmarks[0].moving, (Point2{3, 4}));
}

TEST(Annotations, MalformedDocumentsThrowFormat) {
  for (const std::string bad :
       {std::string("{"), std::string(R"({"schema": "other", "pair_id": "x"})"),
        std::string(R"({"schema": "wsireg-annotations/1", "pair_id": "x"})")}) {
    try {
      parse_annotations(bad);
      FAIL() << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::Format);
    }
  }
}

TEST(Annotations, ValidationNamesLandmarkIndex) {
  auto d = sample_doc();
  d.regions[0].landmarks.push_back({{5, 5}, {20, 20}});  // fixed point outside fixed_rect
  const auto errs = validate_annotations(d, kFixed, kMoving);
  ASSERT_EQ(errs.size(), 1u);
  EXPECT_EQ(errs[0].field, "regions[0].landmarks[2].fixed");
  EXPECT_NE(errs[0].message.find("landmark 2"), std::string::npos);
}

TEST(Annotations, ValidationCatchesBoundsNamesAndSlides) {
  auto d = sample_doc();
  d.regions[1].name = "C4";
  d.regions[1].moving_rect = {900, 700, 200, 200};
  d.fixed_slide = "hx";
  const auto errs = validate_annotations(d, kFixed, kMoving);
  std::vector<std::string> fields;
  for (const auto& e : errs) fields.push_back(e.field);
  EXPECT_NE(std::find(fields.begin(), fields.end(), "fixed_slide"), fields.end());
  EXPECT_NE(std::find(fields.begin(), fields.end(), "regions[1].name"), fields.end());
  EXPECT_NE(std::find(fields.begin(), fields.end(), "regions[1].moving_rect"), fields.end());
}

TEST(Annotations, SaveIsAtomicReplace) {
  testing::TempDir dir;
  const auto path = dir / "p1.json";
  auto d = sample_doc();
  save_annotations(d, path);
  d.revision = 4;
  save_annotations(d, path);
  EXPECT_EQ(load_annotations(path), d);
  EXPECT_FALSE(std::filesystem::exists(dir / "p1.json.tmp"));
}

}  // namespace
}  // namespace wsireg
