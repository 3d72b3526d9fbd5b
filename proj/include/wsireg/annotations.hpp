#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wsireg/image.hpp"

namespace wsireg {

inline constexpr const char* kAnnotationSchema = "wsireg-annotations/1";

enum class RegionSource { Manual, Automatic };

std::string to_string(RegionSource s);
RegionSource region_source_from_string(const std::string& s);

struct LandmarkPair {
  Point2 fixed;
  Point2 moving;
  friend bool operator==(const LandmarkPair&, const LandmarkPair&) = default;
};

/// A natural sub-region on the fixed slide and its counterpart on the moving
/// slide. Rects and landmarks are level-0 pixels of their own slide.
struct RegionPair {
  std::string name;
  Rect fixed_rect;
  Rect moving_rect;
  std::vector<LandmarkPair> landmarks;
  RegionSource source = RegionSource::Manual;
  // Reserved for free-form outlines; carried through unchanged.
  std::vector<Point2> polygon;
  friend bool operator==(const RegionPair&, const RegionPair&) = default;
};

struct PaletteSample {
  std::string slide;  // slide id the pixel was taken from
  std::string label;  // stain label, e.g. "H" or "DAB"
  std::int64_t x = 0;
  std::int64_t y = 0;
  std::array<std::uint8_t, 3> rgb{};
  friend bool operator==(const PaletteSample&, const PaletteSample&) = default;
};

/// Per slide-pair annotation document. The region file read by the
/// registration pipeline and the document stored by the annotation server
/// are the same format.
struct AnnotationDocument {
  std::string pair_id;
  std::string fixed_slide;
  std::string moving_slide;
  std::int64_t revision = 0;
  std::vector<RegionPair> regions;
  std::vector<PaletteSample> palette_samples;
  friend bool operator==(const AnnotationDocument&, const AnnotationDocument&) = default;
};

struct FieldError {
  std::string field;  // e.g. "regions[1].landmarks[3].fixed"
  std::string message;
};

/// Throws Error(Format) on malformed text or missing fields.
AnnotationDocument parse_annotations(const std::string& text);
/// Canonical form: sorted keys, fixed indentation, trailing newline.
std::string format_annotations(const AnnotationDocument& doc);
AnnotationDocument load_annotations(const std::filesystem::path& path);
/// Writes via a temporary file and rename.
void save_annotations(const AnnotationDocument& doc, const std::filesystem::path& path);

struct SlideBounds {
  std::string slide_id;
  std::int64_t width = 0;
  std::int64_t height = 0;
};

/// Checks rects against slide bounds, landmark containment, names and slide
/// ids. Returns one entry per violation; empty means valid.
std::vector<FieldError> validate_annotations(const AnnotationDocument& doc,
                                             const SlideBounds& fixed,
                                             const SlideBounds& moving);

/// Joins field errors into one message.
std::string describe(const std::vector<FieldError>& errors);

}  // namespace wsireg
