#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "wsireg/annotations.hpp"
#include "wsireg/pyramid.hpp"

namespace wsireg {

struct SlidePair {
  std::string id;
  std::string fixed_slide;
  std::string moving_slide;
};

/// Outcome of a conditional write.
struct PutResult {
  enum class Status { Accepted, Conflict, Invalid };
  Status status = Status::Accepted;
  std::uint64_t revision = 0;  // stored revision after the call
  std::vector<FieldError> errors;
};

/// One annotation document per pair at `<dir>/<pair_id>.json`, replaced
/// atomically. Writes to one pair are serialized; reads never block on
/// other pairs.
class AnnotationStore {
 public:
  explicit AnnotationStore(std::filesystem::path dir);

  std::filesystem::path document_path(const std::string& pair_id) const;

  /// Stored document, or an empty revision-0 document for a fresh pair.
  AnnotationDocument get(const SlidePair& pair) const;

  /// Accepts `doc` only if the stored revision equals `expected_revision`
  /// and the document validates against both slides. On acceptance the
  /// stored revision is expected_revision + 1.
  PutResult put(const SlidePair& pair, AnnotationDocument doc, std::uint64_t expected_revision,
                const SlideBounds& fixed, const SlideBounds& moving);

 private:
  std::mutex& pair_mutex(const std::string& pair_id);

  std::filesystem::path dir_;
  std::mutex table_mutex_;
  std::map<std::string, std::unique_ptr<std::mutex>> pair_mutexes_;
};

/// Viewer level numbering runs coarse to fine: viewer level v is pyramid
/// level (level_count - 1 - v).
int pyramid_level_for_viewer(int viewer_level, int level_count);

/// HTTP front end:
///   GET /slides                              slide ids
///   GET /slides/{id}/info                    manifest, verbatim
///   GET /slides/{id}/tiles/{level}/{col}_{row}[.ext]
///   GET /pairs                               pair ids
///   GET /pairs/{id}                          both slide manifests
///   GET /pairs/{id}/annotations              document; ETag = revision
///   PUT /pairs/{id}/annotations              expected revision from If-Match,
///                                            ?expected_revision=, or the body's
///                                            revision field, in that order
class AnnotationServer {
 public:
  explicit AnnotationServer(std::filesystem::path annotations_dir);
  ~AnnotationServer();
  AnnotationServer(const AnnotationServer&) = delete;
  AnnotationServer& operator=(const AnnotationServer&) = delete;

  /// Registers a slide under its manifest slide id (or `id` when given).
  void add_slide(const TiledPyramid& pyramid, const std::string& id = {});
  /// Both slides must already be registered.
  void add_pair(const SlidePair& pair);
  /// Registers pairs named by documents already present in the store whose
  /// slides are known. Returns how many were added.
  int adopt_stored_pairs();

  std::vector<std::string> slide_ids() const;
  std::vector<std::string> pair_ids() const;

  /// Binds to `port` (0 picks a free one) and serves on a background
  /// thread. Returns the bound port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  /// Blocks serving on the calling thread.
  void run(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace wsireg
