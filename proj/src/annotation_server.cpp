#include "wsireg/annotation_server.hpp"

#include <charconv>
#include <regex>
#include <shared_mutex>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "wsireg/tile_codec.hpp"

namespace wsireg {

using nlohmann::json;
namespace fs = std::filesystem;

AnnotationStore::AnnotationStore(fs::path dir) : dir_(std::move(dir)) {
  fs::create_directories(dir_);
}

fs::path AnnotationStore::document_path(const std::string& pair_id) const {
  return dir_ / (pair_id + ".json");
}

AnnotationDocument AnnotationStore::get(const SlidePair& pair) const {
  const fs::path p = document_path(pair.id);
  if (fs::exists(p)) return load_annotations(p);
  AnnotationDocument doc;
  doc.pair_id = pair.id;
  doc.fixed_slide = pair.fixed_slide;
  doc.moving_slide = pair.moving_slide;
  return doc;
}

std::mutex& AnnotationStore::pair_mutex(const std::string& pair_id) {
  std::lock_guard lock(table_mutex_);
  auto& m = pair_mutexes_[pair_id];
  if (!m) m = std::make_unique<std::mutex>();
  return *m;
}

PutResult AnnotationStore::put(const SlidePair& pair, AnnotationDocument doc,
                               std::uint64_t expected_revision, const SlideBounds& fixed,
                               const SlideBounds& moving) {
  std::lock_guard lock(pair_mutex(pair.id));
  PutResult r;
  const auto current = static_cast<std::uint64_t>(get(pair).revision);
  if (current != expected_revision) {
    r.status = PutResult::Status::Conflict;
    r.revision = current;
    return r;
  }
  if (doc.pair_id != pair.id)
    r.errors.push_back({"pair_id", "'" + doc.pair_id + "' does not match pair '" + pair.id + "'"});
  doc.revision = static_cast<std::int64_t>(expected_revision);
  const auto more = validate_annotations(doc, fixed, moving);
  r.errors.insert(r.errors.end(), more.begin(), more.end());
  if (!r.errors.empty()) {
    r.status = PutResult::Status::Invalid;
    r.revision = current;
    return r;
  }
  doc.revision = static_cast<std::int64_t>(expected_revision + 1);
  save_annotations(doc, document_path(pair.id));
  r.revision = expected_revision + 1;
  return r;
}

int pyramid_level_for_viewer(int viewer_level, int level_count) {
  if (viewer_level < 0 || viewer_level >= level_count) return -1;
  return level_count - 1 - viewer_level;
}

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(2) + "\n", "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}});
}

std::optional<std::int64_t> parse_index(const std::string& s) {
  if (s.empty() || s.size() > 12) return std::nullopt;
  std::int64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || v < 0) return std::nullopt;
  return v;
}

std::string etag_of(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (auto b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return "\"" + std::string(buf) + "\"";
}

std::string file_text(const fs::path& p) {
  const auto bytes = read_file_bytes(p);
  return {bytes.begin(), bytes.end()};
}

json field_errors(const std::vector<FieldError>& errors) {
  json arr = json::array();
  for (const auto& e : errors) arr.push_back({{"field", e.field}, {"message", e.message}});
  return arr;
}

SlideBounds bounds_of(const std::string& id, const TiledPyramid& p) {
  return {id, p.info().width, p.info().height};
}

}  // namespace

struct AnnotationServer::Impl {
  explicit Impl(fs::path dir) : store(std::move(dir)) {}

  AnnotationStore store;
  mutable std::shared_mutex registry;
  std::map<std::string, TiledPyramid> slides;
  std::map<std::string, SlidePair> pairs;
  httplib::Server server;
  std::thread thread;

  std::optional<TiledPyramid> slide(const std::string& id) const {
    std::shared_lock lock(registry);
    const auto it = slides.find(id);
    if (it == slides.end()) return std::nullopt;
    return it->second;
  }

  std::optional<SlidePair> pair(const std::string& id) const {
    std::shared_lock lock(registry);
    const auto it = pairs.find(id);
    if (it == pairs.end()) return std::nullopt;
    return it->second;
  }

  void routes();
  void tile(const httplib::Request& req, httplib::Response& res) const;
  void put_annotations(const httplib::Request& req, httplib::Response& res);
};

void AnnotationServer::Impl::routes() {
  server.set_exception_handler([](const httplib::Request&, httplib::Response& res,
                                  std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    } catch (...) {
      send_error(res, 500, "internal error");
    }
  });

  server.Get("/slides", [this](const httplib::Request&, httplib::Response& res) {
    std::shared_lock lock(registry);
    json ids = json::array();
    for (const auto& [id, _] : slides) ids.push_back(id);
    send_json(res, 200, {{"slides", ids}});
  });

  server.Get(R"(/slides/([^/]+)/info)", [this](const httplib::Request& req, httplib::Response& res) {
    const auto s = slide(req.matches[1]);
    if (!s) return send_error(res, 404, "unknown slide '" + std::string(req.matches[1]) + "'");
    res.set_content(file_text(s->manifest_path()), "application/json");
  });

  server.Get(R"(/slides/([^/]+)/tiles/([^/]+)/([^/]+))",
             [this](const httplib::Request& req, httplib::Response& res) { tile(req, res); });

  server.Get("/pairs", [this](const httplib::Request&, httplib::Response& res) {
    std::shared_lock lock(registry);
    json ids = json::array();
    for (const auto& [id, _] : pairs) ids.push_back(id);
    send_json(res, 200, {{"pairs", ids}});
  });

  server.Get(R"(/pairs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const auto p = pair(req.matches[1]);
    if (!p) return send_error(res, 404, "unknown pair '" + std::string(req.matches[1]) + "'");
    const auto f = slide(p->fixed_slide);
    const auto m = slide(p->moving_slide);
    send_json(res, 200,
              {{"pair_id", p->id},
               {"fixed", {{"slide_id", p->fixed_slide}, {"info", json::parse(file_text(f->manifest_path()))}}},
               {"moving",
                {{"slide_id", p->moving_slide}, {"info", json::parse(file_text(m->manifest_path()))}}}});
  });

  server.Get(R"(/pairs/([^/]+)/annotations)",
             [this](const httplib::Request& req, httplib::Response& res) {
               const auto p = pair(req.matches[1]);
               if (!p)
                 return send_error(res, 404, "unknown pair '" + std::string(req.matches[1]) + "'");
               const auto doc = store.get(*p);
               res.set_header("ETag", "\"" + std::to_string(doc.revision) + "\"");
               res.set_header("Cache-Control", "no-store");
               res.set_content(format_annotations(doc), "application/json");
             });

  server.Put(R"(/pairs/([^/]+)/annotations)",
             [this](const httplib::Request& req, httplib::Response& res) {
               put_annotations(req, res);
             });
}

void AnnotationServer::Impl::tile(const httplib::Request& req, httplib::Response& res) const {
  const auto s = slide(req.matches[1]);
  if (!s) return send_error(res, 404, "unknown slide '" + std::string(req.matches[1]) + "'");
  const auto level = parse_index(req.matches[2]);
  static const std::regex cell(R"((\d+)_(\d+)(\.(png|tiff|tif))?)");
  std::smatch m;
  const std::string name = req.matches[3];
  if (!level || !std::regex_match(name, m, cell))
    return send_error(res, 400, "malformed tile coordinates '" + std::string(req.matches[2]) + "/" +
                                    name + "'");
  const auto col = parse_index(m[1]);
  const auto row = parse_index(m[2]);
  if (!col || !row) return send_error(res, 400, "malformed tile coordinates '" + name + "'");
  if (*level > 1000) return send_error(res, 404, "no such level");
  const int lvl = pyramid_level_for_viewer(static_cast<int>(*level), s->level_count());
  if (lvl < 0) return send_error(res, 404, "level beyond pyramid depth");
  const TileGrid& g = s->grid(lvl);
  if (*col >= g.cols() || *row >= g.rows()) return send_error(res, 404, "no such tile");
  const fs::path path = s->tile_path(lvl, *col, *row);
  if (!fs::exists(path)) return send_error(res, 404, "tile file missing");
  const auto bytes = read_file_bytes(path);
  const std::string etag = etag_of(bytes);
  res.set_header("Cache-Control", "public, max-age=31536000, immutable");
  res.set_header("ETag", etag);
  if (req.get_header_value("If-None-Match") == etag) {
    res.status = 304;
    return;
  }
  const char* type = s->info().sample_type == SampleType::UInt8 ? "image/png" : "image/tiff";
  res.set_content(std::string(bytes.begin(), bytes.end()), type);
}

void AnnotationServer::Impl::put_annotations(const httplib::Request& req, httplib::Response& res) {
  const auto p = pair(req.matches[1]);
  if (!p) return send_error(res, 404, "unknown pair '" + std::string(req.matches[1]) + "'");
  if (!json::accept(req.body)) return send_error(res, 400, "body is not valid JSON");
  AnnotationDocument doc;
  try {
    doc = parse_annotations(req.body);
  } catch (const Error& e) {
    return send_json(res, 422, {{"errors", field_errors({{"document", e.what()}})}});
  }

  std::optional<std::uint64_t> expected;
  auto parse_revision = [&](std::string v) -> bool {
    if (v.rfind("W/", 0) == 0) v = v.substr(2);
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"') v = v.substr(1, v.size() - 2);
    const auto n = parse_index(v);
    if (!n) return false;
    expected = static_cast<std::uint64_t>(*n);
    return true;
  };
  if (req.has_header("If-Match")) {
    if (!parse_revision(req.get_header_value("If-Match")))
      return send_error(res, 400, "If-Match must carry a revision number");
  } else if (req.has_param("expected_revision")) {
    if (!parse_revision(req.get_param_value("expected_revision")))
      return send_error(res, 400, "expected_revision must be a non-negative integer");
  } else {
    if (doc.revision < 0)
      return send_json(res, 422, {{"errors", field_errors({{"revision", "must be >= 0"}})}});
    expected = static_cast<std::uint64_t>(doc.revision);
  }

  const auto f = slide(p->fixed_slide);
  const auto m = slide(p->moving_slide);
  const PutResult r = store.put(*p, std::move(doc), *expected, bounds_of(p->fixed_slide, *f),
                                bounds_of(p->moving_slide, *m));
  switch (r.status) {
    case PutResult::Status::Conflict:
      return send_json(res, 409, {{"error", "revision conflict"},
                                  {"expected_revision", *expected},
                                  {"current_revision", r.revision}});
    case PutResult::Status::Invalid:
      return send_json(res, 422, {{"errors", field_errors(r.errors)}});
    case PutResult::Status::Accepted:
      res.set_header("ETag", "\"" + std::to_string(r.revision) + "\"");
      return send_json(res, 200, {{"pair_id", p->id}, {"revision", r.revision}});
  }
}

AnnotationServer::AnnotationServer(fs::path annotations_dir)
    : impl_(std::make_unique<Impl>(std::move(annotations_dir))) {
  impl_->routes();
}

AnnotationServer::~AnnotationServer() { stop(); }

void AnnotationServer::add_slide(const TiledPyramid& pyramid, const std::string& id) {
  const std::string key = id.empty() ? pyramid.info().slide_id : id;
  if (key.empty() || key.find('/') != std::string::npos)
    throw Error(ErrorKind::InvalidArgument, "slide id '" + key + "' is not usable in a URL");
  std::unique_lock lock(impl_->registry);
  if (impl_->slides.count(key))
    throw Error(ErrorKind::InvalidArgument, "slide '" + key + "' registered twice");
  impl_->slides.emplace(key, pyramid);
}

void AnnotationServer::add_pair(const SlidePair& pair) {
  std::unique_lock lock(impl_->registry);
  if (pair.id.empty() || pair.id.find('/') != std::string::npos)
    throw Error(ErrorKind::InvalidArgument, "pair id '" + pair.id + "' is not usable in a URL");
  for (const auto* s : {&pair.fixed_slide, &pair.moving_slide})
    if (!impl_->slides.count(*s))
      throw Error(ErrorKind::InvalidArgument,
                  "pair '" + pair.id + "' names unknown slide '" + *s + "'");
  impl_->pairs[pair.id] = pair;
}

int AnnotationServer::adopt_stored_pairs() {
  int added = 0;
  const fs::path dir = impl_->store.document_path("x").parent_path();
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    AnnotationDocument doc;
    try {
      doc = load_annotations(f);
    } catch (const Error&) {
      continue;
    }
    if (doc.pair_id != f.stem().string()) continue;
    {
      std::shared_lock lock(impl_->registry);
      if (impl_->pairs.count(doc.pair_id) || !impl_->slides.count(doc.fixed_slide) ||
          !impl_->slides.count(doc.moving_slide))
        continue;
    }
    add_pair({doc.pair_id, doc.fixed_slide, doc.moving_slide});
    ++added;
  }
  return added;
}

std::vector<std::string> AnnotationServer::slide_ids() const {
  std::shared_lock lock(impl_->registry);
  std::vector<std::string> out;
  for (const auto& [id, _] : impl_->slides) out.push_back(id);
  return out;
}

std::vector<std::string> AnnotationServer::pair_ids() const {
  std::shared_lock lock(impl_->registry);
  std::vector<std::string> out;
  for (const auto& [id, _] : impl_->pairs) out.push_back(id);
  return out;
}

int AnnotationServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0)
    throw Error(ErrorKind::Io, "cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void AnnotationServer::run(const std::string& host, int port) {
  if (!impl_->server.listen(host, port))
    throw Error(ErrorKind::Io, "cannot serve on " + host + ":" + std::to_string(port));
}

void AnnotationServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace wsireg
