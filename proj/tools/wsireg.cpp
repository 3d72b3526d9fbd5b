// wsireg command-line entry point. Parameters resolve as: built-in defaults,
// then --config file, then explicit flags.

#include <csignal>
#include <iostream>
#include <optional>
#include <fstream>
#include <sstream>

#include <CLI11.hpp>

#include "wsireg/annotation_server.hpp"
#include "wsireg/pipeline.hpp"
#include "wsireg/synthgen.hpp"

namespace {

using namespace wsireg;
namespace fs = std::filesystem;

// Flag values captured before the config file is known.
struct Overrides {
  std::string config;
  std::optional<int> workers, tile_size, bins, max_keypoints, analysis_level;
  std::optional<double> pct, gamma, ratio, inlier_tol;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> factor;
  std::optional<std::string> mode, method, palette_file;
  bool default_palette = false;
  bool allow_holes = false;

  PipelineConfig resolve() const {
    PipelineConfig c;
    if (!config.empty()) c = load_config(config, c);
    if (workers) c.workers = *workers;
    if (tile_size) c.tile_size = *tile_size;
    if (bins) c.bins = *bins;
    if (max_keypoints) c.max_keypoints = *max_keypoints;
    if (analysis_level) c.analysis_level = *analysis_level;
    if (pct) c.pct = *pct;
    if (gamma) c.gamma = *gamma;
    if (ratio) c.ratio = *ratio;
    if (inlier_tol) c.inlier_tol_px = *inlier_tol;
    if (seed) c.seed = *seed;
    if (factor) c.factor = *factor;
    if (mode) c.mode = registration_scope_from_string(*mode);
    if (method) c.method = registration_method_from_string(*method);
    if (palette_file) c.paths.palette = *palette_file;
    if (default_palette) c.default_palette = true;
    if (allow_holes) c.allow_holes = true;
    validate(c);
    return c;
  }
};

template <std::size_t N>
std::array<double, N> parse_list(const std::string& text, const std::string& flag) {
  std::array<double, N> out{};
  std::stringstream ss(text);
  std::string item;
  std::size_t n = 0;
  while (std::getline(ss, item, ',')) {
    if (n == N) break;
    try {
      std::size_t used = 0;
      out[n] = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error(ErrorKind::InvalidArgument, flag + ": '" + item + "' is not a number");
    }
    ++n;
  }
  if (n != N || std::getline(ss, item, ','))
    throw Error(ErrorKind::InvalidArgument,
                flag + " needs exactly " + std::to_string(N) + " comma-separated values");
  return out;
}

void warn(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

AnnotationServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Piecewise registration and colocalization of tiled slide images"};
  app.require_subcommand(1);
  Overrides ov;

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", ov.config, "JSON config file")->check(CLI::ExistingFile);
    cmd->add_option("--workers", ov.workers, "Worker threads (0 = all cores)");
  };

  // ingest
  std::string ingest_in, ingest_out;
  std::optional<int> ingest_factor;
  auto* ingest = app.add_subcommand("ingest", "Convert an image file (or a directory of them) to tiled pyramids");
  ingest->add_option("input", ingest_in, "Image file or directory")->required();
  ingest->add_option("output", ingest_out, "Output pyramid directory")->required();
  ingest->add_option("--tile-size", ov.tile_size, "Tile edge in pixels");
  ingest->add_option("--factor", ingest_factor, "Downsample factor between pyramid levels");
  common(ingest);

  // deconvolve
  std::string dec_slide, dec_out;
  auto* dec = app.add_subcommand("deconvolve", "Split an RGB slide into stretched H and DAB pyramids");
  dec->add_option("slide", dec_slide, "RGB pyramid (directory or manifest)")->required();
  dec->add_option("output", dec_out, "Output directory (gets H/ and DAB/)")->required();
  dec->add_option("--palette-file", ov.palette_file,
                  "Stain-vector file or annotation document with H/DAB palette samples");
  dec->add_flag("--default-palette", ov.default_palette, "Use reference H/DAB vectors");
  dec->add_option("--pct", ov.pct, "Stretch percentile");
  dec->add_option("--gamma", ov.gamma, "Gamma");
  dec->add_option("--tile-size", ov.tile_size, "Tile edge of the outputs");
  common(dec);

  // register
  std::string reg_fixed, reg_moving, reg_regions, reg_out, reg_truth;
  std::vector<std::string> reg_apply;
  bool dump_features = false;
  auto* reg = app.add_subcommand("register", "Register a moving H pyramid onto a fixed one");
  reg->add_option("fixed", reg_fixed, "Fixed H pyramid")->required();
  reg->add_option("moving", reg_moving, "Moving H pyramid")->required();
  reg->add_option("regions", reg_regions, "Region/landmark annotation document")->required();
  reg->add_option("output", reg_out, "Output directory")->required();
  reg->add_option("--mode", ov.mode, "global or regional")->check(CLI::IsMember({"global", "regional"}));
  reg->add_option("--method", ov.method, "manual or feature")
      ->check(CLI::IsMember({"manual", "feature", "feature-based"}));
  reg->add_option("--ratio", ov.ratio, "Descriptor ratio test");
  reg->add_option("--inlier-tol", ov.inlier_tol, "RANSAC inlier tolerance (level-0 px)");
  reg->add_option("--seed", ov.seed, "RANSAC seed");
  reg->add_option("--max-keypoints", ov.max_keypoints, "Keypoints kept per region");
  reg->add_option("--analysis-level", ov.analysis_level, "Pyramid level for feature detection");
  reg->add_flag("--allow-holes", ov.allow_holes, "Leave uncovered canvas empty instead of failing");
  reg->add_option("--apply-to", reg_apply, "Further moving pyramids to warp with the same transforms");
  reg->add_flag("--dump-features", dump_features, "Write keypoints and matches per region");
  reg->add_option("--ground-truth", reg_truth, "Synthetic ground-truth file for validation-grid errors")
      ->check(CLI::ExistingFile);
  reg->add_option("--tile-size", ov.tile_size, "Tile edge of the registered pyramid");
  common(reg);

  // evaluate
  std::string ev_fixed, ev_reg, ev_out, ev_thresholds;
  auto* ev = app.add_subcommand("evaluate", "Colocalization report, RCM and 2D histogram");
  ev->add_option("fixed", ev_fixed, "Fixed H pyramid")->required();
  ev->add_option("registered", ev_reg, "Registered H pyramid")->required();
  ev->add_option("output", ev_out, "Output directory")->required();
  ev->add_option("--factor", ov.factor, "RCM subsampling factor");
  ev->add_option("--bins", ov.bins, "2D histogram bins per axis");
  ev->add_option("--thresholds", ev_thresholds, "Manual thresholds t_a,t_b instead of Costes");
  common(ev);

  // cqm
  std::vector<std::string> cqm_in;
  std::string cqm_thresholds, cqm_reference;
  auto* cqm = app.add_subcommand("cqm", "Colocalization quantification map of three DAB pyramids");
  // CLI11 fills a fixed-count positional greedily, so the output directory
  // rides along as the fourth value.
  cqm->add_option("channels_then_output", cqm_in, "Three registered DAB pyramids, then the output directory")
      ->required()
      ->expected(4);
  cqm->add_option("--thresholds", cqm_thresholds, "Per-channel thresholds t1,t2,t3");
  cqm->add_option("--reference", cqm_reference, "H pyramid for Costes-derived thresholds");
  cqm->add_option("--tile-size", ov.tile_size, "Tile edge of the map pyramid");
  common(cqm);

  // synth
  std::string syn_out;
  SyntheticScene scene;
  bool triple = false;
  std::vector<int> tears, folds;
  auto* syn = app.add_subcommand("synth", "Generate a synthetic slide pair or triple with ground truth");
  syn->add_option("output", syn_out, "Output directory")->required();
  syn->add_option("--seed", scene.seed, "Scene seed");
  syn->add_option("--width", scene.width, "Canvas width");
  syn->add_option("--height", scene.height, "Canvas height");
  syn->add_option("--grid-cols", scene.grid_cols, "Region columns");
  syn->add_option("--grid-rows", scene.grid_rows, "Region rows");
  syn->add_option("--max-translation", scene.max_translation_px, "Largest region translation (px)");
  syn->add_option("--max-rotation", scene.max_rotation_deg, "Largest region rotation (degrees)");
  syn->add_option("--noise", scene.noise_amplitude, "Per-pixel RGB noise amplitude");
  syn->add_option("--landmarks", scene.landmarks_per_region, "Landmark pairs per region");
  syn->add_option("--tear", tears, "Region index torn on the first moving slide");
  syn->add_option("--fold", folds, "Region index folded on the first moving slide");
  syn->add_flag("--triple", triple, "Two moving slides instead of one");
  syn->add_option("--tile-size", scene.tile_size, "Tile edge");
  common(syn);

  // serve
  std::vector<std::string> srv_slides, srv_pairs;
  std::string srv_dir = "annotations", srv_host = "127.0.0.1";
  int srv_port = 8080;
  auto* srv = app.add_subcommand("serve", "Serve tiles and annotation documents over HTTP");
  srv->add_option("--slide", srv_slides, "Pyramid to serve (repeatable)")->required();
  srv->add_option("--pair", srv_pairs, "Pair as id=fixed_id,moving_id (repeatable)");
  srv->add_option("--annotations", srv_dir, "Annotation document directory");
  srv->add_option("--host", srv_host, "Bind address");
  srv->add_option("--port", srv_port, "Port (0 picks a free one)");

  // show-config
  auto* show = app.add_subcommand("show-config", "Print the resolved configuration");
  show->add_option("--pct", ov.pct);
  show->add_option("--gamma", ov.gamma);
  show->add_option("--ratio", ov.ratio);
  show->add_option("--inlier-tol", ov.inlier_tol);
  show->add_option("--seed", ov.seed);
  show->add_option("--factor", ov.factor);
  show->add_option("--bins", ov.bins);
  show->add_option("--mode", ov.mode);
  show->add_option("--method", ov.method);
  show->add_flag("--allow-holes", ov.allow_holes);
  show->add_option("--palette-file", ov.palette_file);
  show->add_flag("--default-palette", ov.default_palette);
  common(show);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*ingest) {
      PipelineConfig c = ov.resolve();
      if (ingest_factor) c.downsample_factor = *ingest_factor;
      validate(c);
      for (const auto& m : wsireg::ingest(ingest_in, ingest_out, c)) std::cout << m.string() << "\n";
    } else if (*dec) {
      const PipelineConfig c = ov.resolve();
      const StainVectors sv = resolve_palette(c);
      const auto out = run_deconvolve(open_pyramid(dec_slide), sv, dec_out, c);
      std::cout << out.h.manifest_path().string() << "\n" << out.dab.manifest_path().string() << "\n";
    } else if (*reg) {
      const PipelineConfig c = ov.resolve();
      RegisterExtras extras;
      for (const auto& a : reg_apply) extras.apply_to.emplace_back(a);
      extras.dump_features = dump_features;
      if (!reg_truth.empty()) {
        std::ifstream in(reg_truth);
        std::stringstream ss;
        ss << in.rdbuf();
        extras.ground_truth = parse_ground_truth(ss.str());
      }
      const auto fixed = open_pyramid(reg_fixed);
      const auto moving = open_pyramid(reg_moving);
      const auto doc = load_annotations(reg_regions);
      const auto out = run_register(fixed, moving, doc, c, reg_out, extras);
      warn(out.warnings);
      std::cout << out.report_path.string() << "\n";
      if (out.registered) std::cout << out.registered->manifest_path().string() << "\n";
    } else if (*ev) {
      const PipelineConfig c = ov.resolve();
      std::optional<std::array<double, 2>> t;
      if (!ev_thresholds.empty()) t = parse_list<2>(ev_thresholds, "--thresholds");
      const auto out = run_evaluate(open_pyramid(ev_fixed), open_pyramid(ev_reg), c, ev_out, t);
      if (out.report.thresholds.at_floor)
        std::cerr << "warning: Costes search reached its floor without a non-positive PCC\n";
      std::ifstream in(out.report_path);
      std::cout << in.rdbuf();
    } else if (*cqm) {
      const PipelineConfig c = ov.resolve();
      std::optional<std::array<double, 3>> t;
      if (!cqm_thresholds.empty()) t = parse_list<3>(cqm_thresholds, "--thresholds");
      const auto a = open_pyramid(cqm_in[0]), b = open_pyramid(cqm_in[1]), d = open_pyramid(cqm_in[2]);
      std::optional<TiledPyramid> ref;
      if (!cqm_reference.empty()) ref = open_pyramid(cqm_reference);
      const auto out = run_cqm({&a, &b, &d}, c, cqm_in[3], t, ref ? &*ref : nullptr);
      std::ifstream in(out.sidecar_path);
      std::cout << in.rdbuf();
    } else if (*syn) {
      const PipelineConfig c = ov.resolve();
      for (int r : tears) scene.artifacts.push_back({ArtifactKind::Tear, 1, r, 0.3});
      for (int r : folds) scene.artifacts.push_back({ArtifactKind::Fold, 1, r, 0.3});
      const auto set = triple ? generate_triple(scene, syn_out, c.resolved_workers())
                              : generate_pair(scene, syn_out, c.resolved_workers());
      for (const auto& s : set.slides) std::cout << s.manifest_path().string() << "\n";
      for (const auto& f : set.region_files) std::cout << f.string() << "\n";
      std::cout << set.ground_truth_file.string() << "\n";
    } else if (*srv) {
      AnnotationServer server(srv_dir);
      for (const auto& s : srv_slides) server.add_slide(open_pyramid(s));
      for (const auto& p : srv_pairs) {
        const auto eq = p.find('=');
        const auto comma = p.find(',', eq == std::string::npos ? 0 : eq);
        if (eq == std::string::npos || comma == std::string::npos)
          throw Error(ErrorKind::InvalidArgument, "--pair expects id=fixed_id,moving_id, got '" + p + "'");
        server.add_pair({p.substr(0, eq), p.substr(eq + 1, comma - eq - 1), p.substr(comma + 1)});
      }
      server.adopt_stored_pairs();
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "serving " << server.slide_ids().size() << " slides, " << server.pair_ids().size()
                << " pairs on " << srv_host << ":" << srv_port << "\n";
      server.run(srv_host, srv_port);
      g_server = nullptr;
    } else if (*show) {
      std::cout << format_config(ov.resolve());
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
