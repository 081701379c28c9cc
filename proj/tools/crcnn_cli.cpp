// crcnn: synthetic scenes, background extraction, cascade training, deep
// segmentation, and CDnet-style evaluation from one executable.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "crcnn/checkpoint.hpp"
#include "crcnn/dataset.hpp"
#include "crcnn/eval.hpp"
#include "crcnn/gradcheck.hpp"
#include "crcnn/image.hpp"
#include "crcnn/network.hpp"
#include "crcnn/pipeline.hpp"
#include "crcnn/synth.hpp"
#include "crcnn/threading.hpp"
#include "crcnn/train.hpp"

namespace fs = std::filesystem;
using namespace crcnn;

namespace {

struct GlobalOpts {
  std::uint64_t seed = 0;
  int threads = default_threads();
  bool deterministic = false;

  int effective_threads() const { return deterministic ? 1 : threads; }
};

std::string frame_name(const char* prefix, std::size_t index, const std::string& ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%06zu%s", prefix, index, ext.c_str());
  return buf;
}

struct LoadedPair {
  NetworkSpec bcnn, scnn;
  double mu = 0.0;
  double threshold = 0.8;
};

LoadedPair load_network_pair(const fs::path& bcnn_path, const fs::path& scnn_path) {
  LoadedPair pair;
  LoadedCheckpoint b = load_checkpoint(bcnn_path);
  LoadedCheckpoint s = load_checkpoint(scnn_path);
  if (b.net.name != "bcnn")
    throw DataError(bcnn_path.string() + " is a " + b.net.name + " checkpoint, expected bcnn");
  if (s.net.name != "scnn")
    throw DataError(scnn_path.string() + " is a " + s.net.name + " checkpoint, expected scnn");
  pair.bcnn = std::move(b.net);
  pair.scnn = std::move(s.net);
  pair.mu = b.meta.dataset_mean;
  pair.threshold = b.meta.threshold;
  return pair;
}

// ---------------------------------------------------------------------------

int run_synth(const GlobalOpts& g, const fs::path& out_dir, SceneConfig cfg,
              int object_count, const SceneObject& proto) {
  cfg.seed = g.seed;
  Rng rng(derive_seed(g.seed, "synth.cli"));
  for (int i = 0; i < object_count; ++i) {
    SceneObject obj = proto;
    if (i > 0) {
      // extra objects beyond the prototype get seeded variations
      obj.size = std::max(3, proto.size + rng.below_int(7) - 3);
      obj.vel_y = rng.uniform(-1.5, 1.5);
      obj.vel_x = rng.uniform(-1.5, 1.5);
      obj.intensity = static_cast<std::uint8_t>(40 + rng.below_int(200));
      obj.shape = rng.below_int(2) == 0 ? ObjectShape::rect : ObjectShape::disc;
    }
    cfg.objects.push_back(obj);
  }
  auto sequence = generate(cfg);
  write_cd2014_layout(sequence, out_dir);
  std::cout << "wrote " << sequence.size() << " frames to " << out_dir.string() << "\n";
  return 0;
}

int run_background(const fs::path& data_dir, int first_n, fs::path out_path) {
  VideoPaths video = scan_video_dir(data_dir);
  if (static_cast<int>(video.inputs.size()) < first_n)
    throw DataError("requested first " + std::to_string(first_n) + " frames, found only " +
                    std::to_string(video.inputs.size()));
  std::vector<fs::path> interval(video.inputs.begin(), video.inputs.begin() + first_n);
  Tensor4 bg = compute_background(load_frames(interval));
  Frame out(bg.w(), bg.h());
  for (std::size_t i = 0; i < out.pixels.size(); ++i)
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(bg.data[i] * 255.0));
  if (out_path.empty()) out_path = data_dir / "background.pgm";
  write_pgm(out_path, out);
  std::cout << "wrote " << out_path.string() << "\n";
  return 0;
}

int run_train(const GlobalOpts& g, const fs::path& data_dir, const fs::path& out_dir,
              TrainConfig cfg, const std::string& frames_range,
              const fs::path& resume_bcnn) {
  cfg.seed = g.seed;
  cfg.threads = g.effective_threads();
  cfg.deterministic = g.deterministic;

  if (!frames_range.empty()) {
    // materialize the range by symlinking the selection into a temp view; the
    // trainer itself only understands whole directories
    VideoPaths video = scan_video_dir(data_dir);
    FrameRange::parse(frames_range).apply(video);
    fs::path view = out_dir / "_frames_view";
    fs::remove_all(view);
    fs::create_directories(view / "input");
    fs::create_directories(view / "groundtruth");
    for (std::size_t i = 0; i < video.inputs.size(); ++i) {
      fs::create_symlink(fs::absolute(video.inputs[i]),
                         view / "input" /
                             frame_name("in", i + 1, video.inputs[i].extension().string()));
      if (video.has_gt(i))
        fs::create_symlink(fs::absolute(video.gts[i]),
                           view / "groundtruth" /
                               frame_name("gt", i + 1, video.gts[i].extension().string()));
    }
    if (video.background)
      fs::create_symlink(fs::absolute(*video.background), view / "background.pgm");
    CascadeResult result = train_cascade(view, cfg, out_dir, resume_bcnn);
    fs::remove_all(view);
    std::cout << "bcnn: " << result.bcnn_checkpoint.string() << " ("
              << result.bcnn_report.epochs_run << " epochs)\n"
              << "scnn: " << result.scnn_checkpoint.string() << " ("
              << result.scnn_report.epochs_run << " epochs)\n"
              << "total parameters: " << result.total_parameters << "\n";
    return 0;
  }

  CascadeResult result = train_cascade(data_dir, cfg, out_dir, resume_bcnn);
  std::cout << "bcnn: " << result.bcnn_checkpoint.string() << " ("
            << result.bcnn_report.epochs_run << " epochs)\n"
            << "scnn: " << result.scnn_checkpoint.string() << " ("
            << result.scnn_report.epochs_run << " epochs)\n"
            << "total parameters: " << result.total_parameters << "\n";
  return 0;
}

int run_segment(const GlobalOpts& g, const fs::path& data_dir, const fs::path& bcnn_path,
                const fs::path& scnn_path, const fs::path& out_dir, double threshold,
                const std::string& format, const std::string& frames_range,
                const InferenceOptions& patch_opts) {
  LoadedPair nets = load_network_pair(bcnn_path, scnn_path);
  VideoPaths video = scan_video_dir(data_dir);
  if (!frames_range.empty()) FrameRange::parse(frames_range).apply(video);

  InferenceOptions opts = patch_opts;
  opts.threshold = threshold;
  opts.threads = g.effective_threads();

  fs::create_directories(out_dir);
  const std::string ext = format == "png" ? ".png" : ".pgm";
  for (std::size_t i = 0; i < video.inputs.size(); ++i) {
    Frame frame = read_image_gray(video.inputs[i]);
    Tensor4 f = normalize(frame, nets.mu).tensor;
    Tensor4 prob = infer_probabilities(f, nets.bcnn, nets.scnn, opts);
    BinaryMask mask = binarize(prob, opts.threshold);
    write_mask_image(out_dir / frame_name("bin", i + 1, ext), mask_to_frame(mask));
  }
  std::cout << "wrote " << video.inputs.size() << " masks to " << out_dir.string() << "\n";
  return 0;
}

int run_evaluate(const GlobalOpts& g, const fs::path& data_dir, const fs::path& bcnn_path,
                 const fs::path& scnn_path, double threshold, const fs::path& report_path,
                 const fs::path& csv_path, const fs::path& masks_dir,
                 const std::string& frames_range, const InferenceOptions& patch_opts) {
  LoadedPair nets = load_network_pair(bcnn_path, scnn_path);
  InferenceOptions opts = patch_opts;
  opts.threshold = threshold;
  opts.threads = g.effective_threads();

  auto categories = scan_dataset_root(data_dir);
  nlohmann::json report;
  std::map<std::string, std::vector<Metrics>> metrics_by_category;

  for (auto& [category, videos] : categories) {
    for (auto& [name, video] : videos) {
      if (!frames_range.empty()) FrameRange::parse(frames_range).apply(video);
      std::vector<fs::path> gt_paths;
      std::vector<fs::path> in_paths;
      for (std::size_t i = 0; i < video.inputs.size(); ++i) {
        if (!video.has_gt(i)) continue;  // only annotated frames are scored
        in_paths.push_back(video.inputs[i]);
        gt_paths.push_back(video.gts[i]);
      }
      if (in_paths.empty())
        throw DataError("no annotated frames to evaluate in " + video.dir.string());
      std::vector<Frame> frames = load_frames(in_paths);
      std::vector<Frame> gts = load_frames(gt_paths);
      VideoReport vr = evaluate_video(frames, gts, nets.bcnn, nets.scnn, nets.mu, opts);
      report[category][name] = video_report_json(vr);
      metrics_by_category[category].push_back(vr.pooled_metrics);

      if (!masks_dir.empty()) {
        const fs::path dir = masks_dir / category / name;
        fs::create_directories(dir);
        for (std::size_t i = 0; i < frames.size(); ++i) {
          Tensor4 f = normalize(frames[i], nets.mu).tensor;
          BinaryMask mask =
              binarize(infer_probabilities(f, nets.bcnn, nets.scnn, opts), opts.threshold);
          write_mask_image(dir / frame_name("bin", i + 1, ".pgm"), mask_to_frame(mask));
        }
      }
    }
  }

  AggregateReport agg = aggregate(metrics_by_category);
  nlohmann::json summary;
  for (const auto& row : agg.categories)
    summary[row.name] = {{"precision", row.m.precision},
                         {"recall", row.m.recall},
                         {"f_measure", row.m.f_measure},
                         {"pwc", row.m.pwc},
                         {"videos", row.videos}};
  summary["overall"] = {{"precision", agg.overall.precision},
                        {"recall", agg.overall.recall},
                        {"f_measure", agg.overall.f_measure},
                        {"pwc", agg.overall.pwc}};
  report["summary"] = summary;

  std::ofstream out(report_path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + report_path.string());
  out << report.dump(2) << "\n";
  if (!csv_path.empty()) write_summary_csv(csv_path, agg);

  std::printf("overall: precision %.4f recall %.4f F %.4f PWC %.4f\n",
              agg.overall.precision, agg.overall.recall, agg.overall.f_measure,
              agg.overall.pwc);
  return 0;
}

int run_params(const NetShape& shape) {
  NetworkSpec bcnn = build_bcnn<float>(0, shape);
  NetworkSpec scnn = build_scnn<float>(0, shape);
  const std::size_t nb = count_parameters(bcnn), ns = count_parameters(scnn);
  std::cout << "bcnn " << nb << "\nscnn " << ns << "\ntotal " << nb + ns << "\n";
  return 0;
}

int run_gradcheck(const GlobalOpts& g, int samples) {
  GradCheckReport report = run_gradient_checks(g.seed, samples, g.effective_threads());
  for (const auto& c : report.cases) {
    std::printf("%-28s max rel err %.3e  (%zu checks", c.name.c_str(), c.max_rel_err,
                c.checks);
    if (c.skipped) std::printf(", %zu non-smooth skips", c.skipped);
    std::printf(")\n");
  }
  std::printf("max relative error %.3e\n", report.max_rel_err);
  if (!report.passed()) {
    std::cerr << "gradient check failed (tolerance 1e-4)\n";
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator_for_large_tensors();

  CLI::App app{"cascade-residual video segmentation"};
  app.require_subcommand(1);
  app.set_config("--config")->description("key=value config file (flags win)");

  GlobalOpts g;
  app.add_option("--seed", g.seed, "global RNG seed")->capture_default_str();
  app.add_option("--threads", g.threads, "worker threads for tensor ops")
      ->capture_default_str();
  app.add_flag("--deterministic", g.deterministic,
               "single-threaded numerics, reproducible artifacts");

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic labeled video");
  fs::path synth_out;
  SceneConfig scfg;
  SceneObject sobj;
  int object_count = 1;
  std::string bg_kind = "textured";
  std::string obj_shape = "rect";
  std::vector<double> obj_speed{1.0, 1.0};
  std::vector<double> obj_start;
  std::vector<int> shadow_offset{3, 3};
  synth->add_option("--out", synth_out, "output dataset directory")->required();
  synth->add_option("--width", scfg.width)->capture_default_str();
  synth->add_option("--height", scfg.height)->capture_default_str();
  synth->add_option("--frames", scfg.frame_count, "frame count")->capture_default_str();
  synth->add_option("--background", bg_kind, "static|textured|noise")
      ->check(CLI::IsMember({"static", "textured", "noise"}))
      ->capture_default_str();
  synth->add_option("--noise-sigma", scfg.noise_sigma, "noise background std dev")
      ->capture_default_str();
  synth->add_option("--texture-scale", scfg.texture_scale, "texture pattern amplitude scale")
      ->capture_default_str();
  synth->add_option("--object-count", object_count)->capture_default_str();
  synth->add_option("--object-shape", obj_shape, "rect|disc")
      ->check(CLI::IsMember({"rect", "disc"}))
      ->capture_default_str();
  synth->add_option("--object-size", sobj.size)->capture_default_str();
  synth->add_option("--object-speed", obj_speed, "vy vx in px/frame")->expected(2);
  synth->add_option("--object-start", obj_start, "y x top-left (default seeded)")
      ->expected(2);
  int obj_intensity = 230;
  synth->add_option("--object-intensity", obj_intensity)->capture_default_str();
  bool shadow = false;
  synth->add_flag("--shadow", shadow, "cast labeled shadows");
  synth->add_option("--shadow-offset", shadow_offset, "dy dx")->expected(2);
  synth->add_option("--shadow-attenuation", sobj.shadow_attenuation)->capture_default_str();
  synth->add_option("--jitter", scfg.jitter_amplitude, "background jitter amplitude, px")
      ->capture_default_str();
  synth->add_option("--drift", scfg.illumination_drift, "intensity delta per frame")
      ->capture_default_str();

  // background
  auto* background = app.add_subcommand("background", "median background image");
  fs::path bg_data, bg_out;
  int first_n = 100;
  background->add_option("--data", bg_data, "video directory (CD2014 layout)")
      ->required()
      ->envname("CRCNN_DATA_ROOT");
  background->add_option("--first-n", first_n, "frames in the median interval")
      ->capture_default_str();
  background->add_option("--out", bg_out, "output PGM (default <data>/background.pgm)");

  // train
  auto* train = app.add_subcommand("train", "train the cascade on a video");
  fs::path train_data, train_out, resume_bcnn;
  TrainConfig tcfg;
  std::string train_frames;
  train->add_option("--data", train_data, "video directory (CD2014 layout)")
      ->required()
      ->envname("CRCNN_DATA_ROOT");
  train->add_option("--out", train_out, "output directory for checkpoints + report.json")
      ->required();
  train->add_option("--patch-size", tcfg.patch_size, "square patch size, <= 50")
      ->capture_default_str();
  train->add_option("--overlap", tcfg.overlap, "patch overlap in [0.5, 0.75]")
      ->capture_default_str();
  train->add_option("--lr", tcfg.learning_rate, "initial learning rate")
      ->capture_default_str();
  train->add_option("--epochs", tcfg.max_epochs, "epoch budget")->capture_default_str();
  train->add_option("--batch-size", tcfg.batch_size)->capture_default_str();
  train->add_option("--train-fraction", tcfg.train_fraction)->capture_default_str();
  train->add_option("--plateau-patience", tcfg.plateau_patience)->capture_default_str();
  train->add_option("--bg-frames", tcfg.background_frames,
                    "frames in the median interval (CD2014 mode)")
      ->capture_default_str();
  train->add_option("--threshold", tcfg.threshold, "binarization threshold stored in checkpoints")
      ->capture_default_str();
  train->add_option("--frames", train_frames, "frame range A:B (1-based, inclusive)");
  train->add_option("--resume-bcnn", resume_bcnn, "skip phase one, load this checkpoint");
  train->add_option("--net-width", tcfg.net_shape.width,
                    "conv width override [non-canonical]")
      ->capture_default_str();
  train->add_option("--net-middle", tcfg.net_shape.middle_layers,
                    "middle layer count override [non-canonical]")
      ->capture_default_str();
  train->add_flag("--scnn-batchnorm", tcfg.scnn_batchnorm,
                  "symmetric batch-norm variant [non-canonical]");

  // segment
  auto* segment = app.add_subcommand("segment", "write binary masks for a video");
  fs::path seg_data, seg_bcnn, seg_scnn, seg_out;
  double seg_threshold = 0.8;
  std::string seg_format = "pgm";
  std::string seg_frames;
  InferenceOptions seg_patch;
  segment->add_option("--data", seg_data, "video directory")->required()->envname(
      "CRCNN_DATA_ROOT");
  segment->add_option("--bcnn", seg_bcnn, "bcnn checkpoint")->required();
  segment->add_option("--scnn", seg_scnn, "scnn checkpoint")->required();
  segment->add_option("--out", seg_out, "mask output directory")->required();
  segment->add_option("--threshold", seg_threshold, "foreground probability threshold")
      ->capture_default_str();
  segment->add_option("--format", seg_format, "pgm|png")
      ->check(CLI::IsMember({"pgm", "png"}))
      ->capture_default_str();
  segment->add_option("--frames", seg_frames, "frame range A:B");
  segment->add_flag("--patch-stitched", seg_patch.patch_stitched,
                    "per-patch inference, averaged overlaps");
  segment->add_option("--patch-size", seg_patch.patch_size)->capture_default_str();
  segment->add_option("--overlap", seg_patch.overlap)->capture_default_str();

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "confusion metrics against ground truth");
  fs::path eval_data, eval_bcnn, eval_scnn, eval_report = "report.json", eval_csv, eval_masks;
  double eval_threshold = 0.8;
  std::string eval_frames;
  InferenceOptions eval_patch;
  evaluate->add_option("--data", eval_data, "video dir, category dir, or dataset root")
      ->required()
      ->envname("CRCNN_DATA_ROOT");
  evaluate->add_option("--bcnn", eval_bcnn, "bcnn checkpoint")->required();
  evaluate->add_option("--scnn", eval_scnn, "scnn checkpoint")->required();
  evaluate->add_option("--threshold", eval_threshold)->capture_default_str();
  evaluate->add_option("--out", eval_report, "report JSON path")->capture_default_str();
  evaluate->add_option("--csv", eval_csv, "summary CSV path");
  evaluate->add_option("--masks-out", eval_masks, "also write predicted masks here");
  evaluate->add_option("--frames", eval_frames, "frame range A:B");
  evaluate->add_flag("--patch-stitched", eval_patch.patch_stitched,
                     "per-patch inference, averaged overlaps");
  evaluate->add_option("--patch-size", eval_patch.patch_size)->capture_default_str();
  evaluate->add_option("--overlap", eval_patch.overlap)->capture_default_str();

  // params
  auto* params = app.add_subcommand("params", "print trainable parameter counts");
  NetShape params_shape;
  params->add_option("--net-width", params_shape.width, "[non-canonical]")
      ->capture_default_str();
  params->add_option("--net-middle", params_shape.middle_layers, "[non-canonical]")
      ->capture_default_str();

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  int gc_samples = 4;
  gradcheck->add_option("--samples", gc_samples,
                        "probed coordinates per parameter tensor (cascade case)")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // exit contract: 0 for --help/--version, 1 for any usage error
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*synth) {
      scfg.background = bg_kind == "static"     ? BackgroundKind::static_flat
                        : bg_kind == "textured" ? BackgroundKind::textured
                                                : BackgroundKind::dynamic_noise;
      sobj.shape = obj_shape == "rect" ? ObjectShape::rect : ObjectShape::disc;
      sobj.vel_y = obj_speed[0];
      sobj.vel_x = obj_speed[1];
      if (obj_start.size() == 2) {
        sobj.start_y = obj_start[0];
        sobj.start_x = obj_start[1];
      }
      sobj.intensity = static_cast<std::uint8_t>(std::clamp(obj_intensity, 0, 255));
      sobj.cast_shadow = shadow;
      sobj.shadow_dy = shadow_offset[0];
      sobj.shadow_dx = shadow_offset[1];
      return run_synth(g, synth_out, scfg, object_count, sobj);
    }
    if (*background) return run_background(bg_data, first_n, bg_out);
    if (*train) return run_train(g, train_data, train_out, tcfg, train_frames, resume_bcnn);
    if (*segment)
      return run_segment(g, seg_data, seg_bcnn, seg_scnn, seg_out, seg_threshold, seg_format,
                         seg_frames, seg_patch);
    if (*evaluate)
      return run_evaluate(g, eval_data, eval_bcnn, eval_scnn, eval_threshold, eval_report,
                          eval_csv, eval_masks, eval_frames, eval_patch);
    if (*params) return run_params(params_shape);
    if (*gradcheck) return run_gradcheck(g, gc_samples);
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
