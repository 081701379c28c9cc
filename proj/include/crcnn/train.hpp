#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crcnn/checkpoint.hpp"
#include "crcnn/image.hpp"
#include "crcnn/network.hpp"
#include "crcnn/pipeline.hpp"

namespace crcnn {

struct TrainConfig {
  double learning_rate = 1e-3;
  double plateau_factor = 0.1;
  int plateau_patience = 3;
  int max_epochs = 50;
  int batch_size = 128;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
  double early_stop_delta = 1e-5;  // minimum validation improvement
  double stop_lr = 1e-6;           // two plateau events below this end the run

  int patch_size = 48;
  double overlap = 0.5;
  int background_frames = 100;  // CD2014-mode median interval

  double threshold = 0.8;  // persisted into checkpoints for inference
  int threads = 1;
  bool deterministic = false;

  NetShape net_shape;            // non-canonical overrides for desk-scale runs
  bool scnn_batchnorm = false;   // off-architecture symmetric variant
};

/// Learning-rate decay on validation plateau: after `patience` epochs without
/// an improvement of at least `min_delta`, multiply the rate by `factor`.
/// Training ends after two plateau events at a rate below `stop_lr`.
struct PlateauScheduler {
  double lr = 1e-3;
  double factor = 0.1;
  int patience = 3;
  double min_delta = 1e-5;
  double stop_lr = 1e-6;

  double best = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;
  int events_below_stop = 0;

  struct Event {
    int epoch;  // 1-based epoch that triggered the decay
    double lr;  // new rate
  };
  std::vector<Event> events;

  /// Returns true when training should stop.
  bool observe(int epoch, double val_loss);
};

struct TrainReport {
  std::vector<double> train_loss;  // per epoch
  std::vector<double> val_loss;
  double initial_val_loss = 0.0;  // before the first update
  struct LrEvent {
    int epoch;
    double lr;
  };
  std::vector<LrEvent> lr_events;
  int epochs_run = 0;
  int best_epoch = 0;  // the emitted weights; validation picks convergence
  double wall_time_s = 0.0;
  double final_loss = 0.0;  // validation loss at best_epoch
  std::string checkpoint_path;

  int train_patches = 0;
  int val_patches = 0;
  std::vector<int> first_epoch_batch_sizes;
};

/// Phase one: regress sigmoid(f - BCNN(f)) onto the deterministic background
/// over patch pairs. frames are normalized (1,1,h,w) tensors; background is
/// the uncentered [0,1] median image.
std::pair<NetworkSpec, TrainReport> train_bcnn(const std::vector<Tensor4>& frames,
                                               const Tensor4& background,
                                               const TrainConfig& config,
                                               AdamState* optimizer_out = nullptr);

/// Phase two: BCNN is frozen; residual maps are precomputed per frame, depth-
/// concatenated with the frame, and the SCNN is fit with binary cross-entropy
/// against the mask patches (mask pixels >= 128 count as foreground).
std::pair<NetworkSpec, TrainReport> train_scnn(const std::vector<Tensor4>& frames,
                                               const std::vector<Frame>& masks,
                                               const NetworkSpec& bcnn,
                                               const TrainConfig& config,
                                               AdamState* optimizer_out = nullptr);

struct CascadeResult {
  std::filesystem::path bcnn_checkpoint;
  std::filesystem::path scnn_checkpoint;
  TrainReport bcnn_report;
  TrainReport scnn_report;
  double mu = 0.0;
  std::size_t total_parameters = 0;
};

/// Full protocol over a CD2014-layout directory: deterministic background from
/// the first `background_frames` frames (or <dir>/background.pgm when present),
/// then the two training phases. Writes both checkpoints plus report.json
/// under out_dir. resume_bcnn skips phase one and loads the checkpoint.
CascadeResult train_cascade(const std::filesystem::path& dataset_dir,
                            const TrainConfig& config,
                            const std::filesystem::path& out_dir,
                            const std::filesystem::path& resume_bcnn = {});

nlohmann::json train_report_json(const TrainReport& report, bool deterministic);

}  // namespace crcnn
