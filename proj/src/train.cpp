#include "crcnn/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "crcnn/dataset.hpp"
#include "crcnn/rng.hpp"

namespace crcnn {

namespace fs = std::filesystem;
using nlohmann::json;

bool PlateauScheduler::observe(int epoch, double val_loss) {
  if (val_loss < best - min_delta) {
    best = val_loss;
    bad_epochs = 0;
    return false;
  }
  if (++bad_epochs < patience) return false;
  lr *= factor;
  bad_epochs = 0;
  events.push_back({epoch, lr});
  if (lr < stop_lr) ++events_below_stop;
  return events_below_stop >= 2;
}

namespace {

Tensor4 gather(const Tensor4& patches, const std::vector<int>& indices) {
  Tensor4 out(static_cast<int>(indices.size()), patches.c(), patches.h(), patches.w());
  const std::size_t item = static_cast<std::size_t>(patches.c()) * patches.h() * patches.w();
  for (std::size_t k = 0; k < indices.size(); ++k)
    std::copy(patches.data.begin() + indices[k] * item,
              patches.data.begin() + (indices[k] + 1) * item, out.data.begin() + k * item);
  return out;
}

void check_same_frame_dims(const std::vector<Tensor4>& frames) {
  if (frames.empty()) throw DataError("training needs at least one frame");
  for (const auto& f : frames) {
    if (f.n() != 1 || f.c() != 1)
      throw ShapeError("training frames must be (1,1,h,w), got " + f.dims.str());
    if (f.h() != frames[0].h() || f.w() != frames[0].w())
      throw ShapeError("training frame dims disagree: " + f.dims.str() + " vs " +
                       frames[0].dims.str());
  }
}

// Tracks the schedule plus the best-validation snapshot. The emitted weights
// are the best epoch's, not the last: a late instability (constant-rate Adam
// can trip on a sharp region before the plateau decay reacts) must not leak
// damaged parameters into the checkpoint the cascade builds on.
struct EpochLoop {
  PlateauScheduler sched;
  TrainReport report;
  int epoch = 0;
  double best_val = std::numeric_limits<double>::infinity();
  NetworkSpec best_net;
  AdamState best_adam;

  explicit EpochLoop(const TrainConfig& cfg) {
    sched.lr = cfg.learning_rate;
    sched.factor = cfg.plateau_factor;
    sched.patience = cfg.plateau_patience;
    sched.min_delta = cfg.early_stop_delta;
    sched.stop_lr = cfg.stop_lr;
  }

  // Returns false once training should end. Call after each epoch.
  bool next(double train_loss, double val_loss, const TrainConfig& cfg,
            const NetworkSpec& net, const AdamState& adam) {
    ++epoch;
    report.train_loss.push_back(train_loss);
    report.val_loss.push_back(val_loss);
    report.epochs_run = epoch;
    if (val_loss < best_val) {
      best_val = val_loss;
      report.best_epoch = epoch;
      best_net = net;
      best_adam = adam;
    }
    const bool stop = sched.observe(epoch, val_loss);
    return !stop && epoch < cfg.max_epochs;
  }

  void finish(NetworkSpec& net, AdamState& adam) {
    for (const auto& e : sched.events) report.lr_events.push_back({e.epoch, e.lr});
    report.final_loss = best_val;
    if (report.best_epoch > 0) {
      net = std::move(best_net);
      adam = std::move(best_adam);
    }
  }
};

/// a = sigmoid(f - net(f)) on a batch, training mode.
Tensor4 bcnn_train_forward(NetworkSpecT<float>& net, const Tensor4& f,
                           ForwardCacheT<float>& cache, int threads) {
  Tensor4 r = forward(net, f, Mode::train, &cache, threads);
  Tensor4 pre(f.dims);
  for (std::size_t i = 0; i < f.size(); ++i) pre.data[i] = f.data[i] - r.data[i];
  return sigmoid(pre);
}

double bcnn_val_loss(const NetworkSpec& net, const Tensor4& patches, const Tensor4& targets,
                     const std::vector<int>& indices, int batch_size, int threads) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < indices.size();
       start += static_cast<std::size_t>(batch_size)) {
    std::vector<int> slice(indices.begin() + static_cast<std::ptrdiff_t>(start),
                           indices.begin() + static_cast<std::ptrdiff_t>(std::min(
                               indices.size(), start + batch_size)));
    Tensor4 f = gather(patches, slice);
    Tensor4 b = gather(targets, slice);
    Tensor4 a = approximated_background(f, net, threads);
    total += frobenius_loss(b, a).first * static_cast<double>(slice.size());
    count += slice.size();
  }
  return total / static_cast<double>(count);
}

double scnn_val_loss(const NetworkSpec& net, const Tensor4& patches, const Tensor4& targets,
                     const std::vector<int>& indices, int batch_size, int threads) {
  double total = 0.0;
  std::size_t pixels = 0;
  for (std::size_t start = 0; start < indices.size();
       start += static_cast<std::size_t>(batch_size)) {
    std::vector<int> slice(indices.begin() + static_cast<std::ptrdiff_t>(start),
                           indices.begin() + static_cast<std::ptrdiff_t>(std::min(
                               indices.size(), start + batch_size)));
    Tensor4 c = gather(patches, slice);
    Tensor4 g = gather(targets, slice);
    Tensor4 pred = forward_infer(net, c, threads);
    total += bce_loss(g, pred).first * static_cast<double>(g.size());
    pixels += g.size();
  }
  return total / static_cast<double>(pixels);
}

std::vector<std::size_t> param_sizes(NetworkSpec& net) {
  std::vector<std::size_t> sizes;
  for (const auto& r : trainable_params(net)) sizes.push_back(r.values.size());
  return sizes;
}

void apply_adam(NetworkSpec& net, const std::vector<std::vector<float>>& grads,
                AdamState& state, double lr) {
  state.learning_rate = static_cast<float>(lr);
  auto refs = trainable_params(net);
  std::vector<std::span<float>> params;
  std::vector<std::span<const float>> gspans;
  params.reserve(refs.size());
  gspans.reserve(grads.size());
  for (auto& r : refs) params.push_back(r.values);
  for (const auto& g : grads) gspans.emplace_back(g.data(), g.size());
  adam_step(params, gspans, state);
}

}  // namespace

std::pair<NetworkSpec, TrainReport> train_bcnn(const std::vector<Tensor4>& frames,
                                               const Tensor4& background,
                                               const TrainConfig& config,
                                               AdamState* optimizer_out) {
  check_same_frame_dims(frames);
  if (background.h() != frames[0].h() || background.w() != frames[0].w())
    throw ShapeError("background dims " + background.dims.str() +
                     " disagree with frames " + frames[0].dims.str());
  const auto t0 = std::chrono::steady_clock::now();

  PatchLayout layout =
      plan_patches(frames[0].h(), frames[0].w(), config.patch_size, config.overlap);
  std::vector<Tensor4> frame_patches;
  frame_patches.reserve(frames.size());
  for (const auto& f : frames)
    frame_patches.push_back(extract_patches(f, config.patch_size, config.overlap).patches);
  const int per_frame = static_cast<int>(layout.origins.size());
  const int total = per_frame * static_cast<int>(frames.size());

  Tensor4 inputs(total, 1, config.patch_size, config.patch_size);
  {
    std::size_t off = 0;
    for (const auto& fp : frame_patches) {
      std::copy(fp.data.begin(), fp.data.end(), inputs.data.begin() + off);
      off += fp.size();
    }
  }
  Tensor4 targets = replicate_background_patches(background, layout,
                                                 static_cast<int>(frames.size()))
                        .patches;

  BatchPlan plan = split_and_batch(total, config.train_fraction, config.batch_size,
                                   derive_seed(config.seed, "bcnn.split"));

  NetworkSpec net = build_bcnn<float>(config.seed, config.net_shape);
  AdamState adam = AdamState::for_sizes(param_sizes(net),
                                        static_cast<float>(config.learning_rate));

  EpochLoop loop(config);
  loop.report.train_patches = static_cast<int>(plan.train_indices.size());
  loop.report.val_patches = static_cast<int>(plan.val_indices.size());
  // degenerate desk-scale splits can leave no validation patches
  const std::vector<int>& val_set =
      plan.val_indices.empty() ? plan.train_indices : plan.val_indices;
  loop.report.initial_val_loss =
      bcnn_val_loss(net, inputs, targets, val_set, config.batch_size, config.threads);

  bool running = true;
  for (int epoch = 1; running && epoch <= config.max_epochs; ++epoch) {
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    const auto batches = plan.epoch_batches(epoch);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      if (epoch == 1)
        loop.report.first_epoch_batch_sizes.push_back(static_cast<int>(batches[bi].size()));
      Tensor4 f = gather(inputs, batches[bi]);
      Tensor4 b = gather(targets, batches[bi]);

      ForwardCacheT<float> cache;
      Tensor4 a = bcnn_train_forward(net, f, cache, config.threads);
      auto [loss, grad_a] = frobenius_loss(b, a);
      if (!std::isfinite(loss))
        throw DivergenceError("bcnn: non-finite loss at epoch " + std::to_string(epoch) +
                              " batch " + std::to_string(bi + 1));
      Tensor4 grad_pre = sigmoid_backward(a, grad_a);
      for (auto& v : grad_pre.data) v = -v;  // d(f - r)/dr = -1
      auto grads = backward(net, cache, grad_pre, config.threads);
      apply_adam(net, grads.param_grads, adam, loop.sched.lr);

      epoch_loss += loss * static_cast<double>(batches[bi].size());
      seen += batches[bi].size();
    }
    const double train_loss = epoch_loss / static_cast<double>(seen);
    const double val_loss =
        bcnn_val_loss(net, inputs, targets, val_set, config.batch_size, config.threads);
    running = loop.next(train_loss, val_loss, config, net, adam);
  }
  loop.finish(net, adam);
  loop.report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (optimizer_out) *optimizer_out = std::move(adam);
  return {std::move(net), std::move(loop.report)};
}

std::pair<NetworkSpec, TrainReport> train_scnn(const std::vector<Tensor4>& frames,
                                               const std::vector<Frame>& masks,
                                               const NetworkSpec& bcnn,
                                               const TrainConfig& config,
                                               AdamState* optimizer_out) {
  check_same_frame_dims(frames);
  if (masks.size() != frames.size())
    throw DataError("mask/frame count mismatch: " + std::to_string(masks.size()) + " vs " +
                    std::to_string(frames.size()));
  for (std::size_t i = 0; i < masks.size(); ++i)
    if (masks[i].width != frames[i].w() || masks[i].height != frames[i].h())
      throw DataError("mask " + std::to_string(i) + " dims disagree with its frame");
  const auto t0 = std::chrono::steady_clock::now();

  // Residual maps once per frame through the frozen BCNN (running statistics).
  const int p = config.patch_size;
  std::vector<Tensor4> input_patches;
  std::vector<Tensor4> target_patches;
  input_patches.reserve(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    Tensor4 r = bcnn_forward(frames[i], bcnn, config.threads);
    Tensor4 c = cascade_input(frames[i], r);
    input_patches.push_back(extract_patches(c, p, config.overlap).patches);

    Tensor4 m(1, 1, masks[i].height, masks[i].width);
    for (std::size_t k = 0; k < masks[i].pixels.size(); ++k)
      m.data[k] = masks[i].pixels[k] >= 128 ? 1.f : 0.f;
    target_patches.push_back(extract_patches(m, p, config.overlap).patches);
  }

  const int per_frame = input_patches[0].n();
  const int total = per_frame * static_cast<int>(frames.size());
  Tensor4 inputs(total, 2, p, p);
  Tensor4 targets(total, 1, p, p);
  {
    std::size_t in_off = 0, tg_off = 0;
    for (std::size_t i = 0; i < input_patches.size(); ++i) {
      std::copy(input_patches[i].data.begin(), input_patches[i].data.end(),
                inputs.data.begin() + in_off);
      std::copy(target_patches[i].data.begin(), target_patches[i].data.end(),
                targets.data.begin() + tg_off);
      in_off += input_patches[i].size();
      tg_off += target_patches[i].size();
    }
  }

  BatchPlan plan = split_and_batch(total, config.train_fraction, config.batch_size,
                                   derive_seed(config.seed, "scnn.split"));

  NetworkSpec net = build_scnn<float>(config.seed, config.net_shape, config.scnn_batchnorm);
  AdamState adam = AdamState::for_sizes(param_sizes(net),
                                        static_cast<float>(config.learning_rate));

  EpochLoop loop(config);
  loop.report.train_patches = static_cast<int>(plan.train_indices.size());
  loop.report.val_patches = static_cast<int>(plan.val_indices.size());
  const std::vector<int>& val_set =
      plan.val_indices.empty() ? plan.train_indices : plan.val_indices;
  loop.report.initial_val_loss =
      scnn_val_loss(net, inputs, targets, val_set, config.batch_size, config.threads);

  bool running = true;
  for (int epoch = 1; running && epoch <= config.max_epochs; ++epoch) {
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    const auto batches = plan.epoch_batches(epoch);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      if (epoch == 1)
        loop.report.first_epoch_batch_sizes.push_back(static_cast<int>(batches[bi].size()));
      Tensor4 c = gather(inputs, batches[bi]);
      Tensor4 g = gather(targets, batches[bi]);

      ForwardCacheT<float> cache;
      Tensor4 pred = forward(net, c, Mode::train, &cache, config.threads);
      const double loss = bce_loss(g, pred).first;
      if (!std::isfinite(loss))
        throw DivergenceError("scnn: non-finite loss at epoch " + std::to_string(epoch) +
                              " batch " + std::to_string(bi + 1));
      // fused gradient through the final sigmoid: d(bce)/d(pre) = (pred-g)/N.
      // The factored form dies to rounding when the output saturates.
      Tensor4 grad_pre(pred.dims);
      const float inv_total = 1.f / static_cast<float>(pred.size());
      for (std::size_t i = 0; i < pred.size(); ++i)
        grad_pre.data[i] = (pred.data[i] - g.data[i]) * inv_total;
      auto grads = backward(net, cache, grad_pre, config.threads,
                            /*grad_is_preactivation=*/true);
      apply_adam(net, grads.param_grads, adam, loop.sched.lr);

      const double npix = static_cast<double>(g.size());
      epoch_loss += loss * npix;
      seen += static_cast<std::size_t>(npix);
    }
    const double train_loss = epoch_loss / static_cast<double>(seen);
    const double val_loss =
        scnn_val_loss(net, inputs, targets, val_set, config.batch_size, config.threads);
    running = loop.next(train_loss, val_loss, config, net, adam);
  }
  loop.finish(net, adam);
  loop.report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (optimizer_out) *optimizer_out = std::move(adam);
  return {std::move(net), std::move(loop.report)};
}

CascadeResult train_cascade(const fs::path& dataset_dir, const TrainConfig& config,
                            const fs::path& out_dir, const fs::path& resume_bcnn) {
  VideoPaths video = scan_video_dir(dataset_dir);

  Tensor4 background;
  std::size_t first_training = 0;
  if (video.background) {
    // single designated background frame
    background = frame_to_tensor(read_image_gray(*video.background));
  } else {
    const int k = config.background_frames;
    if (static_cast<int>(video.inputs.size()) < k + 1)
      throw DataError("need at least " + std::to_string(k + 1) + " frames (" +
                      std::to_string(k) + " background + 1 training), found " +
                      std::to_string(video.inputs.size()));
    std::vector<fs::path> interval(video.inputs.begin(), video.inputs.begin() + k);
    background = compute_background(load_frames(interval));
    first_training = static_cast<std::size_t>(k);
  }

  std::vector<Frame> train_frames;
  std::vector<Frame> train_masks;
  for (std::size_t i = first_training; i < video.inputs.size(); ++i) {
    if (!video.has_gt(i))
      throw DataError("missing ground truth for training frame " +
                      video.inputs[i].filename().string());
    train_frames.push_back(read_image_gray(video.inputs[i]));
    train_masks.push_back(read_image_gray(video.gts[i]));
  }
  if (train_frames.empty()) throw DataError("no training frames with ground truth");
  if (background.h() != train_frames[0].height || background.w() != train_frames[0].width)
    throw DataError("background dims disagree with training frames");

  const double mu = dataset_mean(train_frames);
  std::vector<Tensor4> normalized;
  normalized.reserve(train_frames.size());
  for (const auto& f : train_frames) normalized.push_back(normalize(f, mu).tensor);

  fs::create_directories(out_dir);
  CascadeResult result;
  result.mu = mu;
  result.bcnn_checkpoint = out_dir / "bcnn.ckpt";
  result.scnn_checkpoint = out_dir / "scnn.ckpt";

  NetworkSpec bcnn;
  if (!resume_bcnn.empty()) {
    LoadedCheckpoint ck = load_checkpoint(resume_bcnn);
    if (ck.net.name != "bcnn")
      throw DataError("resume checkpoint is not a bcnn: " + resume_bcnn.string());
    bcnn = std::move(ck.net);
    result.bcnn_report.checkpoint_path = resume_bcnn.string();
    result.bcnn_report.epochs_run = ck.meta.epochs_run;
    result.bcnn_report.final_loss = ck.meta.final_loss;
    std::error_code ec;
    if (!fs::equivalent(resume_bcnn, result.bcnn_checkpoint, ec))
      fs::copy_file(resume_bcnn, result.bcnn_checkpoint,
                    fs::copy_options::overwrite_existing);
  } else {
    AdamState adam;
    auto [net, report] = train_bcnn(normalized, background, config, &adam);
    bcnn = std::move(net);
    result.bcnn_report = std::move(report);
    save_checkpoint(result.bcnn_checkpoint, bcnn,
                    {result.bcnn_report.epochs_run, result.bcnn_report.final_loss,
                     config.seed, mu, config.threshold},
                    &adam);
    result.bcnn_report.checkpoint_path = result.bcnn_checkpoint.string();
  }

  {
    AdamState adam;
    auto [net, report] = train_scnn(normalized, train_masks, bcnn, config, &adam);
    result.scnn_report = std::move(report);
    save_checkpoint(result.scnn_checkpoint, net,
                    {result.scnn_report.epochs_run, result.scnn_report.final_loss,
                     config.seed, mu, config.threshold},
                    &adam);
    result.scnn_report.checkpoint_path = result.scnn_checkpoint.string();
    result.total_parameters = count_parameters(bcnn) + count_parameters(net);
  }

  json merged;
  merged["bcnn"] = train_report_json(result.bcnn_report, config.deterministic);
  merged["scnn"] = train_report_json(result.scnn_report, config.deterministic);
  merged["dataset_mean"] = mu;
  merged["patch_size"] = config.patch_size;
  merged["overlap"] = config.overlap;
  merged["seed"] = config.seed;
  merged["total_parameters"] = result.total_parameters;
  std::ofstream out(out_dir / "report.json", std::ios::trunc);
  if (!out) throw DataError("cannot write " + (out_dir / "report.json").string());
  out << merged.dump(2) << "\n";

  return result;
}

json train_report_json(const TrainReport& report, bool deterministic) {
  json j;
  j["train_loss"] = report.train_loss;
  j["val_loss"] = report.val_loss;
  j["initial_val_loss"] = report.initial_val_loss;
  json events = json::array();
  for (const auto& e : report.lr_events) events.push_back({{"epoch", e.epoch}, {"lr", e.lr}});
  j["lr_events"] = events;
  j["epochs_run"] = report.epochs_run;
  j["best_epoch"] = report.best_epoch;
  j["wall_time_s"] = deterministic ? 0.0 : report.wall_time_s;
  j["final_loss"] = report.final_loss;
  // filename only, so reruns into different directories stay byte-identical
  j["checkpoint"] = fs::path(report.checkpoint_path).filename().string();
  j["train_patches"] = report.train_patches;
  j["val_patches"] = report.val_patches;
  j["first_epoch_batch_sizes"] = report.first_epoch_batch_sizes;
  return j;
}

}  // namespace crcnn
