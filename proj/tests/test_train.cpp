#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "crcnn/synth.hpp"
#include "crcnn/train.hpp"

using namespace crcnn;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* name) {
  auto dir = fs::temp_directory_path() / "crcnn_test_train" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.patch_size = 8;
  cfg.overlap = 0.5;
  cfg.max_epochs = 4;
  cfg.seed = 11;
  cfg.threads = 1;
  cfg.deterministic = true;
  return cfg;
}

std::vector<LabeledFrame> tiny_scene(int frames, std::uint64_t seed) {
  SceneConfig cfg;
  cfg.width = 16;
  cfg.height = 16;
  cfg.frame_count = frames;
  cfg.seed = seed;
  SceneObject obj;
  obj.size = 5;
  obj.vel_x = 1.0;
  obj.start_y = 6;
  obj.start_x = 1;
  obj.intensity = 240;
  cfg.objects = {obj};
  return generate(cfg);
}

}  // namespace

TEST_CASE("plateau scheduler") {
  PlateauScheduler s;
  s.lr = 1e-3;
  s.factor = 0.1;
  s.patience = 3;
  s.min_delta = 1e-5;
  s.stop_lr = 1e-6;

  SUBCASE("improvement resets the counter") {
    CHECK(!s.observe(1, 1.0));
    CHECK(!s.observe(2, 0.9));
    CHECK(!s.observe(3, 0.8999999));  // below min_delta: counts as flat
    CHECK(!s.observe(4, 0.91));
    CHECK(s.events.empty());
    CHECK(!s.observe(5, 0.92));  // third flat epoch: decay
    REQUIRE(s.events.size() == 1);
    CHECK(s.events[0].epoch == 5);
    CHECK(s.events[0].lr == 1e-3 * 0.1);
  }
  SUBCASE("every decrease multiplies by exactly the factor") {
    double expect = 1e-3;
    int epoch = 0;
    bool stopped = false;
    for (int k = 0; k < 40 && !stopped; ++k) stopped = s.observe(++epoch, 1.0);
    REQUIRE(s.events.size() >= 4);
    for (const auto& e : s.events) {
      expect *= 0.1;
      CHECK(e.lr == expect);
    }
    // lr is non-increasing over events
    for (std::size_t i = 1; i < s.events.size(); ++i)
      CHECK(s.events[i].lr < s.events[i - 1].lr);
  }
  SUBCASE("stops after two plateau events below the stop rate") {
    int epoch = 0;
    int stops = 0;
    bool stopped = false;
    while (!stopped && epoch < 100) stopped = s.observe(++epoch, 1.0);
    CHECK(stopped);
    // epoch 1 sets the baseline; decays land at 4, 7, 10, 13 (now below
    // 1e-6) and 16, the second sub-threshold event, which stops the run
    CHECK(s.events.size() == 5);
    CHECK(epoch == 16);
    for (const auto& e : s.events)
      if (e.lr < 1e-6) ++stops;
    CHECK(stops == 2);
  }
}

TEST_CASE("bcnn training on frames equal to the background reduces the loss") {
  auto scene = tiny_scene(4, 21);
  // all frames equal the first frame's background: use a no-object scene
  SceneConfig cfg;
  cfg.width = 16;
  cfg.height = 16;
  cfg.frame_count = 4;
  cfg.seed = 5;
  auto frames = generate(cfg);

  std::vector<Frame> raw;
  for (auto& lf : frames) raw.push_back(lf.frame);
  Tensor4 background = compute_background(raw);
  const double mu = dataset_mean(raw);
  std::vector<Tensor4> normalized;
  for (auto& f : raw) normalized.push_back(normalize(f, mu).tensor);

  TrainConfig tc = small_config();
  tc.max_epochs = 1;
  auto [net, report] = train_bcnn(normalized, background, tc);
  CHECK(report.epochs_run == 1);
  CHECK(report.val_loss.size() == 1);
  CHECK(report.val_loss[0] < report.initial_val_loss);
  CHECK(report.val_loss[0] > 0.0);  // sigmoid saturation floor, never exactly 0
  CHECK(std::isfinite(report.train_loss[0]));
}

TEST_CASE("training is bit-deterministic given (seed, config, data)") {
  auto scene = tiny_scene(5, 31);
  const fs::path data = temp_dir("det_data");
  write_cd2014_layout(scene, data);

  TrainConfig cfg = small_config();
  cfg.background_frames = 2;
  cfg.max_epochs = 2;

  const fs::path out1 = temp_dir("det_run1"), out2 = temp_dir("det_run2");
  train_cascade(data, cfg, out1);
  train_cascade(data, cfg, out2);
  CHECK(file_bytes(out1 / "bcnn.ckpt") == file_bytes(out2 / "bcnn.ckpt"));
  CHECK(file_bytes(out1 / "scnn.ckpt") == file_bytes(out2 / "scnn.ckpt"));
  CHECK(file_bytes(out1 / "report.json") == file_bytes(out2 / "report.json"));

  TrainConfig other = cfg;
  other.seed = 999;
  const fs::path out3 = temp_dir("det_run3");
  train_cascade(data, other, out3);
  CHECK(file_bytes(out1 / "bcnn.ckpt") != file_bytes(out3 / "bcnn.ckpt"));
}

TEST_CASE("scnn training freezes the bcnn parameters") {
  auto scene = tiny_scene(3, 41);
  std::vector<Frame> raw, masks;
  for (auto& lf : scene) {
    raw.push_back(lf.frame);
    masks.push_back(lf.mask);
  }
  const double mu = dataset_mean(raw);
  std::vector<Tensor4> normalized;
  for (auto& f : raw) normalized.push_back(normalize(f, mu).tensor);
  Tensor4 background = compute_background(raw);

  TrainConfig tc = small_config();
  tc.max_epochs = 2;
  auto [bcnn, rep1] = train_bcnn(normalized, background, tc);

  std::vector<std::vector<float>> theta1;
  NetworkSpec& mutable_bcnn = bcnn;
  for (auto& r : trainable_params(mutable_bcnn))
    theta1.emplace_back(r.values.begin(), r.values.end());

  auto [scnn, rep2] = train_scnn(normalized, masks, bcnn, tc);
  CHECK(scnn.name == "scnn");
  auto refs = trainable_params(mutable_bcnn);
  for (std::size_t i = 0; i < refs.size(); ++i)
    CHECK(std::equal(refs[i].values.begin(), refs[i].values.end(), theta1[i].begin()));
}

TEST_CASE("scnn on all-zero masks converges toward background everywhere") {
  auto scene = tiny_scene(3, 51);
  std::vector<Frame> raw, masks;
  for (auto& lf : scene) {
    raw.push_back(lf.frame);
    masks.push_back(Frame(lf.frame.width, lf.frame.height, 0));
  }
  const double mu = dataset_mean(raw);
  std::vector<Tensor4> normalized;
  for (auto& f : raw) normalized.push_back(normalize(f, mu).tensor);

  NetworkSpec bcnn = build_bcnn<float>(3);
  TrainConfig tc = small_config();
  tc.max_epochs = 12;
  auto [scnn, report] = train_scnn(normalized, masks, bcnn, tc);

  std::size_t below = 0, total = 0;
  for (const auto& f : normalized) {
    Tensor4 prob = segment_probabilities(f, bcnn, scnn);
    for (float v : prob.data) {
      total += 1;
      if (v < 0.2f) ++below;
    }
  }
  CHECK(static_cast<double>(below) / static_cast<double>(total) > 0.95);
}

TEST_CASE("mask misalignment and divergence are reported") {
  auto scene = tiny_scene(2, 61);
  std::vector<Frame> raw{scene[0].frame, scene[1].frame};
  const double mu = dataset_mean(raw);
  std::vector<Tensor4> normalized;
  for (auto& f : raw) normalized.push_back(normalize(f, mu).tensor);

  SUBCASE("mask count mismatch") {
    NetworkSpec bcnn = build_bcnn<float>(1);
    std::vector<Frame> masks{scene[0].mask};
    CHECK_THROWS_AS(train_scnn(normalized, masks, bcnn, small_config()), DataError);
  }
  SUBCASE("mask dims mismatch") {
    NetworkSpec bcnn = build_bcnn<float>(1);
    std::vector<Frame> masks{scene[0].mask, Frame(8, 8, 0)};
    CHECK_THROWS_AS(train_scnn(normalized, masks, bcnn, small_config()), DataError);
  }
  SUBCASE("non-finite loss aborts with epoch/batch diagnostics") {
    std::vector<Tensor4> poisoned = normalized;
    poisoned[0].data[7] = NAN;
    Tensor4 background = compute_background(raw);
    CHECK_THROWS_WITH_AS(train_bcnn(poisoned, background, small_config()),
                         doctest::Contains("epoch 1"), DivergenceError);
  }
}

TEST_CASE("train_cascade modes") {
  SUBCASE("cd2014 mode needs background_frames + 1 frames") {
    auto scene = tiny_scene(3, 71);
    const fs::path data = temp_dir("short_data");
    write_cd2014_layout(scene, data);
    TrainConfig cfg = small_config();
    cfg.background_frames = 3;
    CHECK_THROWS_WITH_AS(train_cascade(data, cfg, temp_dir("short_out")),
                         doctest::Contains("frames"), DataError);
  }
  SUBCASE("missing ground truth for a training frame") {
    auto scene = tiny_scene(4, 81);
    const fs::path data = temp_dir("nogt_data");
    write_cd2014_layout(scene, data);
    fs::remove(data / "groundtruth" / "gt000004.pgm");
    TrainConfig cfg = small_config();
    cfg.background_frames = 2;
    CHECK_THROWS_WITH_AS(train_cascade(data, cfg, temp_dir("nogt_out")),
                         doctest::Contains("ground truth"), DataError);
  }
  SUBCASE("single designated background frame mode runs end to end") {
    auto scene = tiny_scene(3, 91);
    const fs::path data = temp_dir("petro_data");
    write_cd2014_layout({scene[1], scene[2]}, data);  // 2 annotated frames
    write_pgm(data / "background.pgm", scene[0].frame);
    TrainConfig cfg = small_config();
    cfg.max_epochs = 2;
    CascadeResult result = train_cascade(data, cfg, temp_dir("petro_out"));
    CHECK(fs::exists(result.bcnn_checkpoint));
    CHECK(fs::exists(result.scnn_checkpoint));
    CHECK(result.total_parameters == 1112770);
    CHECK(result.bcnn_report.epochs_run == 2);
  }
}

TEST_CASE("resuming from the bcnn checkpoint reproduces the scnn bit-exactly") {
  auto scene = tiny_scene(6, 101);
  const fs::path data = temp_dir("resume_data");
  write_cd2014_layout(scene, data);

  TrainConfig cfg = small_config();
  cfg.background_frames = 2;
  cfg.max_epochs = 3;

  const fs::path full = temp_dir("resume_full");
  CascadeResult uninterrupted = train_cascade(data, cfg, full);

  const fs::path resumed = temp_dir("resume_resumed");
  CascadeResult second =
      train_cascade(data, cfg, resumed, uninterrupted.bcnn_checkpoint);
  CHECK(file_bytes(full / "scnn.ckpt") == file_bytes(resumed / "scnn.ckpt"));
  CHECK(file_bytes(full / "bcnn.ckpt") == file_bytes(resumed / "bcnn.ckpt"));
  CHECK(second.scnn_report.epochs_run == uninterrupted.scnn_report.epochs_run);
}

TEST_CASE("descent sanity and report integrity on a tiny fixture") {
  auto scene = tiny_scene(8, 111);
  const fs::path data = temp_dir("descent_data");
  write_cd2014_layout(scene, data);

  TrainConfig cfg = small_config();
  cfg.background_frames = 2;
  cfg.max_epochs = 6;
  CascadeResult result = train_cascade(data, cfg, temp_dir("descent_out"));

  for (const TrainReport* rep : {&result.bcnn_report, &result.scnn_report}) {
    CHECK(rep->epochs_run <= cfg.max_epochs);
    CHECK(rep->train_loss.size() == static_cast<std::size_t>(rep->epochs_run));
    for (double v : rep->train_loss) CHECK(std::isfinite(v));
    for (double v : rep->val_loss) CHECK(std::isfinite(v));
    CHECK(rep->train_patches + rep->val_patches == 8 * 9 - 2 * 9);  // 6 training frames
    // 80/20 split within one patch
    CHECK(std::abs(rep->train_patches - 0.8 * (rep->train_patches + rep->val_patches)) <=
          1.0);
  }
  // descent sanity on the bcnn: most early transitions do not increase
  const auto& loss = result.bcnn_report.train_loss;
  REQUIRE(loss.size() >= 6);
  int non_increasing = 0;
  for (int i = 0; i < 5; ++i)
    if (loss[i + 1] <= loss[i] + 1e-12) ++non_increasing;
  CHECK(non_increasing >= 4);
}
