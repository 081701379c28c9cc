#include "crcnn/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "crcnn/rng.hpp"

namespace crcnn {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint8_t clamp_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

/// Base texture rendered with a jitter margin on each side; the per-frame view
/// window slides inside it so jitter never exposes synthetic pixels.
Frame make_base_texture(const SceneConfig& cfg, int margin) {
  const int H = cfg.height + 2 * margin, W = cfg.width + 2 * margin;
  Frame base(W, H, 120);
  if (cfg.background == BackgroundKind::textured) {
    Rng rng(derive_seed(cfg.seed, "synth.texture"));
    const double s = cfg.texture_scale;
    // a few seeded cosine gratings plus blocky patches, kept mid-range so the
    // scene has structure without saturating
    const double fy1 = rng.uniform(0.05, 0.25), fx1 = rng.uniform(0.05, 0.25);
    const double fy2 = rng.uniform(0.02, 0.1), fx2 = rng.uniform(0.02, 0.1);
    const double p1 = rng.uniform(0.0, 6.283), p2 = rng.uniform(0.0, 6.283);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double v = 120 + s * 35 * std::cos(fy1 * y + fx1 * x + p1) +
                   s * 25 * std::cos(fy2 * y - fx2 * x + p2);
        base.at(y, x) = clamp_byte(std::clamp(v, 40.0, 200.0));
      }
    const int blocks = 6;
    for (int b = 0; b < blocks; ++b) {
      const int bw = 4 + rng.below_int(std::max(1, W / 4));
      const int bh = 4 + rng.below_int(std::max(1, H / 4));
      const int by = rng.below_int(std::max(1, H - bh));
      const int bx = rng.below_int(std::max(1, W - bw));
      const int delta = static_cast<int>(std::lround(s * (rng.below_int(61) - 30)));
      for (int y = by; y < by + bh && y < H; ++y)
        for (int x = bx; x < bx + bw && x < W; ++x)
          base.at(y, x) = clamp_byte(std::clamp(base.at(y, x) + delta, 40, 200));
    }
  }
  return base;
}

double reflect_position(double pos, double limit) {
  if (limit <= 0) return 0;
  const double period = 2.0 * limit;
  double u = std::fmod(pos, period);
  if (u < 0) u += period;
  return u <= limit ? u : period - u;
}

struct ObjectFootprint {
  int top, left;
  const SceneObject& obj;

  bool covers(int y, int x) const {
    const int dy = y - top, dx = x - left;
    if (dy < 0 || dx < 0 || dy >= obj.size || dx >= obj.size) return false;
    if (obj.shape == ObjectShape::rect) return true;
    const double r = obj.size / 2.0;
    const double cy = dy + 0.5 - r, cx = dx + 0.5 - r;
    return cy * cy + cx * cx <= r * r;
  }
};

}  // namespace

std::vector<LabeledFrame> generate(const SceneConfig& cfg) {
  if (cfg.width < 1 || cfg.height < 1 || cfg.frame_count < 1)
    throw DataError("generate: bad scene dimensions");
  for (const auto& obj : cfg.objects)
    if (obj.size > cfg.width || obj.size > cfg.height)
      throw DataError("generate: object size " + std::to_string(obj.size) +
                      " exceeds frame " + std::to_string(cfg.width) + "x" +
                      std::to_string(cfg.height));

  const int margin = std::max(0, cfg.jitter_amplitude);
  const Frame base = make_base_texture(cfg, margin);

  // seeded start placement for objects without an explicit position
  std::vector<SceneObject> objects = cfg.objects;
  {
    Rng rng(derive_seed(cfg.seed, "synth.objects"));
    for (auto& obj : objects) {
      if (obj.start_y < 0)
        obj.start_y = rng.below_int(std::max(1, cfg.height - obj.size + 1));
      if (obj.start_x < 0)
        obj.start_x = rng.below_int(std::max(1, cfg.width - obj.size + 1));
    }
  }

  std::vector<LabeledFrame> out;
  out.reserve(cfg.frame_count);
  for (int t = 0; t < cfg.frame_count; ++t) {
    Rng frame_rng(derive_seed(cfg.seed, "synth.frame", static_cast<std::uint64_t>(t)));
    int jy = 0, jx = 0;
    if (cfg.jitter_amplitude > 0) {
      jy = frame_rng.below_int(2 * cfg.jitter_amplitude + 1) - cfg.jitter_amplitude;
      jx = frame_rng.below_int(2 * cfg.jitter_amplitude + 1) - cfg.jitter_amplitude;
    }
    const double drift = cfg.illumination_drift * t;

    LabeledFrame lf;
    lf.frame = Frame(cfg.width, cfg.height);
    lf.mask = Frame(cfg.width, cfg.height, kLabelBackground);

    for (int y = 0; y < cfg.height; ++y)
      for (int x = 0; x < cfg.width; ++x) {
        double v = base.at(y + margin + jy, x + margin + jx);
        if (cfg.background == BackgroundKind::dynamic_noise)
          v += frame_rng.normal() * cfg.noise_sigma;
        lf.frame.at(y, x) = clamp_byte(v + drift);
      }

    // simulate positions, render shadows first, then objects on top
    std::vector<ObjectFootprint> footprints;
    footprints.reserve(objects.size());
    for (const auto& obj : objects) {
      const double py = reflect_position(obj.start_y + obj.vel_y * t,
                                         static_cast<double>(cfg.height - obj.size));
      const double px = reflect_position(obj.start_x + obj.vel_x * t,
                                         static_cast<double>(cfg.width - obj.size));
      footprints.push_back(
          {static_cast<int>(std::lround(py)), static_cast<int>(std::lround(px)),
           obj});
    }
    for (const auto& fp : footprints) {
      if (!fp.obj.cast_shadow) continue;
      for (int y = 0; y < fp.obj.size; ++y)
        for (int x = 0; x < fp.obj.size; ++x) {
          const int sy = fp.top + fp.obj.shadow_dy + y, sx = fp.left + fp.obj.shadow_dx + x;
          if (sy < 0 || sx < 0 || sy >= cfg.height || sx >= cfg.width) continue;
          if (!fp.covers(fp.top + y, fp.left + x)) continue;
          lf.frame.at(sy, sx) = clamp_byte(lf.frame.at(sy, sx) * fp.obj.shadow_attenuation);
          lf.mask.at(sy, sx) = kLabelShadow;
        }
    }
    for (const auto& fp : footprints)
      for (int y = fp.top; y < fp.top + fp.obj.size; ++y)
        for (int x = fp.left; x < fp.left + fp.obj.size; ++x)
          if (fp.covers(y, x)) {
            lf.frame.at(y, x) = fp.obj.intensity;
            lf.mask.at(y, x) = kLabelForeground;
          }
    out.push_back(std::move(lf));
  }
  return out;
}

json write_cd2014_layout(const std::vector<LabeledFrame>& sequence, const fs::path& out_dir) {
  fs::create_directories(out_dir / "input");
  fs::create_directories(out_dir / "groundtruth");

  json frames = json::array();
  char name[32];
  for (std::size_t i = 0; i < sequence.size(); ++i) {
    std::snprintf(name, sizeof name, "in%06zu.pgm", i + 1);
    const std::string in_rel = std::string("input/") + name;
    std::snprintf(name, sizeof name, "gt%06zu.pgm", i + 1);
    const std::string gt_rel = std::string("groundtruth/") + name;
    write_pgm(out_dir / in_rel, sequence[i].frame);
    write_pgm(out_dir / gt_rel, sequence[i].mask);

    std::size_t fg = 0, shadow = 0;
    for (std::uint8_t v : sequence[i].mask.pixels) {
      if (v == kLabelForeground) ++fg;
      if (v == kLabelShadow) ++shadow;
    }
    frames.push_back({{"index", i + 1},
                      {"input", in_rel},
                      {"groundtruth", gt_rel},
                      {"foreground", fg},
                      {"shadow", shadow}});
  }

  json manifest;
  manifest["width"] = sequence.empty() ? 0 : sequence[0].frame.width;
  manifest["height"] = sequence.empty() ? 0 : sequence[0].frame.height;
  manifest["frame_count"] = sequence.size();
  manifest["frames"] = frames;

  std::ofstream out(out_dir / "manifest.json", std::ios::trunc);
  if (!out) throw DataError("cannot write manifest under " + out_dir.string());
  out << manifest.dump(2) << "\n";
  return manifest;
}

}  // namespace crcnn
