#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crcnn/image.hpp"

namespace crcnn {

// Desk-scale video generator with analytically exact ground truth. Motion and
// jitter are integer-only (rendered positions are rounded) so masks never
// depend on rendering thresholds.

// Ground-truth label values (CD2014 encoding).
inline constexpr std::uint8_t kLabelBackground = 0;
inline constexpr std::uint8_t kLabelShadow = 50;
inline constexpr std::uint8_t kLabelOutsideRoi = 85;
inline constexpr std::uint8_t kLabelUnknown = 170;
inline constexpr std::uint8_t kLabelForeground = 255;

enum class BackgroundKind { static_flat, textured, dynamic_noise };
enum class ObjectShape { rect, disc };

struct SceneObject {
  ObjectShape shape = ObjectShape::rect;
  int size = 10;             // rect edge or disc diameter, pixels
  double start_y = -1, start_x = -1;  // top-left; negative = seeded placement
  double vel_y = 0, vel_x = 0;        // px/frame, reflected at the borders
  std::uint8_t intensity = 230;
  bool cast_shadow = false;
  int shadow_dy = 3, shadow_dx = 3;
  double shadow_attenuation = 0.6;  // multiplies the background under the shadow
};

struct SceneConfig {
  int width = 64, height = 64;
  int frame_count = 120;
  std::uint64_t seed = 0;
  BackgroundKind background = BackgroundKind::textured;
  double noise_sigma = 6.0;    // dynamic_noise only
  double texture_scale = 1.0;  // textured only: scales the pattern amplitude
  std::vector<SceneObject> objects;
  int jitter_amplitude = 0;        // background translation, px
  double illumination_drift = 0.0; // background intensity delta per frame
};

struct LabeledFrame {
  Frame frame;
  Frame mask;  // {0, 50, 255}
};

std::vector<LabeledFrame> generate(const SceneConfig& config);

/// Writes input/in%06d.pgm + groundtruth/gt%06d.pgm (1-based) plus a
/// manifest.json with per-frame foreground/shadow pixel counts.
nlohmann::json write_cd2014_layout(const std::vector<LabeledFrame>& sequence,
                                   const std::filesystem::path& out_dir);

}  // namespace crcnn
