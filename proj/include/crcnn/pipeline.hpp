#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "crcnn/image.hpp"
#include "crcnn/tensor.hpp"

namespace crcnn {

inline constexpr int kMaxPatchSize = 50;

/// Frame scaled to [0,1] and centered by the dataset mean: f = v/255 - mu.
struct NormalizedFrame {
  Tensor4 tensor;  // (1,1,h,w)
  double mu = 0.0;
};

/// Per-pixel median of the interval, scaled to [0,1]. Even counts average the
/// two central order statistics.
Tensor4 compute_background(const std::vector<Frame>& frames);

/// Mean over all pixels of all frames after /255.
double dataset_mean(const std::vector<Frame>& frames);

NormalizedFrame normalize(const Frame& frame, double mu);

Tensor4 frame_to_tensor(const Frame& frame);  // plain /255, no centering

/// Sliding-window grid: positions 0, s, 2s, ... with the final row/column
/// clamped to (h-p, w-p) so every pixel is covered.
struct PatchLayout {
  int frame_h = 0, frame_w = 0;
  int patch = 0, stride = 0;
  std::vector<std::pair<int, int>> origins;  // (y, x) top-left, row-major order
};

PatchLayout plan_patches(int h, int w, int patch, double overlap);

struct PatchSet {
  int patch = 0, stride = 0;
  Tensor4 patches;                           // (m, ch, p, p)
  std::vector<std::pair<int, int>> origins;  // aligned with the batch dim
};

/// Cuts overlapping patches from a (1,ch,h,w) image.
PatchSet extract_patches(const Tensor4& image, int patch, double overlap);

/// Cuts background patches at the layout's origins, replicated `copies` times
/// (one copy per source frame sharing the layout).
PatchSet replicate_background_patches(const Tensor4& background, const PatchLayout& layout,
                                      int copies = 1);

/// Averages overlapping patches back onto the canvas; exact inverse of
/// extract_patches when patches are unmodified.
Tensor4 reassemble_average(const PatchSet& set, int h, int w);

/// Seeded 80/20-style split plus per-epoch batch shuffling. The validation
/// set is fixed; training order is reshuffled each epoch from a derived seed.
struct BatchPlan {
  std::vector<int> train_indices;
  std::vector<int> val_indices;
  int batch_size = 0;
  std::uint64_t seed = 0;

  std::vector<std::vector<int>> epoch_batches(int epoch) const;
};

BatchPlan split_and_batch(int count, double train_fraction, int batch_size,
                          std::uint64_t seed);

}  // namespace crcnn
