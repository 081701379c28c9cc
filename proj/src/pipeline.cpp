#include "crcnn/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "crcnn/rng.hpp"

namespace crcnn {

Tensor4 compute_background(const std::vector<Frame>& frames) {
  if (frames.empty()) throw DataError("compute_background: empty frame list");
  const int h = frames[0].height, w = frames[0].width;
  for (const auto& f : frames)
    if (f.width != w || f.height != h)
      throw DataError("compute_background: frame dims disagree (" + std::to_string(f.width) +
                      "x" + std::to_string(f.height) + " vs " + std::to_string(w) + "x" +
                      std::to_string(h) + ")");

  Tensor4 bg(1, 1, h, w);
  std::vector<std::uint8_t> column(frames.size());
  const std::size_t count = frames.size();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      for (std::size_t k = 0; k < count; ++k) column[k] = frames[k].at(y, x);
      auto mid = column.begin() + static_cast<std::ptrdiff_t>(count / 2);
      std::nth_element(column.begin(), mid, column.end());
      double med = *mid;
      if (count % 2 == 0) {
        // even interval: average of the two central order statistics
        auto lo = std::max_element(column.begin(), mid);
        med = (med + *lo) / 2.0;
      }
      bg.at(0, 0, y, x) = static_cast<float>(med / 255.0);
    }
  return bg;
}

double dataset_mean(const std::vector<Frame>& frames) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& f : frames) {
    for (std::uint8_t v : f.pixels) sum += v;
    count += f.pixels.size();
  }
  return count == 0 ? 0.0 : sum / (255.0 * static_cast<double>(count));
}

NormalizedFrame normalize(const Frame& frame, double mu) {
  NormalizedFrame out;
  out.mu = mu;
  out.tensor = Tensor4(1, 1, frame.height, frame.width);
  for (std::size_t i = 0; i < frame.pixels.size(); ++i)
    out.tensor.data[i] = static_cast<float>(frame.pixels[i] / 255.0 - mu);
  return out;
}

Tensor4 frame_to_tensor(const Frame& frame) {
  Tensor4 t(1, 1, frame.height, frame.width);
  for (std::size_t i = 0; i < frame.pixels.size(); ++i)
    t.data[i] = static_cast<float>(frame.pixels[i] / 255.0);
  return t;
}

PatchLayout plan_patches(int h, int w, int patch, double overlap) {
  if (patch < 1 || patch > kMaxPatchSize)
    throw DataError("patch size " + std::to_string(patch) + " outside [1," +
                    std::to_string(kMaxPatchSize) + "]");
  if (patch > h || patch > w)
    throw DataError("patch size " + std::to_string(patch) + " exceeds image " +
                    std::to_string(w) + "x" + std::to_string(h));
  if (overlap < 0.5 || overlap > 0.75)
    throw DataError("overlap " + std::to_string(overlap) + " outside [0.5, 0.75]");

  PatchLayout layout;
  layout.frame_h = h;
  layout.frame_w = w;
  layout.patch = patch;
  layout.stride = std::max(1, static_cast<int>(std::lround(patch * (1.0 - overlap))));

  auto positions = [&](int extent) {
    std::vector<int> pos;
    for (int v = 0; v < extent - patch; v += layout.stride) pos.push_back(v);
    pos.push_back(extent - patch);  // clamped final patch covers the edge
    return pos;
  };
  for (int y : positions(h))
    for (int x : positions(w)) layout.origins.emplace_back(y, x);
  return layout;
}

namespace {

void cut_patch(const Tensor4& image, int oy, int ox, int patch, Tensor4& out, int index) {
  for (int c = 0; c < image.c(); ++c)
    for (int y = 0; y < patch; ++y) {
      const float* src = image.plane(0, c) + static_cast<std::size_t>(oy + y) * image.w() + ox;
      float* dst = out.plane(index, c) + static_cast<std::size_t>(y) * patch;
      std::copy(src, src + patch, dst);
    }
}

}  // namespace

PatchSet extract_patches(const Tensor4& image, int patch, double overlap) {
  if (image.n() != 1) throw ShapeError("extract_patches: expected batch 1, got " + image.dims.str());
  PatchLayout layout = plan_patches(image.h(), image.w(), patch, overlap);
  PatchSet set;
  set.patch = patch;
  set.stride = layout.stride;
  set.origins = layout.origins;
  set.patches = Tensor4(static_cast<int>(layout.origins.size()), image.c(), patch, patch);
  for (std::size_t i = 0; i < layout.origins.size(); ++i)
    cut_patch(image, layout.origins[i].first, layout.origins[i].second, patch, set.patches,
              static_cast<int>(i));
  return set;
}

PatchSet replicate_background_patches(const Tensor4& background, const PatchLayout& layout,
                                      int copies) {
  if (background.n() != 1 || background.c() != 1 || background.h() != layout.frame_h ||
      background.w() != layout.frame_w)
    throw ShapeError("replicate_background_patches: background " + background.dims.str() +
                     " vs layout " + std::to_string(layout.frame_w) + "x" +
                     std::to_string(layout.frame_h));
  const int per_frame = static_cast<int>(layout.origins.size());
  PatchSet set;
  set.patch = layout.patch;
  set.stride = layout.stride;
  set.patches = Tensor4(per_frame * copies, 1, layout.patch, layout.patch);
  set.origins.reserve(static_cast<std::size_t>(per_frame) * copies);
  for (int k = 0; k < copies; ++k)
    for (int i = 0; i < per_frame; ++i) {
      cut_patch(background, layout.origins[i].first, layout.origins[i].second, layout.patch,
                set.patches, k * per_frame + i);
      set.origins.push_back(layout.origins[i]);
    }
  return set;
}

Tensor4 reassemble_average(const PatchSet& set, int h, int w) {
  if (set.patches.n() != static_cast<int>(set.origins.size()))
    throw ShapeError("reassemble_average: origin/patch count mismatch");
  // double accumulation: k identical float contributions divide back exactly,
  // so unmodified patches reconstruct the canvas bit-for-bit
  const int ch = set.patches.c();
  std::vector<double> acc(static_cast<std::size_t>(ch) * h * w, 0.0);
  std::vector<int> coverage(static_cast<std::size_t>(h) * w, 0);
  for (std::size_t i = 0; i < set.origins.size(); ++i) {
    const auto [oy, ox] = set.origins[i];
    for (int c = 0; c < ch; ++c)
      for (int y = 0; y < set.patch; ++y)
        for (int x = 0; x < set.patch; ++x)
          acc[(static_cast<std::size_t>(c) * h + oy + y) * w + ox + x] +=
              set.patches.at(static_cast<int>(i), c, y, x);
    for (int y = 0; y < set.patch; ++y)
      for (int x = 0; x < set.patch; ++x)
        coverage[static_cast<std::size_t>(oy + y) * w + ox + x] += 1;
  }
  Tensor4 canvas(1, ch, h, w);
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int n = coverage[static_cast<std::size_t>(y) * w + x];
        if (n > 0)
          canvas.at(0, c, y, x) = static_cast<float>(
              acc[(static_cast<std::size_t>(c) * h + y) * w + x] / n);
      }
  return canvas;
}

BatchPlan split_and_batch(int count, double train_fraction, int batch_size,
                          std::uint64_t seed) {
  if (count < 1) throw DataError("split_and_batch: empty patch set");
  if (train_fraction <= 0.0 || train_fraction >= 1.0)
    throw DataError("split_and_batch: train fraction must be in (0,1)");
  if (batch_size < 1) throw DataError("split_and_batch: batch size must be >= 1");

  std::vector<int> order(count);
  for (int i = 0; i < count; ++i) order[i] = i;
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(order);

  const int train_count =
      std::min(count, static_cast<int>(std::ceil(train_fraction * count)));
  BatchPlan plan;
  plan.batch_size = batch_size;
  plan.seed = seed;
  plan.train_indices.assign(order.begin(), order.begin() + train_count);
  plan.val_indices.assign(order.begin() + train_count, order.end());
  return plan;
}

std::vector<std::vector<int>> BatchPlan::epoch_batches(int epoch) const {
  std::vector<int> order = train_indices;
  Rng rng(derive_seed(seed, "epoch", static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order);
  std::vector<std::vector<int>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

}  // namespace crcnn
