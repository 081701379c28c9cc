#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crcnn/image.hpp"
#include "crcnn/network.hpp"
#include "crcnn/synth.hpp"  // ground-truth label constants
#include "crcnn/tensor.hpp"

namespace crcnn {

struct BinaryMask {
  int width = 0, height = 0;
  std::vector<std::uint8_t> bits;  // 0 or 1

  BinaryMask() = default;
  BinaryMask(int w, int h) : width(w), height(h), bits(static_cast<std::size_t>(w) * h, 0) {}
  std::uint8_t at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }
};

/// pixel = foreground iff probability >= threshold.
BinaryMask binarize(const Tensor4& probabilities, double threshold);

Frame mask_to_frame(const BinaryMask& mask);  // 0/255 for image output

struct ConfusionCounts {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::uint64_t scored() const { return tp + tn + fp + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
};

/// Pixel counting with CD2014 label semantics: foreground = 255, background =
/// {0, 50 (hard shadow)}, labels 85/170 excluded from every count.
ConfusionCounts confusion(const BinaryMask& pred, const Frame& gt);

struct Metrics {
  double precision = 0, recall = 0, f_measure = 0, pwc = 0;
  bool defined = false;  // false when no pixel was scored
};

/// Precision, recall, F-measure, PWC; zero-denominator conventions: precision
/// and recall fall back to 0, F to 0 when both are 0. Undefined (no scored
/// pixels) reports are excluded from aggregation.
Metrics metrics(const ConfusionCounts& counts);

struct FrameEval {
  ConfusionCounts counts;
  Metrics m;
};

struct VideoReport {
  std::vector<FrameEval> frames;
  ConfusionCounts pooled;  // raw counts summed over frames, CDnet-style
  Metrics pooled_metrics;
};

struct InferenceOptions {
  double threshold = 0.8;
  int threads = 1;
  bool patch_stitched = false;  // average overlapping patch probabilities
  int patch_size = 48;
  double overlap = 0.5;
};

Tensor4 infer_probabilities(const Tensor4& normalized_frame, const NetworkSpec& bcnn,
                            const NetworkSpec& scnn, const InferenceOptions& opts);

VideoReport evaluate_video(const std::vector<Frame>& frames, const std::vector<Frame>& gts,
                           const NetworkSpec& bcnn, const NetworkSpec& scnn, double mu,
                           const InferenceOptions& opts);

/// Category row = mean of its videos' metrics; Overall = mean of category rows.
struct AggregateReport {
  struct Row {
    std::string name;
    Metrics m;
    int videos = 0;
  };
  std::vector<Row> categories;
  Metrics overall;
};

AggregateReport aggregate(const std::map<std::string, std::vector<Metrics>>& by_category);

/// Plain mean; the category -> overall averaging rule in one place.
double mean_of(const std::vector<double>& values);

nlohmann::json video_report_json(const VideoReport& report);
void write_summary_csv(const std::filesystem::path& path, const AggregateReport& report);

}  // namespace crcnn
