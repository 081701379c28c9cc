#include "crcnn/eval.hpp"

#include <fstream>

#include "crcnn/pipeline.hpp"

namespace crcnn {

namespace fs = std::filesystem;
using nlohmann::json;

BinaryMask binarize(const Tensor4& probabilities, double threshold) {
  if (threshold <= 0.0 || threshold >= 1.0)
    throw DataError("threshold " + std::to_string(threshold) + " outside (0,1)");
  if (probabilities.n() != 1 || probabilities.c() != 1)
    throw ShapeError("binarize: expected (1,1,h,w), got " + probabilities.dims.str());
  BinaryMask mask(probabilities.w(), probabilities.h());
  for (std::size_t i = 0; i < probabilities.size(); ++i)
    mask.bits[i] = probabilities.data[i] >= threshold ? 1 : 0;
  return mask;
}

Frame mask_to_frame(const BinaryMask& mask) {
  Frame f(mask.width, mask.height);
  for (std::size_t i = 0; i < mask.bits.size(); ++i) f.pixels[i] = mask.bits[i] ? 255 : 0;
  return f;
}

ConfusionCounts confusion(const BinaryMask& pred, const Frame& gt) {
  if (pred.width != gt.width || pred.height != gt.height)
    throw ShapeError("confusion: prediction " + std::to_string(pred.width) + "x" +
                     std::to_string(pred.height) + " vs ground truth " +
                     std::to_string(gt.width) + "x" + std::to_string(gt.height));
  ConfusionCounts c;
  for (std::size_t i = 0; i < gt.pixels.size(); ++i) {
    const std::uint8_t label = gt.pixels[i];
    const bool fg = pred.bits[i] != 0;
    switch (label) {
      case kLabelForeground:
        fg ? ++c.tp : ++c.fn;
        break;
      case kLabelBackground:
      case kLabelShadow:
        fg ? ++c.fp : ++c.tn;
        break;
      case kLabelOutsideRoi:
      case kLabelUnknown:
        break;  // excluded from all counts
      default:
        throw DataError("unknown ground-truth label value " + std::to_string(label));
    }
  }
  return c;
}

Metrics metrics(const ConfusionCounts& c) {
  Metrics m;
  if (c.scored() == 0) return m;  // undefined marker
  m.defined = true;
  const double tp = static_cast<double>(c.tp);
  m.precision = (c.tp + c.fp) == 0 ? 0.0 : tp / static_cast<double>(c.tp + c.fp);
  m.recall = (c.tp + c.fn) == 0 ? 0.0 : tp / static_cast<double>(c.tp + c.fn);
  m.f_measure = (m.precision + m.recall) == 0.0
                    ? 0.0
                    : 2.0 * m.recall * m.precision / (m.recall + m.precision);
  m.pwc = 100.0 * static_cast<double>(c.fn + c.fp) / static_cast<double>(c.scored());
  return m;
}

Tensor4 infer_probabilities(const Tensor4& f, const NetworkSpec& bcnn,
                            const NetworkSpec& scnn, const InferenceOptions& opts) {
  if (!opts.patch_stitched) return segment_probabilities(f, bcnn, scnn, opts.threads);

  // Memory-bound hosts: run the cascade per patch and average the overlaps.
  Tensor4 r = bcnn_forward(f, bcnn, opts.threads);
  Tensor4 c = cascade_input(f, r);
  PatchSet in = extract_patches(c, std::min({opts.patch_size, f.h(), f.w()}), opts.overlap);
  PatchSet probs;
  probs.patch = in.patch;
  probs.stride = in.stride;
  probs.origins = in.origins;
  probs.patches = Tensor4(in.patches.n(), 1, in.patch, in.patch);
  for (int i = 0; i < in.patches.n(); ++i) {
    Tensor4 one(1, 2, in.patch, in.patch);
    std::copy(in.patches.plane(i, 0),
              in.patches.plane(i, 0) + static_cast<std::size_t>(2) * in.patch * in.patch,
              one.data.begin());
    Tensor4 p = forward_infer(scnn, one, opts.threads);
    std::copy(p.data.begin(), p.data.end(), probs.patches.plane(i, 0));
  }
  return reassemble_average(probs, f.h(), f.w());
}

VideoReport evaluate_video(const std::vector<Frame>& frames, const std::vector<Frame>& gts,
                           const NetworkSpec& bcnn, const NetworkSpec& scnn, double mu,
                           const InferenceOptions& opts) {
  if (frames.size() != gts.size())
    throw DataError("evaluate_video: " + std::to_string(frames.size()) + " frames vs " +
                    std::to_string(gts.size()) + " ground-truth masks");
  if (frames.empty()) throw DataError("evaluate_video: no frames");

  VideoReport report;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    Tensor4 f = normalize(frames[i], mu).tensor;
    Tensor4 prob = infer_probabilities(f, bcnn, scnn, opts);
    BinaryMask pred = binarize(prob, opts.threshold);
    FrameEval fe;
    fe.counts = confusion(pred, gts[i]);
    fe.m = metrics(fe.counts);
    report.pooled += fe.counts;  // frames with no scored pixels add nothing
    report.frames.push_back(fe);
  }
  report.pooled_metrics = metrics(report.pooled);
  return report;
}

double mean_of(const std::vector<double>& values) {
  double sum = 0.0;
  for (double v : values) sum += v;
  return values.empty() ? 0.0 : sum / static_cast<double>(values.size());
}

AggregateReport aggregate(const std::map<std::string, std::vector<Metrics>>& by_category) {
  if (by_category.empty()) throw DataError("aggregate: no categories");
  AggregateReport report;
  std::vector<double> cat_p, cat_r, cat_f, cat_pwc;
  for (const auto& [name, videos] : by_category) {
    std::vector<double> p, r, f, pwc;
    for (const Metrics& m : videos) {
      if (!m.defined) continue;
      p.push_back(m.precision);
      r.push_back(m.recall);
      f.push_back(m.f_measure);
      pwc.push_back(m.pwc);
    }
    if (p.empty())
      throw DataError("aggregate: category '" + name + "' has no scored videos");
    AggregateReport::Row row;
    row.name = name;
    row.videos = static_cast<int>(p.size());
    row.m.defined = true;
    row.m.precision = mean_of(p);
    row.m.recall = mean_of(r);
    row.m.f_measure = mean_of(f);
    row.m.pwc = mean_of(pwc);
    report.categories.push_back(row);
    cat_p.push_back(row.m.precision);
    cat_r.push_back(row.m.recall);
    cat_f.push_back(row.m.f_measure);
    cat_pwc.push_back(row.m.pwc);
  }
  report.overall.defined = true;
  report.overall.precision = mean_of(cat_p);
  report.overall.recall = mean_of(cat_r);
  report.overall.f_measure = mean_of(cat_f);
  report.overall.pwc = mean_of(cat_pwc);
  return report;
}

namespace {

json metrics_json(const Metrics& m) {
  if (!m.defined) return {{"defined", false}};
  return {{"defined", true},
          {"precision", m.precision},
          {"recall", m.recall},
          {"f_measure", m.f_measure},
          {"pwc", m.pwc}};
}

json counts_json(const ConfusionCounts& c) {
  return {{"tp", c.tp}, {"tn", c.tn}, {"fp", c.fp}, {"fn", c.fn}};
}

}  // namespace

json video_report_json(const VideoReport& report) {
  json frames = json::array();
  for (const auto& fe : report.frames)
    frames.push_back({{"counts", counts_json(fe.counts)}, {"metrics", metrics_json(fe.m)}});
  return {{"frames", frames},
          {"pooled_counts", counts_json(report.pooled)},
          {"pooled_metrics", metrics_json(report.pooled_metrics)}};
}

void write_summary_csv(const fs::path& path, const AggregateReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "metric";
  for (const auto& row : report.categories) out << "," << row.name;
  out << ",overall\n";
  const auto emit = [&](const char* name, auto pick) {
    out << name;
    for (const auto& row : report.categories) out << "," << pick(row.m);
    out << "," << pick(report.overall) << "\n";
  };
  out.precision(6);
  out << std::fixed;
  emit("precision", [](const Metrics& m) { return m.precision; });
  emit("recall", [](const Metrics& m) { return m.recall; });
  emit("f_measure", [](const Metrics& m) { return m.f_measure; });
  emit("pwc", [](const Metrics& m) { return m.pwc; });
}

}  // namespace crcnn
