#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crcnn/image.hpp"

namespace crcnn {

// CD2014-style layout: <video>/input/in%06d.<ext> and
// <video>/groundtruth/gt%06d.<ext>, with .jpg/.jpeg/.png/.pgm/.ppm accepted.
// An optional <video>/background.pgm marks the single-designated-background
// training mode.

struct VideoPaths {
  std::filesystem::path dir;
  std::vector<std::filesystem::path> inputs;  // sorted by frame number
  std::vector<std::filesystem::path> gts;     // aligned with inputs; empty path = missing
  std::optional<std::filesystem::path> background;

  bool has_gt(std::size_t i) const { return !gts[i].empty(); }
};

VideoPaths scan_video_dir(const std::filesystem::path& dir);

bool looks_like_video_dir(const std::filesystem::path& dir);

/// category name -> video name -> paths. Accepts a single video dir, a
/// category dir of videos, or a two-level dataset root.
std::map<std::string, std::map<std::string, VideoPaths>> scan_dataset_root(
    const std::filesystem::path& root);

/// 1-based inclusive frame range "A:B" ("A:" and ":B" leave an end open).
struct FrameRange {
  int first = 1;
  int last = -1;  // -1 = to the end

  static FrameRange parse(const std::string& text);
  void apply(VideoPaths& video) const;
};

std::vector<Frame> load_frames(const std::vector<std::filesystem::path>& paths);

}  // namespace crcnn
