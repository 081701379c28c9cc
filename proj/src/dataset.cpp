#include "crcnn/dataset.hpp"

#include <algorithm>
#include <cctype>

namespace crcnn {

namespace fs = std::filesystem;

namespace {

const char* kImageExts[] = {".jpg", ".jpeg", ".png", ".pgm", ".ppm"};

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  for (const char* e : kImageExts)
    if (ext == e) return true;
  return false;
}

/// Frame number = the last run of digits in the stem ("in000012" -> 12).
std::optional<long> frame_number(const fs::path& p) {
  const std::string stem = p.stem().string();
  auto end = stem.end();
  while (end != stem.begin() && !std::isdigit(static_cast<unsigned char>(*(end - 1)))) --end;
  auto begin = end;
  while (begin != stem.begin() && std::isdigit(static_cast<unsigned char>(*(begin - 1))))
    --begin;
  if (begin == end) return std::nullopt;
  try {
    return std::stol(std::string(begin, end));
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

std::map<long, fs::path> scan_numbered_images(const fs::path& dir) {
  std::map<long, fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
    if (auto num = frame_number(entry.path())) out[*num] = entry.path();
  }
  return out;
}

}  // namespace

bool looks_like_video_dir(const fs::path& dir) {
  return fs::is_directory(dir / "input");
}

VideoPaths scan_video_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  if (!looks_like_video_dir(dir))
    throw DataError("no input/ subdirectory under " + dir.string());

  VideoPaths v;
  v.dir = dir;
  auto inputs = scan_numbered_images(dir / "input");
  if (inputs.empty()) throw DataError("no frames found under " + (dir / "input").string());
  auto gts = scan_numbered_images(dir / "groundtruth");
  for (const auto& [num, path] : inputs) {
    v.inputs.push_back(path);
    auto it = gts.find(num);
    v.gts.push_back(it == gts.end() ? fs::path() : it->second);
  }
  if (fs::is_regular_file(dir / "background.pgm")) v.background = dir / "background.pgm";
  return v;
}

std::map<std::string, std::map<std::string, VideoPaths>> scan_dataset_root(const fs::path& root) {
  std::map<std::string, std::map<std::string, VideoPaths>> out;
  if (!fs::is_directory(root)) throw DataError("not a directory: " + root.string());

  if (looks_like_video_dir(root)) {
    out[root.filename().string().empty() ? "default" : root.filename().string()]
       [root.filename().string()] = scan_video_dir(root);
    return out;
  }

  std::vector<fs::path> children;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) children.push_back(entry.path());
  std::sort(children.begin(), children.end());

  bool any = false;
  for (const auto& child : children) {
    if (looks_like_video_dir(child)) {
      // category of videos
      out[root.filename().string()][child.filename().string()] = scan_video_dir(child);
      any = true;
    } else {
      for (const auto& grand : fs::directory_iterator(child)) {
        if (grand.is_directory() && looks_like_video_dir(grand.path())) {
          out[child.filename().string()][grand.path().filename().string()] =
              scan_video_dir(grand.path());
          any = true;
        }
      }
    }
  }
  if (!any) throw DataError("no CD2014-layout videos found under " + root.string());
  return out;
}

FrameRange FrameRange::parse(const std::string& text) {
  FrameRange r;
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw DataError("frame range must be A:B, got " + text);
  try {
    const std::string a = text.substr(0, colon), b = text.substr(colon + 1);
    if (!a.empty()) r.first = std::stoi(a);
    if (!b.empty()) r.last = std::stoi(b);
  } catch (const std::exception&) {
    throw DataError("bad frame range: " + text);
  }
  if (r.first < 1 || (r.last != -1 && r.last < r.first))
    throw DataError("bad frame range: " + text);
  return r;
}

void FrameRange::apply(VideoPaths& video) const {
  const int count = static_cast<int>(video.inputs.size());
  const int lo = std::min(first - 1, count);
  const int hi = last == -1 ? count : std::min(last, count);
  video.inputs = {video.inputs.begin() + lo, video.inputs.begin() + std::max(lo, hi)};
  video.gts = {video.gts.begin() + lo, video.gts.begin() + std::max(lo, hi)};
}

std::vector<Frame> load_frames(const std::vector<fs::path>& paths) {
  std::vector<Frame> frames;
  frames.reserve(paths.size());
  for (const auto& p : paths) frames.push_back(read_image_gray(p));
  return frames;
}

}  // namespace crcnn
