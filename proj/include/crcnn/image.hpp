#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "crcnn/tensor.hpp"

namespace crcnn {

/// 8-bit grayscale frame.
struct Frame {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  Frame() = default;
  Frame(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

  std::uint8_t& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }

  bool operator==(const Frame&) const = default;
};

/// 8-bit interleaved RGB.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // r,g,b per pixel
};

/// ITU-R BT.601 luma, rounded to nearest.
Frame to_grayscale(const RgbImage& rgb);

// PGM (P5) / PPM (P6), 8-bit binary, the canonical lossless interchange.
Frame read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Frame& frame);
RgbImage read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const RgbImage& image);

// PNG and JPEG read support for CD2014-layout inputs; PNG write for masks.
RgbImage read_png(const std::filesystem::path& path);
void write_png_gray(const std::filesystem::path& path, const Frame& frame);
RgbImage read_jpeg(const std::filesystem::path& path);

/// Reads any supported format (dispatched on magic bytes) as grayscale.
Frame read_image_gray(const std::filesystem::path& path);

/// Writes .png or .pgm depending on the extension.
void write_mask_image(const std::filesystem::path& path, const Frame& frame);

}  // namespace crcnn
