#include "crcnn/image.hpp"

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>

#include <jpeglib.h>
#include <png.h>

namespace crcnn {

namespace fs = std::filesystem;

Frame to_grayscale(const RgbImage& rgb) {
  if (rgb.width < 1 || rgb.height < 1 ||
      rgb.pixels.size() != static_cast<std::size_t>(rgb.width) * rgb.height * 3)
    throw DataError("to_grayscale: malformed RGB image");
  Frame out(rgb.width, rgb.height);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const double r = rgb.pixels[3 * i], g = rgb.pixels[3 * i + 1], b = rgb.pixels[3 * i + 2];
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(0.299 * r + 0.587 * g + 0.114 * b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// PNM
// ---------------------------------------------------------------------------

namespace {

// Next whitespace-delimited token, skipping '#' comments.
std::string pnm_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

struct PnmHeader {
  std::string magic;
  int width = 0, height = 0, maxval = 0;
};

PnmHeader read_pnm_header(std::istream& in, const fs::path& path) {
  PnmHeader h;
  h.magic = pnm_token(in);
  try {
    h.width = std::stoi(pnm_token(in));
    h.height = std::stoi(pnm_token(in));
    h.maxval = std::stoi(pnm_token(in));
  } catch (const std::exception&) {
    throw DataError("malformed PNM header: " + path.string());
  }
  if (h.width < 1 || h.height < 1)
    throw DataError("bad PNM dimensions in " + path.string());
  if (h.maxval < 1 || h.maxval > 255)
    throw DataError("unsupported PNM maxval " + std::to_string(h.maxval) + " in " +
                    path.string() + " (8-bit only)");
  return h;
}

}  // namespace

Frame read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  PnmHeader h = read_pnm_header(in, path);
  if (h.magic != "P5") throw DataError("not a binary PGM (P5): " + path.string());
  Frame out(h.width, h.height);
  if (!in.read(reinterpret_cast<char*>(out.pixels.data()),
               static_cast<std::streamsize>(out.pixels.size())))
    throw DataError("truncated PGM data: " + path.string());
  return out;
}

void write_pgm(const fs::path& path, const Frame& frame) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << frame.width << " " << frame.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(frame.pixels.data()),
            static_cast<std::streamsize>(frame.pixels.size()));
  if (!out) throw DataError("short write: " + path.string());
}

RgbImage read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  PnmHeader h = read_pnm_header(in, path);
  if (h.magic != "P6") throw DataError("not a binary PPM (P6): " + path.string());
  RgbImage out;
  out.width = h.width;
  out.height = h.height;
  out.pixels.resize(static_cast<std::size_t>(h.width) * h.height * 3);
  if (!in.read(reinterpret_cast<char*>(out.pixels.data()),
               static_cast<std::streamsize>(out.pixels.size())))
    throw DataError("truncated PPM data: " + path.string());
  return out;
}

void write_ppm(const fs::path& path, const RgbImage& image) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw DataError("short write: " + path.string());
}

// ---------------------------------------------------------------------------
// PNG via libpng's simplified API.
// ---------------------------------------------------------------------------

RgbImage read_png(const fs::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    throw DataError("cannot read PNG " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  RgbImage out;
  out.width = static_cast<int>(image.width);
  out.height = static_cast<int>(image.height);
  out.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw DataError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  return out;
}

void write_png_gray(const fs::path& path, const Frame& frame) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(frame.width);
  image.height = static_cast<png_uint_32>(frame.height);
  image.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, frame.pixels.data(), 0,
                               nullptr))
    throw DataError("cannot write PNG " + path.string() + ": " + image.message);
}

// ---------------------------------------------------------------------------
// JPEG via libjpeg.
// ---------------------------------------------------------------------------

namespace {

struct JpegErrorJmp {
  jpeg_error_mgr mgr;
  std::jmp_buf setjmp_buffer;
};

void jpeg_error_exit_thrower(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorJmp*>(cinfo->err);
  std::longjmp(err->setjmp_buffer, 1);
}

}  // namespace

RgbImage read_jpeg(const fs::path& path) {
  FILE* file = std::fopen(path.string().c_str(), "rb");
  if (!file) throw DataError("cannot open " + path.string());

  jpeg_decompress_struct cinfo;
  JpegErrorJmp jerr;
  cinfo.err = jpeg_std_error(&jerr.mgr);
  jerr.mgr.error_exit = jpeg_error_exit_thrower;
  if (setjmp(jerr.setjmp_buffer)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(file);
    throw DataError("cannot decode JPEG " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);

  RgbImage out;
  out.width = static_cast<int>(cinfo.output_width);
  out.height = static_cast<int>(cinfo.output_height);
  out.pixels.resize(static_cast<std::size_t>(out.width) * out.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) *
                                           out.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(file);
  return out;
}

// ---------------------------------------------------------------------------

Frame read_image_gray(const fs::path& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw DataError("cannot open " + path.string());
  unsigned char magic[8] = {};
  probe.read(reinterpret_cast<char*>(magic), sizeof magic);
  probe.close();

  if (magic[0] == 'P' && magic[1] == '5') return read_pgm(path);
  if (magic[0] == 'P' && magic[1] == '6') return to_grayscale(read_ppm(path));
  if (magic[0] == 0x89 && magic[1] == 'P' && magic[2] == 'N' && magic[3] == 'G')
    return to_grayscale(read_png(path));
  if (magic[0] == 0xFF && magic[1] == 0xD8) return to_grayscale(read_jpeg(path));
  throw DataError("unsupported image format: " + path.string());
}

void write_mask_image(const fs::path& path, const Frame& frame) {
  if (path.extension() == ".png")
    write_png_gray(path, frame);
  else
    write_pgm(path, frame);
}

}  // namespace crcnn
