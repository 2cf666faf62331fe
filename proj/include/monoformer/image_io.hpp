#pragma once

// PNG (libpng) and binary PPM (P6) readers/writers for [3,H,W] images with
// values in [0,1], plus 16-bit grayscale PNG export of depth maps.

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "monoformer/tensor.hpp"

namespace monoformer {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Rounds an image to the 8-bit grid it would have after a PNG round trip.
inline Tensor quantize8(const Tensor& img) {
  Tensor q = img.detach();
  for (auto& v : q.data()) v = to_byte(v) / 255.0;
  return q;
}

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void write_png_rows(const std::string& path, std::size_t width, std::size_t height, int color_type,
                           int bit_depth, const std::vector<std::vector<png_byte>>& rows) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw ImageIoError("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("libpng failed writing " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (const auto& r : rows) png_write_row(png, r.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

inline void write_png(const std::string& path, const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw DimensionError("write_png expects [3,H,W], got " + shape_str(img.shape()));
  const std::size_t H = img.dim(1), W = img.dim(2);
  std::vector<std::vector<png_byte>> rows(H, std::vector<png_byte>(3 * W));
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) rows[y][3 * x + c] = to_byte(img[(c * H + y) * W + x]);
  detail::write_png_rows(path, W, H, PNG_COLOR_TYPE_RGB, 8, rows);
}

// 16-bit grayscale, value = round(clamp(depth / max_depth) * 65535).
inline void write_depth_png(const std::string& path, const Tensor& depth, double max_depth) {
  if (depth.rank() != 2) throw DimensionError("write_depth_png expects [H,W], got " + shape_str(depth.shape()));
  const std::size_t H = depth.dim(0), W = depth.dim(1);
  std::vector<std::vector<png_byte>> rows(H, std::vector<png_byte>(2 * W));
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const auto v = static_cast<unsigned>(std::lround(std::clamp(depth[y * W + x] / max_depth, 0.0, 1.0) * 65535.0));
      rows[y][2 * x] = static_cast<png_byte>(v >> 8);
      rows[y][2 * x + 1] = static_cast<png_byte>(v & 0xff);
    }
  detail::write_png_rows(path, W, H, PNG_COLOR_TYPE_GRAY, 16, rows);
}

// Reads any PNG as [3,H,W] in [0,1] (gray expanded, alpha dropped, 16-bit
// reduced to 8).
inline Tensor read_png(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw ImageIoError("cannot open " + path);
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8)) throw ImageIoError(path + " is not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("libpng initialisation failed");
  }
  std::vector<std::vector<png_byte>> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("libpng failed reading " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    if (png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t W = png_get_image_width(png, info), H = png_get_image_height(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  if (rowbytes != 3 * W) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError(path + ": unsupported PNG layout");
  }
  rows.assign(H, std::vector<png_byte>(rowbytes));
  for (auto& r : rows) png_read_row(png, r.data(), nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  Tensor img({3, H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) img[(c * H + y) * W + x] = rows[y][3 * x + c] / 255.0;
  return img;
}

inline void write_ppm(const std::string& path, const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw DimensionError("write_ppm expects [3,H,W], got " + shape_str(img.shape()));
  const std::size_t H = img.dim(1), W = img.dim(2);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ImageIoError("cannot open " + path + " for writing");
  f << "P6\n" << W << ' ' << H << "\n255\n";
  std::string buf(3 * W * H, '\0');
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) buf[3 * (y * W + x) + c] = static_cast<char>(to_byte(img[(c * H + y) * W + x]));
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline Tensor read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ImageIoError("cannot open " + path);
  auto token = [&]() {
    std::string t;
    char ch;
    while (f.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(f, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t += ch;
    }
    return t;
  };
  if (token() != "P6") throw ImageIoError(path + " is not a binary PPM (P6)");
  const std::size_t W = std::stoul(token()), H = std::stoul(token()), maxval = std::stoul(token());
  if (maxval != 255 || W == 0 || H == 0) throw ImageIoError(path + ": only 8-bit PPM is supported");
  std::string buf(3 * W * H, '\0');
  f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(f.gcount()) != buf.size()) throw ImageIoError(path + ": truncated PPM payload");
  Tensor img({3, H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img[(c * H + y) * W + x] = static_cast<unsigned char>(buf[3 * (y * W + x) + c]) / 255.0;
  return img;
}

inline bool is_image_path(const std::filesystem::path& p) {
  const auto ext = p.extension().string();
  return ext == ".png" || ext == ".ppm";
}

inline Tensor read_image(const std::string& path) {
  return std::filesystem::path(path).extension() == ".ppm" ? read_ppm(path) : read_png(path);
}

inline void write_image(const std::string& path, const Tensor& img) {
  if (std::filesystem::path(path).extension() == ".ppm")
    write_ppm(path, img);
  else
    write_png(path, img);
}

}  // namespace monoformer
