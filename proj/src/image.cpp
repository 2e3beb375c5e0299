// SPDX-License-Identifier: Apache-2.0
#include "milpath/image.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>

namespace milpath {

RgbImage::RgbImage(int w, int h, std::uint8_t r, std::uint8_t g, std::uint8_t b)
    : width(w), height(h), data(static_cast<std::size_t>(std::max(w, 0)) * std::max(h, 0) * 3) {
  for (std::size_t i = 0; i < data.size(); i += 3) {
    data[i] = r;
    data[i + 1] = g;
    data[i + 2] = b;
  }
}

RgbImage RgbImage::crop(int x, int y, int w, int h) const {
  if (x < 0 || y < 0 || w <= 0 || h <= 0 || x + w > width || y + h > height)
    throw std::out_of_range("crop window outside image");
  RgbImage out(w, h);
  for (int row = 0; row < h; ++row) {
    const auto *src = &data[(static_cast<std::size_t>(y + row) * width + x) * 3];
    std::copy(src, src + static_cast<std::size_t>(w) * 3,
              &out.data[static_cast<std::size_t>(row) * w * 3]);
  }
  return out;
}

std::size_t TissueMask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

namespace {

struct FileCloser {
  void operator()(std::FILE *f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_rows(const std::filesystem::path &path, int width, int height, int color_type,
                const std::vector<std::uint8_t> &bytes, int channels) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot open for writing: " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png write failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  // No timestamps or text chunks, so identical rasters give identical files.
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(width) * channels;
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(&bytes[y * stride]));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png(const std::filesystem::path &path, const RgbImage &image) {
  if (image.empty()) throw std::invalid_argument("empty input");
  write_rows(path, image.width, image.height, PNG_COLOR_TYPE_RGB, image.data, 3);
}

void write_png(const std::filesystem::path &path, const TissueMask &mask) {
  std::vector<std::uint8_t> bytes(mask.bits.size());
  std::transform(mask.bits.begin(), mask.bits.end(), bytes.begin(),
                 [](std::uint8_t b) { return b ? 255 : 0; });
  write_rows(path, mask.width, mask.height, PNG_COLOR_TYPE_GRAY, bytes, 1);
}

RgbImage read_png(const std::filesystem::path &path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("cannot open: " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("png read failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int color_type = png_get_color_type(png, info);
  const int bit_depth = png_get_bit_depth(png, info);

  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  RgbImage image(width, height);
  for (int y = 0; y < height; ++y)
    png_read_row(png, &image.data[static_cast<std::size_t>(y) * width * 3], nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

}  // namespace milpath
