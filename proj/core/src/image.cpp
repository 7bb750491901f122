#include "thrid/image.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

#include "thrid/error.hpp"

namespace thrid {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.string().c_str(), mode));
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

void write_png(const std::filesystem::path& path, int width, int height, int bit_depth,
               int color_type, const std::vector<std::vector<png_byte>>& rows) {
  FilePtr f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed for " + path.string());
  }
  png_init_io(png, f.get());
  png_set_compression_level(png, 6);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
               bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (const auto& row : rows) {
    png_write_row(png, const_cast<png_bytep>(row.data()));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png_gray8(const std::filesystem::path& path, const GrayImage& img) {
  std::vector<std::vector<png_byte>> rows(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) {
    rows[static_cast<std::size_t>(y)].assign(
        img.pixels.begin() + static_cast<std::size_t>(y) * img.width,
        img.pixels.begin() + static_cast<std::size_t>(y + 1) * img.width);
  }
  write_png(path, img.width, img.height, 8, PNG_COLOR_TYPE_GRAY, rows);
}

void write_png_gray1(const std::filesystem::path& path, const GrayImage& img) {
  std::vector<std::vector<png_byte>> rows(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) {
    auto& row = rows[static_cast<std::size_t>(y)];
    row.assign(static_cast<std::size_t>((img.width + 7) / 8), 0);
    for (int x = 0; x < img.width; ++x) {
      const std::uint8_t v = img.at(x, y);
      if (v != 0 && v != 255) {
        throw FormatError("write_png_gray1: pixel values must be 0 or 255");
      }
      if (v) row[static_cast<std::size_t>(x / 8)] |= static_cast<png_byte>(0x80 >> (x % 8));
    }
  }
  write_png(path, img.width, img.height, 1, PNG_COLOR_TYPE_GRAY, rows);
}

void write_png_rgb8(const std::filesystem::path& path, const RgbImage& img) {
  std::vector<std::vector<png_byte>> rows(static_cast<std::size_t>(img.height));
  const std::size_t stride = 3 * static_cast<std::size_t>(img.width);
  for (int y = 0; y < img.height; ++y) {
    rows[static_cast<std::size_t>(y)].assign(img.pixels.begin() + y * stride,
                                             img.pixels.begin() + (y + 1) * stride);
  }
  write_png(path, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, rows);
}

GrayImage read_png_gray8(const std::filesystem::path& path) {
  FilePtr f = open_file(path, "rb");
  png_byte header[8];
  if (std::fread(header, 1, 8, f.get()) != 8 || png_sig_cmp(header, 0, 8) != 0) {
    throw FormatError("not a PNG file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("png read failed for " + path.string());
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const png_byte color_type = png_get_color_type(png, info);
  const png_byte bit_depth = png_get_bit_depth(png, info);
  if (color_type != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("expected grayscale PNG: " + path.string());
  }
  if (bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (bit_depth == 16) png_set_strip_16(png);
  png_read_update_info(png, info);

  GrayImage img(static_cast<int>(png_get_image_width(png, info)),
                static_cast<int>(png_get_image_height(png, info)));
  std::vector<png_byte> row(png_get_rowbytes(png, info));
  for (int y = 0; y < img.height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < img.width; ++x) img.set(x, y, row[static_cast<std::size_t>(x)]);
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  // Expanded 1/2/4-bit values scale to full range already via libpng; for
  // 1-bit masks this yields exactly {0, 255}.
  return img;
}

}  // namespace thrid
