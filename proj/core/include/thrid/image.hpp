#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace thrid {

// 8-bit grayscale raster, row-major.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h),
        pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {}

  std::uint8_t at(int x, int y) const {
    return pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                  static_cast<std::size_t>(x)];
  }
  void set(int x, int y, std::uint8_t v) {
    pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
           static_cast<std::size_t>(x)] = v;
  }
  std::size_t size() const { return pixels.size(); }
};

// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(int w, int h)
      : width(w), height(h),
        pixels(3 * static_cast<std::size_t>(w) * static_cast<std::size_t>(h), 0) {}
};

// PNG I/O (fixed encoder settings, so identical rasters give identical bytes).
void write_png_gray8(const std::filesystem::path& path, const GrayImage& img);
// 1-bit grayscale; every pixel must be 0 or 255.
void write_png_gray1(const std::filesystem::path& path, const GrayImage& img);
void write_png_rgb8(const std::filesystem::path& path, const RgbImage& img);
// Reads 1/2/4/8-bit grayscale PNGs (expanded to 8-bit). Errors on color images.
GrayImage read_png_gray8(const std::filesystem::path& path);

}  // namespace thrid
