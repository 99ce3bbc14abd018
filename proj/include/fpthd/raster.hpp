#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace fpthd {

/// Single-channel intensity image, row-major, values nominally in [0,1]
/// with 1 = paper white.
struct Raster {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;

  Raster() = default;
  Raster(int w, int h, float fill = 0.0F)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {}

  bool empty() const { return width <= 0 || height <= 0; }
  float& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  float at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }

  friend bool operator==(const Raster&, const Raster&) = default;
};

/// Loads PNG/JPEG (grayscale or RGB; RGB is converted by luminance).
Raster load_image(const std::filesystem::path& path);
/// Writes an 8-bit grayscale PNG atomically.
void save_png(const std::filesystem::path& path, const Raster& image);
std::vector<std::uint8_t> encode_png(const Raster& image);

/// Area-weighted resampling when shrinking, bilinear when enlarging.
Raster resize(const Raster& src, int new_width, int new_height);

/// Averages factor×factor blocks; output dims are ceil(dim / factor).
Raster downsample_blocks(const Raster& src, int factor);

/// Median of all border pixels.
float median_border(const Raster& image);
float median(std::span<const float> values);

Raster crop_rect(const Raster& src, int x, int y, int w, int h, float fill);

/// Grey-scale morphology with a k×k element anchored at its top-left cell.
/// Operates on the given values directly (callers invert if ink is dark).
Raster dilate(const Raster& src, int k);
Raster erode(const Raster& src, int k);

}  // namespace fpthd
