#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace mos {

/// Planar (CHW) floating-point image with values nominally in [0,1].
struct Image {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), pixels(static_cast<std::size_t>(c) * h * w, fill) {}

  [[nodiscard]] bool empty() const { return pixels.empty(); }
  [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  [[nodiscard]] double& at(int c, int y, int x) { return pixels[c * plane() + static_cast<std::size_t>(y) * width + x]; }
  [[nodiscard]] double at(int c, int y, int x) const {
    return pixels[c * plane() + static_cast<std::size_t>(y) * width + x];
  }
  [[nodiscard]] bool same_shape(const Image& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
  friend bool operator==(const Image&, const Image&) = default;
};

/// 8-bit raster as stored on disk, interleaved.
struct Raster8 {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;
};

/// PNG reader/writer (grey or RGB, 8-bit). Palette and 16-bit inputs are
/// converted to 8-bit; alpha is dropped.
Raster8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Raster8& raster);

/// RGB raster -> 3-channel image in [0,1] (divides by 255). Grey rasters are
/// replicated into three channels.
Image to_image(const Raster8& raster);
/// Rounds to the nearest 8-bit level after clamping to [0,1].
Raster8 to_raster(const Image& image);

Image load_image(const std::filesystem::path& path);
void save_image(const std::filesystem::path& path, const Image& image);

}  // namespace mos
