#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "clsa/data_model.hpp"

namespace clsa {

// 8-bit interleaved RGB raster.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::uint8_t* pixel(int x, int y) { return &rgb[(static_cast<std::size_t>(y) * width + x) * 3]; }
  const std::uint8_t* pixel(int x, int y) const {
    return &rgb[(static_cast<std::size_t>(y) * width + x) * 3];
  }
  bool operator==(const Image&) const = default;
};

Image read_png(const std::filesystem::path& path);
void write_png(const Image& image, const std::filesystem::path& path);

// Runtime libpng version string.
std::string png_library_version();

// Per-channel input normalisation applied to network inputs.
inline constexpr float kPixelMean = 0.5f;
inline constexpr float kPixelStd = 0.25f;

// Bilinear resample of the box region to out_h x out_w, returned planar
// (3 x out_h x out_w) and normalised as (v / 255 - mean) / std. The box may
// extend past the image; samples are clamped to the border.
std::vector<float> crop_resize(const Image& image, const BoundingBox& box, int out_h, int out_w);

}  // namespace clsa
