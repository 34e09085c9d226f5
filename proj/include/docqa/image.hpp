#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace docqa {

/// 8-bit RGBA raster.
struct Image {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<std::uint8_t> rgba;

  friend bool operator==(const Image&, const Image&) = default;
};

struct PixelBox {
  std::uint32_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open [x0,x1) x [y0,y1)

  std::uint32_t width() const { return x1 - x0; }
  std::uint32_t height() const { return y1 - y0; }
  friend bool operator==(const PixelBox&, const PixelBox&) = default;
};

/// Decodes a PNG; throws Error(Ingest) on any decode failure.
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

Image crop(const Image& image, const PixelBox& box);

/// Solid image with a deterministic pattern, handy for fixtures.
Image make_test_image(std::uint32_t width, std::uint32_t height, std::uint32_t seed);

}  // namespace docqa
