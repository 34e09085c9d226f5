#include "docqa/image.hpp"

#include <png.h>

#include <cstring>

#include "docqa/error.hpp"

namespace docqa {

Image read_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw Error(ErrorKind::Ingest,
                "cannot decode PNG " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGBA;
  Image img;
  img.width = png.width;
  img.height = png.height;
  img.rgba.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, img.rgba.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw Error(ErrorKind::Ingest, "cannot decode PNG " + path.string() + ": " + msg);
  }
  if (img.width == 0 || img.height == 0) {
    throw Error(ErrorKind::Ingest, "empty PNG " + path.string());
  }
  return img;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.rgba.size() != static_cast<std::size_t>(image.width) * image.height * 4) {
    throw Error(ErrorKind::InvalidInput, "write_png: pixel buffer size mismatch");
  }
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = image.width;
  png.height = image.height;
  png.format = PNG_FORMAT_RGBA;
  if (!png_image_write_to_file(&png, path.c_str(), 0, image.rgba.data(), 0, nullptr)) {
    throw Error(ErrorKind::Ingest, "cannot write PNG " + path.string() + ": " + png.message);
  }
}

Image crop(const Image& image, const PixelBox& box) {
  if (box.x1 <= box.x0 || box.y1 <= box.y0 || box.x1 > image.width ||
      box.y1 > image.height) {
    throw Error(ErrorKind::InvalidInput, "crop: box outside image");
  }
  Image out;
  out.width = box.width();
  out.height = box.height();
  out.rgba.resize(static_cast<std::size_t>(out.width) * out.height * 4);
  for (std::uint32_t y = 0; y < out.height; ++y) {
    const auto* src = image.rgba.data() +
                      (static_cast<std::size_t>(box.y0 + y) * image.width + box.x0) * 4;
    std::memcpy(out.rgba.data() + static_cast<std::size_t>(y) * out.width * 4, src,
                static_cast<std::size_t>(out.width) * 4);
  }
  return out;
}

Image make_test_image(std::uint32_t width, std::uint32_t height, std::uint32_t seed) {
  Image img;
  img.width = width;
  img.height = height;
  img.rgba.resize(static_cast<std::size_t>(width) * height * 4);
  for (std::uint32_t y = 0; y < height; ++y)
    for (std::uint32_t x = 0; x < width; ++x) {
      auto* p = img.rgba.data() + (static_cast<std::size_t>(y) * width + x) * 4;
      p[0] = static_cast<std::uint8_t>(x * 7 + seed * 31);
      p[1] = static_cast<std::uint8_t>(y * 5 + seed * 17);
      p[2] = static_cast<std::uint8_t>((x ^ y) + seed);
      p[3] = 255;
    }
  return img;
}

}  // namespace docqa
