#pragma once

#include <png.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "dgstyle/tensor.hpp"

namespace dgstyle {

class IoError : public Error {
 public:
  using Error::Error;
};

/// 8-bit single-channel image, row-major.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
};

inline void write_png(const std::filesystem::path& path, const GrayImage& img) {
  if (img.pixels.size() != img.width * img.height) throw ShapeError("write_png: pixel buffer size mismatch");
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, img.pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw IoError("write_png: " + path.string() + ": " + msg);
  }
}

/// Decodes any PNG and converts it to 8-bit grayscale.
inline GrayImage read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw IoError("read_png: " + path.string() + ": " + msg);
  }
  image.format = PNG_FORMAT_GRAY;
  GrayImage out;
  out.width = image.width;
  out.height = image.height;
  out.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw IoError("read_png: " + path.string() + ": " + msg);
  }
  return out;
}

}  // namespace dgstyle
