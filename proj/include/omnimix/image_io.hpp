#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "omnimix/tensor.hpp"

// 8-bit RGB PNG <-> [3,H,W] tensors in [-1, 1].
//   write: byte = round((v + 1) / 2 · 255), clamped to [0, 255]
//   read:  v = byte / 255 · 2 − 1

namespace omnimix {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::uint8_t quantize(double v) {
  const double q = std::round((v + 1.0) / 2.0 * 255.0);
  return static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0));
}

inline double dequantize(std::uint8_t b) { return b / 255.0 * 2.0 - 1.0; }

/// Interleaved RGB bytes of a [3,H,W] tensor.
template <typename T>
std::vector<std::uint8_t> to_rgb_bytes(const Tensor<T>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("expected a [3, H, W] image, got " + to_string(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::vector<std::uint8_t> bytes(3 * h * w);
  auto src = image.data();
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < h * w; ++p) {
      bytes[p * 3 + c] = quantize(static_cast<double>(src[c * h * w + p]));
    }
  }
  return bytes;
}

template <typename T>
Tensor<T> from_rgb_bytes(const std::vector<std::uint8_t>& bytes, std::size_t h, std::size_t w) {
  std::vector<T> data(3 * h * w);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < h * w; ++p) {
      data[c * h * w + p] = static_cast<T>(dequantize(bytes[p * 3 + c]));
    }
  }
  return Tensor<T>(Shape{3, h, w}, std::move(data));
}

template <typename T>
void write_png(const std::string& path, const Tensor<T>& image) {
  auto bytes = to_rgb_bytes(image);
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.dim(2));
  png.height = static_cast<png_uint_32>(image.dim(1));
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw DataError("cannot write PNG " + path + ": " + png.message);
  }
}

template <typename T>
Tensor<T> read_png(const std::string& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw DataError("cannot decode PNG " + path + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, bytes.data(), 0, nullptr)) {
    png_image_free(&png);
    throw DataError("cannot decode PNG " + path + ": " + png.message);
  }
  return from_rgb_bytes<T>(bytes, png.height, png.width);
}

}  // namespace omnimix
