#pragma once

// 8-bit RGB / grayscale PNG through libpng's simplified API.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "predinet/errors.hpp"
#include "predinet/tensor.hpp"

namespace predinet::png {

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

/// Writes an [H,W,3] or [H,W] tensor with values in [0,1].
inline void write(const std::string& path, const Tensor<float>& img) {
  if (img.rank() != 2 && !(img.rank() == 3 && img.dim(2) == 3)) {
    throw DimensionError("png::write: expected [H,W] or [H,W,3], got " + to_string(img.shape()));
  }
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.dim(1));
  pi.height = static_cast<png_uint_32>(img.dim(0));
  pi.format = img.rank() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> bytes(img.size());
  std::transform(img.data().begin(), img.data().end(), bytes.begin(), to_byte);
  if (!png_image_write_to_file(&pi, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw DataError("png::write " + path + ": " + pi.message);
  }
}

/// Reads any PNG as [H,W,3] floats in [0,1].
inline Tensor<float> read_rgb(const std::string& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str())) throw DataError("png::read " + path + ": " + pi.message);
  pi.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, bytes.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw DataError("png::read " + path + ": " + pi.message);
  }
  Tensor<float> out({pi.height, pi.width, 3});
  for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = static_cast<float>(bytes[i]) / 255.0f;
  return out;
}

/// Nearest-neighbour upscale by an integer factor.
inline Tensor<float> upscale(const Tensor<float>& img, std::size_t factor) {
  const std::size_t H = img.dim(0), W = img.dim(1), C = img.rank() == 3 ? img.dim(2) : 1;
  Shape s = img.rank() == 3 ? Shape{H * factor, W * factor, C} : Shape{H * factor, W * factor};
  Tensor<float> out(s);
  for (std::size_t y = 0; y < H * factor; ++y)
    for (std::size_t x = 0; x < W * factor; ++x)
      for (std::size_t c = 0; c < C; ++c) out[(y * W * factor + x) * C + c] = img[((y / factor) * W + x / factor) * C + c];
  return out;
}

}  // namespace predinet::png
