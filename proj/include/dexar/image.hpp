// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dexar {

// Square RGB-style image, row-major [y][x][c], values in [0,1].
struct Image {
  std::size_t side = 0;
  std::size_t channels = 3;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t side_, std::size_t channels_, double fill = 0.0)
      : side(side_), channels(channels_), pixels(side_ * side_ * channels_, fill) {}

  bool empty() const { return pixels.empty(); }
  std::size_t pixel_count() const { return side * side; }
  double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * side + x) * channels + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * side + x) * channels + c]; }

  friend bool operator==(const Image&, const Image&) = default;
};

inline std::uint8_t quantize_unit(double v) {
  return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
}

inline std::vector<std::uint8_t> to_bytes(const Image& img) {
  std::vector<std::uint8_t> out(img.pixels.size());
  std::transform(img.pixels.begin(), img.pixels.end(), out.begin(), quantize_unit);
  return out;
}

inline Image from_bytes(const std::vector<std::uint8_t>& bytes, std::size_t side, std::size_t channels) {
  if (bytes.size() != side * side * channels) throw std::invalid_argument("from_bytes: size mismatch");
  Image img(side, channels);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i] / 255.0;
  return img;
}

// Separable Gaussian blur with replicated borders. sigma <= 0 returns the input.
inline Image gaussian_blur(const Image& img, double sigma) {
  if (sigma <= 0.0) return img;
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = w;
    total += w;
  }
  for (double& w : kernel) w /= total;

  const auto n = static_cast<std::ptrdiff_t>(img.side);
  auto clampi = [n](std::ptrdiff_t v) { return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, n - 1)); };
  Image tmp(img.side, img.channels), out(img.side, img.channels);
  for (std::size_t y = 0; y < img.side; ++y) {
    for (std::size_t x = 0; x < img.side; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) {
        double s = 0.0;
        for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
          s += kernel[static_cast<std::size_t>(i + radius)] * img.at(y, clampi(static_cast<std::ptrdiff_t>(x) + i), c);
        }
        tmp.at(y, x, c) = s;
      }
    }
  }
  for (std::size_t y = 0; y < img.side; ++y) {
    for (std::size_t x = 0; x < img.side; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) {
        double s = 0.0;
        for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
          s += kernel[static_cast<std::size_t>(i + radius)] * tmp.at(clampi(static_cast<std::ptrdiff_t>(y) + i), x, c);
        }
        out.at(y, x, c) = s;
      }
    }
  }
  return out;
}

// Byte length of the deflate-compressed 8-bit image; a lossless stand-in for
// image information content.
inline std::size_t compressed_size(const Image& img) {
  const auto raw = to_bytes(img);
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<Bytef> buf(bound);
  if (compress2(buf.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), Z_BEST_COMPRESSION) != Z_OK) {
    throw std::runtime_error("compressed_size: deflate failed");
  }
  return static_cast<std::size_t>(bound);
}

}  // namespace dexar
