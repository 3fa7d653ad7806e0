#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fuseloc/tensor.hpp"

namespace fuseloc {

/// 8-bit RGB image, rows top to bottom, channels interleaved.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> data;  // height * width * 3

  Image() = default;
  Image(std::size_t w, std::size_t h) : width(w), height(h), data(w * h * 3, 0) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return data[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return data[(y * width + x) * 3 + c]; }
  bool operator==(const Image&) const = default;
};

/// Binary PPM (P6, maxval 255).
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);
std::string encode_ppm(const Image& img);
Image decode_ppm(const std::string& bytes);

/// [N, 3, H, W] tensor with values (v / 255 - 0.5) / 0.25. All images must
/// share one size.
Var images_to_tensor(Tape& tape, std::span<const Image* const> images);

}  // namespace fuseloc
