#include "fuseloc/image.hpp"

#include <cctype>
#include <stdexcept>

#include "binary_io.hpp"

namespace fuseloc {

std::string encode_ppm(const Image& img) {
  if (img.data.size() != img.width * img.height * 3) throw std::invalid_argument("image buffer size mismatch");
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.data.data()), img.data.size());
  return out;
}

Image decode_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw std::runtime_error("ppm: truncated header");
    return bytes.substr(start, pos - start);
  };
  if (token() != "P6") throw std::runtime_error("ppm: expected P6 magic");
  const auto w = std::stoul(token());
  const auto h = std::stoul(token());
  if (token() != "255") throw std::runtime_error("ppm: only maxval 255 is supported");
  ++pos;  // single whitespace before the raster
  Image img(w, h);
  if (bytes.size() - pos != img.data.size()) throw std::runtime_error("ppm: raster size mismatch");
  std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end(), img.data.begin());
  return img;
}

void write_ppm(const std::string& path, const Image& img) { detail::write_file_atomic(path, encode_ppm(img)); }

Image read_ppm(const std::string& path) {
  try {
    return decode_ppm(detail::read_file(path));
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

Var images_to_tensor(Tape& tape, std::span<const Image* const> images) {
  if (images.empty()) throw std::invalid_argument("no images");
  const std::size_t W = images[0]->width, H = images[0]->height;
  std::vector<double> v(images.size() * 3 * H * W);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& img = *images[n];
    if (img.width != W || img.height != H)
      throw ShapeError("images_to_tensor", "image_size", "all images in a batch must share one size");
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          v[((n * 3 + c) * H + y) * W + x] = (img.at(x, y, c) / 255.0 - 0.5) / 0.25;
  }
  return tape.constant({images.size(), 3, H, W}, std::move(v));
}

}  // namespace fuseloc
