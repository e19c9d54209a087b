// SPDX-License-Identifier: Apache-2.0

#include "textprune/image.hpp"

#include <cctype>
#include <fstream>
#include <iterator>
#include <sstream>

#include "textprune/autodiff.hpp"

namespace textprune {

std::string encode_ppm(const Image& image) {
  if (image.channels != 3) throw Error("PPM output needs 3 channels, image has " + std::to_string(image.channels));
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.append(image.pixels.begin(), image.pixels.end());
  return out;
}

namespace {

std::size_t read_header_int(const std::string& bytes, std::size_t& pos) {
  // Skip whitespace and comments.
  while (pos < bytes.size()) {
    if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
      ++pos;
    } else {
      break;
    }
  }
  std::size_t value = 0;
  std::size_t digits = 0;
  while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
    value = value * 10 + static_cast<std::size_t>(bytes[pos] - '0');
    ++pos;
    ++digits;
  }
  if (digits == 0) throw Error("malformed PPM header");
  return value;
}

}  // namespace

Image decode_ppm(const std::string& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw Error("not a binary PPM (P6) image");
  std::size_t pos = 2;
  const std::size_t w = read_header_int(bytes, pos);
  const std::size_t h = read_header_int(bytes, pos);
  const std::size_t maxval = read_header_int(bytes, pos);
  if (maxval != 255) throw Error("unsupported PPM maxval " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) throw Error("malformed PPM header");
  ++pos;
  Image img(w, h, 3);
  if (bytes.size() - pos < img.pixels.size()) throw Error("truncated PPM pixel data");
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), img.pixels.size(), img.pixels.begin());
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  const auto bytes = encode_ppm(image);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_ppm(bytes);
}

}  // namespace textprune
