#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "sduseg/errors.hpp"

namespace sduseg {

// Raw (binary) NetPBM raster: P5 grayscale or P6 RGB, samples interleaved
// row-major, 1 byte up to maxval 255 and big-endian 2 bytes above.
struct PnmImage {
  int channels = 0;  // 1 or 3
  int h = 0;
  int w = 0;
  int maxval = 0;
  std::vector<std::uint16_t> data;

  std::size_t numel() const { return data.size(); }
};

namespace detail {

inline int pnm_token(std::istream& in, const std::string& path) {
  // Whitespace separates tokens; '#' starts a comment running to end of line.
  int c = in.get();
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    }
    c = in.get();
  }
  if (c == EOF || !std::isdigit(c)) {
    throw DataError("netpbm: malformed header in " + path);
  }
  int value = 0;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    if (value > 0xFFFF) throw DataError("netpbm: header value out of range in " + path);
    c = in.get();
  }
  if (c != EOF) in.unget();
  return value;
}

}  // namespace detail

inline PnmImage read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("netpbm: cannot open " + path);
  char magic[2] = {0, 0};
  in.read(magic, 2);
  PnmImage img;
  if (magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
    throw DataError("netpbm: unsupported magic in " + path + " (only raw P5/P6)");
  }
  img.channels = magic[1] == '5' ? 1 : 3;
  img.w = detail::pnm_token(in, path);
  img.h = detail::pnm_token(in, path);
  img.maxval = detail::pnm_token(in, path);
  if (img.w < 1 || img.h < 1 || img.maxval < 1) {
    throw DataError("netpbm: degenerate extents in " + path);
  }
  in.get();  // single whitespace byte before the raster

  const std::size_t count = static_cast<std::size_t>(img.w) * img.h * img.channels;
  img.data.resize(count);
  if (img.maxval < 256) {
    std::vector<unsigned char> raw(count);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(in.gcount()) != count) {
      throw DataError("netpbm: truncated raster in " + path);
    }
    for (std::size_t i = 0; i < count; ++i) img.data[i] = raw[i];
  } else {
    std::vector<unsigned char> raw(count * 2);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
      throw DataError("netpbm: truncated raster in " + path);
    }
    for (std::size_t i = 0; i < count; ++i) {
      img.data[i] = static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
    }
  }
  return img;
}

// 8-bit writers; bytes are row-major, interleaved for RGB.
inline void write_pgm(const std::string& path, int h, int w,
                      const std::vector<unsigned char>& bytes) {
  if (bytes.size() != static_cast<std::size_t>(h) * w) {
    throw DataError("netpbm: pgm payload is " + std::to_string(bytes.size()) + " bytes for " +
                    std::to_string(w) + "x" + std::to_string(h));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("netpbm: cannot write " + path);
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("netpbm: short write to " + path);
}

inline void write_ppm(const std::string& path, int h, int w,
                      const std::vector<unsigned char>& bytes) {
  if (bytes.size() != static_cast<std::size_t>(h) * w * 3) {
    throw DataError("netpbm: ppm payload is " + std::to_string(bytes.size()) + " bytes for " +
                    std::to_string(w) + "x" + std::to_string(h));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("netpbm: cannot write " + path);
  out << "P6\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("netpbm: short write to " + path);
}

inline void write_ppm(const std::string& path, const PnmImage& img) {
  if (img.channels != 3 || img.maxval != 255) {
    throw DataError("netpbm: write_ppm needs an 8-bit RGB image for " + path);
  }
  std::vector<unsigned char> bytes(img.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(img.data[i]);
  }
  write_ppm(path, img.h, img.w, bytes);
}

}  // namespace sduseg
