#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "sduseg/errors.hpp"
#include "sduseg/netpbm.hpp"
#include "sduseg/tensor.hpp"

namespace sduseg {

// 4-neighbour binary erosion on a single-plane mask; pixels outside the
// image count as background, so the outer rim of a blob is always boundary.
inline Tensor<float> erode4(const Tensor<float>& mask) {
  const Shape4 s = mask.shape();
  if (s.n != 1 || s.c != 1) {
    throw std::invalid_argument("erode4: expected a 1x1xHxW mask, got " + s.str());
  }
  auto at = [&](int y, int x) -> float {
    if (y < 0 || y >= s.h || x < 0 || x >= s.w) return 0.0f;
    const float v = mask.data()[static_cast<std::size_t>(y) * s.w + x];
    if (v != 0.0f && v != 1.0f) {
      throw std::invalid_argument("erode4: mask must be binary");
    }
    return v;
  };
  Tensor<float> out(s);
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      const bool keep = at(y, x) == 1.0f && at(y - 1, x) == 1.0f && at(y + 1, x) == 1.0f &&
                        at(y, x - 1) == 1.0f && at(y, x + 1) == 1.0f;
      out.data()[static_cast<std::size_t>(y) * s.w + x] = keep ? 1.0f : 0.0f;
    }
  }
  return out;
}

// Input image with the mask boundary (mask XOR its erosion) recolored.
// Interior and background pixels keep their original values, so the overlay
// never changes what the mask covers.
inline PnmImage boundary_overlay(const Tensor<float>& image, const Tensor<float>& mask,
                                 std::array<std::uint16_t, 3> color = {0, 0, 255}) {
  const Shape4 is = image.shape();
  const Shape4 ms = mask.shape();
  if (is.n != 1 || (is.c != 1 && is.c != 3)) {
    throw std::invalid_argument("overlay: image must be 1x{1|3}xHxW, got " + is.str());
  }
  if (ms.h != is.h || ms.w != is.w) {
    throw DataError("overlay: mask extents " + std::to_string(ms.h) + "x" + std::to_string(ms.w) +
                    " vs image " + std::to_string(is.h) + "x" + std::to_string(is.w));
  }
  const Tensor<float> inner = erode4(mask);

  PnmImage out;
  out.channels = 3;
  out.h = is.h;
  out.w = is.w;
  out.maxval = 255;
  out.data.resize(static_cast<std::size_t>(is.h) * is.w * 3);
  const std::size_t plane = static_cast<std::size_t>(is.h) * is.w;
  for (std::size_t p = 0; p < plane; ++p) {
    const bool edge = mask.data()[p] == 1.0f && inner.data()[p] == 0.0f;
    for (int ch = 0; ch < 3; ++ch) {
      if (edge) {
        out.data[p * 3 + ch] = color[ch];
      } else {
        const float v = image.data()[is.c == 3 ? ch * plane + p : p];
        out.data[p * 3 + ch] =
            static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
      }
    }
  }
  return out;
}

}  // namespace sduseg
