#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "sduseg/gemm.hpp"
#include "sduseg/tape.hpp"
#include "sduseg/tensor.hpp"

namespace sduseg {

enum class UpsampleMode { kNearest, kBilinear };

namespace detail {

// Gradients are propagated into a tensor when it is a parameter or was itself
// produced by a taped op; plain leaf inputs opt in via requires_grad.
template <typename T>
inline bool wants_grad(const Tensor<T>& t) {
  return t.requires_grad() || t.storage()->tape_output;
}

template <typename T>
inline void mark_output(const Tensor<T>& t, Tape<T>* tape) {
  if (tape) t.storage()->tape_output = true;
}

// One image plane (C,H,W) -> cols[(C*kh*kw) x (oh*ow)], zeros where the
// kernel overhangs the padded border.
template <typename T>
void im2col(const T* src, int C, int H, int W, const ConvSpec& s, int oh, int ow, T* cols) {
  const int khw = s.kernel_h * s.kernel_w;
  const std::size_t ncols = static_cast<std::size_t>(oh) * ow;
  for (int c = 0; c < C; ++c) {
    const T* plane = src + static_cast<std::size_t>(c) * H * W;
    for (int kh = 0; kh < s.kernel_h; ++kh) {
      for (int kw = 0; kw < s.kernel_w; ++kw) {
        T* row = cols + (static_cast<std::size_t>(c) * khw + kh * s.kernel_w + kw) * ncols;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride_h - s.pad_h + kh * s.dilation_h;
          T* out = row + static_cast<std::size_t>(oy) * ow;
          if (iy < 0 || iy >= H) {
            std::fill(out, out + ow, T(0));
            continue;
          }
          const T* in = plane + static_cast<std::size_t>(iy) * W;
          const int x0 = -s.pad_w + kw * s.dilation_w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride_w + x0;
            out[ox] = (ix >= 0 && ix < W) ? in[ix] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-add of the cols gradient back onto the (C,H,W) plane. Channels are
// independent, rows within a channel are walked in fixed order.
template <typename T>
void col2im_add(const T* cols, int C, int H, int W, const ConvSpec& s, int oh, int ow, T* dst) {
  const int khw = s.kernel_h * s.kernel_w;
  const std::size_t ncols = static_cast<std::size_t>(oh) * ow;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(kernel_threads()) \
    if (kernel_threads() > 1 && C > 1)
#endif
  for (int c = 0; c < C; ++c) {
    T* plane = dst + static_cast<std::size_t>(c) * H * W;
    for (int kh = 0; kh < s.kernel_h; ++kh) {
      for (int kw = 0; kw < s.kernel_w; ++kw) {
        const T* row = cols + (static_cast<std::size_t>(c) * khw + kh * s.kernel_w + kw) * ncols;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride_h - s.pad_h + kh * s.dilation_h;
          if (iy < 0 || iy >= H) continue;
          T* out = plane + static_cast<std::size_t>(iy) * W;
          const T* in = row + static_cast<std::size_t>(oy) * ow;
          const int x0 = -s.pad_w + kw * s.dilation_w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride_w + x0;
            if (ix >= 0 && ix < W) out[ix] += in[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void check_conv_args(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                     const ConvSpec& spec) {
  spec.validate(input.shape());
  if (weight.shape().c != input.shape().c) {
    throw std::invalid_argument("conv2d: channel axis mismatch, input has " +
                                std::to_string(input.shape().c) + " channels but weight expects " +
                                std::to_string(weight.shape().c));
  }
  if (weight.shape().h != spec.kernel_h || weight.shape().w != spec.kernel_w) {
    throw std::invalid_argument("conv2d: kernel axes of weight " + weight.shape().str() +
                                " do not match spec kernel " + std::to_string(spec.kernel_h) +
                                "x" + std::to_string(spec.kernel_w));
  }
  if (bias.shape().c != weight.shape().n || bias.shape().n != 1 || bias.shape().h != 1 ||
      bias.shape().w != 1) {
    throw std::invalid_argument("conv2d: bias must be 1x" + std::to_string(weight.shape().n) +
                                "x1x1, got " + bias.shape().str());
  }
}

}  // namespace detail

// input [n, c_in, h, w] * weight [c_out, c_in, kh, kw] + bias [1, c_out, 1, 1]
// -> [n, c_out, h', w'] with h' = (h + 2p - d*(k-1) - 1)/s + 1. Patch-gather
// plus matrix multiply; conv2d_reference below is the plain-loop oracle.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 const ConvSpec& spec, Tape<T>* tape = nullptr) {
  detail::check_conv_args(input, weight, bias, spec);
  const Shape4 in = input.shape();
  const int c_out = weight.shape().n;
  const int oh = spec.out_h(in.h);
  const int ow = spec.out_w(in.w);
  const int ckk = in.c * spec.kernel_h * spec.kernel_w;
  const std::size_t ncols = static_cast<std::size_t>(oh) * ow;

  Tensor<T> out(Shape4{in.n, c_out, oh, ow});
  std::vector<T> cols(static_cast<std::size_t>(ckk) * ncols);
  for (int i = 0; i < in.n; ++i) {
    detail::im2col(input.data() + input.index(i, 0, 0, 0), in.c, in.h, in.w, spec, oh, ow,
                   cols.data());
    T* oplane = out.data() + out.index(i, 0, 0, 0);
    for (int c = 0; c < c_out; ++c) {
      std::fill(oplane + c * ncols, oplane + (c + 1) * ncols, bias.data()[c]);
    }
    gemm_nn(c_out, static_cast<int>(ncols), ckk, weight.data(), cols.data(), oplane);
  }

  if (tape) {
    detail::mark_output(out, tape);
    const bool input_grad = detail::wants_grad(input);
    // Patches are recomputed from the (immutable) input rather than saved;
    // one gather per image is cheaper than holding cols for a whole step.
    tape->record([input, weight, bias, out, spec, c_out, ckk, ncols, input_grad]() {
      const Shape4 in = input.shape();
      const int oh = spec.out_h(in.h);
      const int ow = spec.out_w(in.w);
      const T* dy = out.grad().data();
      T* dw = weight.grad().data();
      T* db = bias.grad().data();
      std::vector<T> cols(static_cast<std::size_t>(ckk) * ncols);
      std::vector<T> colsT(static_cast<std::size_t>(ckk) * ncols);
      std::vector<T> dcols;
      std::vector<T> tscratch;
      if (input_grad) dcols.resize(static_cast<std::size_t>(ckk) * ncols);
      for (int i = 0; i < in.n; ++i) {
        const T* dyp = dy + out.index(i, 0, 0, 0);
        detail::im2col(input.data() + input.index(i, 0, 0, 0), in.c, in.h, in.w, spec, oh, ow,
                       cols.data());
        transpose(ckk, static_cast<int>(ncols), cols.data(), colsT.data());
        gemm_nn(c_out, ckk, static_cast<int>(ncols), dyp, colsT.data(), dw);
        for (int c = 0; c < c_out; ++c) {
          T s = 0;
          const T* row = dyp + c * ncols;
          for (std::size_t j = 0; j < ncols; ++j) s += row[j];
          db[c] += s;
        }
        if (input_grad) {
          std::fill(dcols.begin(), dcols.end(), T(0));
          gemm_tn(c_out, static_cast<int>(ncols), ckk, weight.data(), dyp, dcols.data(),
                  tscratch);
          detail::col2im_add(dcols.data(), in.c, in.h, in.w, spec, oh, ow,
                             input.grad().data() + input.index(i, 0, 0, 0));
        }
      }
    });
  }
  return out;
}

// Direct nested-loop convolution, forward only. Kept as the independent
// oracle for the gathered path.
template <typename T>
Tensor<T> conv2d_reference(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           const ConvSpec& spec) {
  detail::check_conv_args(input, weight, bias, spec);
  const Shape4 in = input.shape();
  const int c_out = weight.shape().n;
  const int oh = spec.out_h(in.h);
  const int ow = spec.out_w(in.w);
  Tensor<T> out(Shape4{in.n, c_out, oh, ow});
  for (int i = 0; i < in.n; ++i) {
    for (int co = 0; co < c_out; ++co) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          T acc = bias.data()[co];
          for (int ci = 0; ci < in.c; ++ci) {
            for (int kh = 0; kh < spec.kernel_h; ++kh) {
              const int iy = oy * spec.stride_h - spec.pad_h + kh * spec.dilation_h;
              if (iy < 0 || iy >= in.h) continue;
              for (int kw = 0; kw < spec.kernel_w; ++kw) {
                const int ix = ox * spec.stride_w - spec.pad_w + kw * spec.dilation_w;
                if (ix < 0 || ix >= in.w) continue;
                acc += input.at(i, ci, iy, ix) * weight.at(co, ci, kh, kw);
              }
            }
          }
          out.at(i, co, oy, ox) = acc;
        }
      }
    }
  }
  return out;
}

// 2x2 window, stride 2. Ties go to the first element in row-major window
// order; backward routes the gradient to the argmax.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, Tape<T>* tape = nullptr) {
  const Shape4 in = input.shape();
  if (in.h % 2 != 0) {
    throw std::invalid_argument("maxpool2d: height extent must be even, got " +
                                std::to_string(in.h));
  }
  if (in.w % 2 != 0) {
    throw std::invalid_argument("maxpool2d: width extent must be even, got " +
                                std::to_string(in.w));
  }
  const int oh = in.h / 2, ow = in.w / 2;
  Tensor<T> out(Shape4{in.n, in.c, oh, ow});
  std::vector<std::int64_t> argmax(tape ? out.numel() : 0);

  const int planes = in.n * in.c;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(kernel_threads()) \
    if (kernel_threads() > 1 && planes > 1)
#endif
  for (int p = 0; p < planes; ++p) {
    const T* src = input.data() + static_cast<std::size_t>(p) * in.h * in.w;
    T* dst = out.data() + static_cast<std::size_t>(p) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const std::size_t base = static_cast<std::size_t>(2 * oy) * in.w + 2 * ox;
        std::size_t best = base;
        T bv = src[base];
        const std::size_t cand[3] = {base + 1, base + in.w, base + in.w + 1};
        for (std::size_t k : cand) {
          if (src[k] > bv) {
            bv = src[k];
            best = k;
          }
        }
        dst[static_cast<std::size_t>(oy) * ow + ox] = bv;
        if (tape) {
          argmax[static_cast<std::size_t>(p) * oh * ow + oy * ow + ox] =
              static_cast<std::int64_t>(p) * in.h * in.w + static_cast<std::int64_t>(best);
        }
      }
    }
  }

  if (tape) {
    detail::mark_output(out, tape);
    tape->record([input, out, idx = std::move(argmax)]() {
      const T* dy = out.grad().data();
      T* dx = input.grad().data();
      for (std::size_t o = 0; o < idx.size(); ++o) dx[idx[o]] += dy[o];
    });
  }
  return out;
}

namespace detail {

struct LinearTap {
  int i0, i1;
  double frac;
};

// Half-pixel source coordinate for 2x upsampling, clamped to the valid range.
inline LinearTap bilinear_tap(int o, int in_extent) {
  double s = 0.5 * o - 0.25;
  if (s < 0) s = 0;
  const double smax = in_extent - 1;
  if (s > smax) s = smax;
  const int i0 = static_cast<int>(s);
  const int i1 = std::min(i0 + 1, in_extent - 1);
  return {i0, i1, s - i0};
}

}  // namespace detail

// Doubles h and w. Nearest replicates each value into a 2x2 block; bilinear
// interpolates at half-pixel centers without corner alignment. Both are
// linear operators.
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& input, UpsampleMode mode, Tape<T>* tape = nullptr) {
  const Shape4 in = input.shape();
  const int oh = 2 * in.h, ow = 2 * in.w;
  Tensor<T> out(Shape4{in.n, in.c, oh, ow});

  std::vector<detail::LinearTap> th(oh), tw(ow);
  if (mode == UpsampleMode::kBilinear) {
    for (int o = 0; o < oh; ++o) th[o] = detail::bilinear_tap(o, in.h);
    for (int o = 0; o < ow; ++o) tw[o] = detail::bilinear_tap(o, in.w);
  }

  const int planes = in.n * in.c;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(kernel_threads()) \
    if (kernel_threads() > 1 && planes > 1)
#endif
  for (int p = 0; p < planes; ++p) {
    const T* src = input.data() + static_cast<std::size_t>(p) * in.h * in.w;
    T* dst = out.data() + static_cast<std::size_t>(p) * oh * ow;
    if (mode == UpsampleMode::kNearest) {
      for (int oy = 0; oy < oh; ++oy) {
        const T* srow = src + static_cast<std::size_t>(oy / 2) * in.w;
        T* drow = dst + static_cast<std::size_t>(oy) * ow;
        for (int ox = 0; ox < ow; ++ox) drow[ox] = srow[ox / 2];
      }
    } else {
      for (int oy = 0; oy < oh; ++oy) {
        const auto& y = th[oy];
        const T* r0 = src + static_cast<std::size_t>(y.i0) * in.w;
        const T* r1 = src + static_cast<std::size_t>(y.i1) * in.w;
        T* drow = dst + static_cast<std::size_t>(oy) * ow;
        for (int ox = 0; ox < ow; ++ox) {
          const auto& x = tw[ox];
          const double v0 = (1.0 - x.frac) * r0[x.i0] + x.frac * r0[x.i1];
          const double v1 = (1.0 - x.frac) * r1[x.i0] + x.frac * r1[x.i1];
          drow[ox] = static_cast<T>((1.0 - y.frac) * v0 + y.frac * v1);
        }
      }
    }
  }

  if (tape) {
    detail::mark_output(out, tape);
    tape->record([input, out, mode, th = std::move(th), tw = std::move(tw)]() {
      const Shape4 in = input.shape();
      const int oh = 2 * in.h, ow = 2 * in.w;
      const int planes = in.n * in.c;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(kernel_threads()) \
    if (kernel_threads() > 1 && planes > 1)
#endif
      for (int p = 0; p < planes; ++p) {
        const T* dy = out.grad().data() + static_cast<std::size_t>(p) * oh * ow;
        T* dx = input.grad().data() + static_cast<std::size_t>(p) * in.h * in.w;
        if (mode == UpsampleMode::kNearest) {
          for (int oy = 0; oy < oh; ++oy) {
            T* xrow = dx + static_cast<std::size_t>(oy / 2) * in.w;
            const T* yrow = dy + static_cast<std::size_t>(oy) * ow;
            for (int ox = 0; ox < ow; ++ox) xrow[ox / 2] += yrow[ox];
          }
        } else {
          for (int oy = 0; oy < oh; ++oy) {
            const auto& y = th[oy];
            T* r0 = dx + static_cast<std::size_t>(y.i0) * in.w;
            T* r1 = dx + static_cast<std::size_t>(y.i1) * in.w;
            const T* yrow = dy + static_cast<std::size_t>(oy) * ow;
            for (int ox = 0; ox < ow; ++ox) {
              const auto& x = tw[ox];
              const double g = yrow[ox];
              r0[x.i0] += static_cast<T>((1.0 - y.frac) * (1.0 - x.frac) * g);
              r0[x.i1] += static_cast<T>((1.0 - y.frac) * x.frac * g);
              r1[x.i0] += static_cast<T>(y.frac * (1.0 - x.frac) * g);
              r1[x.i1] += static_cast<T>(y.frac * x.frac * g);
            }
          }
        }
      }
    });
  }
  return out;
}

// Channel concatenation in argument order; parts must agree on n, h, w.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts, Tape<T>* tape = nullptr) {
  if (parts.empty()) {
    throw std::invalid_argument("concat_channels: at least one part required");
  }
  const Shape4 ref = parts.front().shape();
  int total_c = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Shape4 s = parts[k].shape();
    if (s.n != ref.n || s.h != ref.h || s.w != ref.w) {
      throw std::invalid_argument("concat_channels: part " + std::to_string(k) + " shape " +
                                  s.str() + " does not match batch/height/width of " + ref.str());
    }
    total_c += s.c;
  }
  Tensor<T> out(Shape4{ref.n, total_c, ref.h, ref.w});
  const std::size_t plane = static_cast<std::size_t>(ref.h) * ref.w;
  for (int i = 0; i < ref.n; ++i) {
    int coff = 0;
    for (const auto& part : parts) {
      const int pc = part.shape().c;
      std::memcpy(out.data() + out.index(i, coff, 0, 0), part.data() + part.index(i, 0, 0, 0),
                  sizeof(T) * plane * pc);
      coff += pc;
    }
  }
  if (tape) {
    detail::mark_output(out, tape);
    tape->record([parts, out, plane]() {
      const Shape4 os = out.shape();
      const T* dy = out.grad().data();
      for (int i = 0; i < os.n; ++i) {
        int coff = 0;
        for (const auto& part : parts) {
          const int pc = part.shape().c;
          T* dx = part.grad().data() + part.index(i, 0, 0, 0);
          const T* src = dy + (static_cast<std::size_t>(i) * os.c + coff) * plane;
          for (std::size_t j = 0; j < plane * pc; ++j) dx[j] += src[j];
          coff += pc;
        }
      }
    });
  }
  return out;
}

// Channels [c0, c1) as a fresh tensor.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, int c0, int c1, Tape<T>* tape = nullptr) {
  const Shape4 in = input.shape();
  if (c0 < 0 || c1 <= c0 || c1 > in.c) {
    throw std::invalid_argument("slice_channels: invalid channel range [" + std::to_string(c0) +
                                ", " + std::to_string(c1) + ") for " + std::to_string(in.c) +
                                " channels");
  }
  Tensor<T> out(Shape4{in.n, c1 - c0, in.h, in.w});
  const std::size_t plane = static_cast<std::size_t>(in.h) * in.w;
  for (int i = 0; i < in.n; ++i) {
    std::memcpy(out.data() + out.index(i, 0, 0, 0), input.data() + input.index(i, c0, 0, 0),
                sizeof(T) * plane * (c1 - c0));
  }
  if (tape) {
    detail::mark_output(out, tape);
    tape->record([input, out, c0, plane]() {
      const Shape4 os = out.shape();
      const T* dy = out.grad().data();
      T* dx = input.grad().data();
      for (int i = 0; i < os.n; ++i) {
        T* dst = dx + input.index(i, c0, 0, 0);
        const T* src = dy + static_cast<std::size_t>(i) * os.c * plane;
        for (std::size_t j = 0; j < plane * os.c; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input, Tape<T>* tape = nullptr) {
  Tensor<T> out(input.shape());
  const T* x = input.data();
  T* y = out.data();
  const std::size_t n = input.numel();
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  if (tape) {
    detail::mark_output(out, tape);
    tape->record([input, out]() {
      const T* x = input.data();
      const T* dy = out.grad().data();
      T* dx = input.grad().data();
      const std::size_t n = input.numel();
      for (std::size_t i = 0; i < n; ++i) {
        if (x[i] > T(0)) dx[i] += dy[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input, Tape<T>* tape = nullptr) {
  Tensor<T> out(input.shape());
  const T* x = input.data();
  T* y = out.data();
  const std::size_t n = input.numel();
  for (std::size_t i = 0; i < n; ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
  if (tape) {
    detail::mark_output(out, tape);
    tape->record([input, out]() {
      const T* y = out.data();
      const T* dy = out.grad().data();
      T* dx = input.grad().data();
      const std::size_t n = input.numel();
      for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * y[i] * (T(1) - y[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  if (!(a.shape() == b.shape())) {
    throw std::invalid_argument("add: shape mismatch " + a.shape().str() + " vs " +
                                b.shape().str());
  }
  Tensor<T> out(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (tape) {
    detail::mark_output(out, tape);
    tape->record([a, b, out]() {
      const T* dy = out.grad().data();
      T* da = a.grad().data();
      T* db = b.grad().data();
      const std::size_t n = out.numel();
      for (std::size_t i = 0; i < n; ++i) {
        da[i] += dy[i];
        db[i] += dy[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T alpha, Tape<T>* tape = nullptr) {
  Tensor<T> out(input.shape());
  const std::size_t n = input.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = alpha * input.data()[i];
  if (tape) {
    detail::mark_output(out, tape);
    tape->record([input, out, alpha]() {
      const T* dy = out.grad().data();
      T* dx = input.grad().data();
      const std::size_t n = out.numel();
      for (std::size_t i = 0; i < n; ++i) dx[i] += alpha * dy[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& input, Tape<T>* tape = nullptr) {
  T acc = 0;
  const std::size_t n = input.numel();
  for (std::size_t i = 0; i < n; ++i) acc += input.data()[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (tape) {
    detail::mark_output(out, tape);
    tape->record([input, out]() {
      const T g = out.grad()[0];
      T* dx = input.grad().data();
      const std::size_t n = input.numel();
      for (std::size_t i = 0; i < n; ++i) dx[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& input, Tape<T>* tape = nullptr) {
  Tensor<T> s = sum(input, tape);
  return scale(s, T(1) / static_cast<T>(input.numel()), tape);
}

// Per-channel normalization over (n,h,w) with learned scale/shift. Training
// uses biased batch statistics and refreshes the running estimates (unbiased
// variance); inference normalizes with the running estimates.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, bool training, T momentum,
                      T eps, Tape<T>* tape = nullptr) {
  const Shape4 in = input.shape();
  const int C = in.c;
  auto check_param = [&](const Tensor<T>& p, const char* what) {
    if (p.shape().c != C || p.shape().n != 1 || p.shape().h != 1 || p.shape().w != 1) {
      throw std::invalid_argument(std::string("batchnorm2d: ") + what + " must be 1x" +
                                  std::to_string(C) + "x1x1, got " + p.shape().str());
    }
  };
  check_param(gamma, "scale");
  check_param(beta, "shift");
  check_param(running_mean, "running mean");
  check_param(running_var, "running variance");

  const std::size_t cnt = static_cast<std::size_t>(in.n) * in.h * in.w;
  if (training && cnt < 2) {
    throw std::invalid_argument(
        "batchnorm2d: training-mode statistics need n*h*w >= 2 elements per channel, got 1");
  }

  Tensor<T> out(in);
  std::vector<T> xhat(tape ? input.numel() : 0);
  std::vector<T> inv_std(C);
  const std::size_t plane = static_cast<std::size_t>(in.h) * in.w;

#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(kernel_threads()) \
    if (kernel_threads() > 1 && C > 1)
#endif
  for (int c = 0; c < C; ++c) {
    T mu, var;
    if (training) {
      T s = 0;
      for (int i = 0; i < in.n; ++i) {
        const T* p = input.data() + input.index(i, c, 0, 0);
        for (std::size_t j = 0; j < plane; ++j) s += p[j];
      }
      mu = s / static_cast<T>(cnt);
      T ss = 0;
      for (int i = 0; i < in.n; ++i) {
        const T* p = input.data() + input.index(i, c, 0, 0);
        for (std::size_t j = 0; j < plane; ++j) {
          const T d = p[j] - mu;
          ss += d * d;
        }
      }
      var = ss / static_cast<T>(cnt);
      running_mean.data()[c] = (T(1) - momentum) * running_mean.data()[c] + momentum * mu;
      running_var.data()[c] =
          (T(1) - momentum) * running_var.data()[c] +
          momentum * var * static_cast<T>(cnt) / static_cast<T>(cnt - 1);
    } else {
      mu = running_mean.data()[c];
      var = running_var.data()[c];
    }
    const T istd = T(1) / std::sqrt(var + eps);
    inv_std[c] = istd;
    const T g = gamma.data()[c];
    const T b = beta.data()[c];
    for (int i = 0; i < in.n; ++i) {
      const T* p = input.data() + input.index(i, c, 0, 0);
      T* q = out.data() + out.index(i, c, 0, 0);
      T* xh = tape ? xhat.data() + input.index(i, c, 0, 0) : nullptr;
      for (std::size_t j = 0; j < plane; ++j) {
        const T h = (p[j] - mu) * istd;
        if (xh) xh[j] = h;
        q[j] = g * h + b;
      }
    }
  }

  if (tape) {
    detail::mark_output(out, tape);
    tape->record([input, gamma, beta, out, xh = std::move(xhat), istd = std::move(inv_std),
                  training, plane]() {
      const Shape4 in = input.shape();
      const std::size_t cnt = static_cast<std::size_t>(in.n) * plane;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(kernel_threads()) \
    if (kernel_threads() > 1 && in.c > 1)
#endif
      for (int c = 0; c < in.c; ++c) {
        T sum_dy = 0, sum_dy_xh = 0;
        for (int i = 0; i < in.n; ++i) {
          const std::size_t off = out.index(i, c, 0, 0);
          const T* dy = out.grad().data() + off;
          const T* h = xh.data() + off;
          for (std::size_t j = 0; j < plane; ++j) {
            sum_dy += dy[j];
            sum_dy_xh += dy[j] * h[j];
          }
        }
        gamma.grad().data()[c] += sum_dy_xh;
        beta.grad().data()[c] += sum_dy;
        const T g = gamma.data()[c];
        const T is = istd[c];
        if (training) {
          const T m_dy = sum_dy / static_cast<T>(cnt);
          const T m_dy_xh = sum_dy_xh / static_cast<T>(cnt);
          for (int i = 0; i < in.n; ++i) {
            const std::size_t off = out.index(i, c, 0, 0);
            const T* dy = out.grad().data() + off;
            const T* h = xh.data() + off;
            T* dx = input.grad().data() + off;
            for (std::size_t j = 0; j < plane; ++j) {
              dx[j] += g * is * (dy[j] - m_dy - h[j] * m_dy_xh);
            }
          }
        } else {
          for (int i = 0; i < in.n; ++i) {
            const std::size_t off = out.index(i, c, 0, 0);
            const T* dy = out.grad().data() + off;
            T* dx = input.grad().data() + off;
            for (std::size_t j = 0; j < plane; ++j) dx[j] += g * is * dy[j];
          }
        }
      }
    });
  }
  return out;
}

}  // namespace sduseg
