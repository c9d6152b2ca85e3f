#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sduseg/tape.hpp"
#include "sduseg/tensor.hpp"

namespace sduseg {

namespace detail {

template <typename T>
void check_mask_pair(const Tensor<T>& truth, const Tensor<T>& pred) {
  if (!(truth.shape() == pred.shape())) {
    throw std::invalid_argument("mask pair: truth " + truth.shape().str() + " vs prediction " +
                                pred.shape().str());
  }
  for (std::size_t i = 0; i < truth.numel(); ++i) {
    const T v = truth.data()[i];
    if (v != T(0) && v != T(1)) {
      throw std::invalid_argument("mask pair: truth must be exactly 0 or 1, found " +
                                  std::to_string(static_cast<double>(v)));
    }
  }
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const T v = pred.data()[i];
    if (!(v >= T(0) && v <= T(1))) {
      throw std::invalid_argument("mask pair: prediction outside [0, 1], found " +
                                  std::to_string(static_cast<double>(v)));
    }
  }
}

}  // namespace detail

// Dice loss against the object plus Dice loss against the background, each
// smoothed by eps:
//   L = 2 - (2*sum(p*q)+eps)/(sum(p)+sum(q)+eps)
//         - (2*sum((1-p)(1-q))+eps)/(sum(1-p)+sum(1-q)+eps)
// evaluated per image and class channel, summed over classes, mean over the
// batch. Differentiable in the prediction q.
template <typename T>
Tensor<T> bi_dice_loss(const Tensor<T>& truth, const Tensor<T>& pred, T eps = T(1),
                       Tape<T>* tape = nullptr) {
  if (!(eps > T(0))) {
    throw std::invalid_argument("bi-dice: eps must be > 0");
  }
  detail::check_mask_pair(truth, pred);
  const Shape4 s = truth.shape();
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  const int groups = s.n * s.c;

  std::vector<T> A(groups), B(groups), C(groups), D(groups);
  T total = 0;
  for (int g = 0; g < groups; ++g) {
    const T* p = truth.data() + g * plane;
    const T* q = pred.data() + g * plane;
    T sp = 0, sq = 0, spq = 0;
    for (std::size_t j = 0; j < plane; ++j) {
      sp += p[j];
      sq += q[j];
      spq += p[j] * q[j];
    }
    const T np = static_cast<T>(plane);
    A[g] = 2 * spq + eps;
    B[g] = sp + sq + eps;
    C[g] = 2 * (np - sp - sq + spq) + eps;
    D[g] = 2 * np - sp - sq + eps;
    total += 2 - A[g] / B[g] - C[g] / D[g];
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(s.n));

  if (tape) {
    out.storage()->tape_output = true;
    tape->record([truth, pred, out, A = std::move(A), B = std::move(B), C = std::move(C),
                  D = std::move(D), plane, groups]() {
      const T g0 = out.grad()[0];
      const T invn = T(1) / static_cast<T>(truth.shape().n);
      T* dq = pred.grad().data();
      for (int g = 0; g < groups; ++g) {
        const T* p = truth.data() + g * plane;
        T* d = dq + g * plane;
        const T b2 = B[g] * B[g], d2 = D[g] * D[g];
        for (std::size_t j = 0; j < plane; ++j) {
          const T d_obj = (2 * p[j] * B[g] - A[g]) / b2;
          const T d_bg = (-2 * (1 - p[j]) * D[g] + C[g]) / d2;
          d[j] += g0 * invn * (-d_obj - d_bg);
        }
      }
    });
  }
  return out;
}

// 2|A∩B| / (|A|+|B|) over two binary masks; two empty masks score 1.
template <typename T>
double dice_score(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) {
    throw std::invalid_argument("dice: shape mismatch " + a.shape().str() + " vs " +
                                b.shape().str());
  }
  double inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const T va = a.data()[i], vb = b.data()[i];
    if ((va != T(0) && va != T(1)) || (vb != T(0) && vb != T(1))) {
      throw std::invalid_argument("dice: masks must be binary");
    }
    inter += static_cast<double>(va) * static_cast<double>(vb);
    sa += static_cast<double>(va);
    sb += static_cast<double>(vb);
  }
  if (sa + sb == 0) return 1.0;
  return 2.0 * inter / (sa + sb);
}

}  // namespace sduseg
