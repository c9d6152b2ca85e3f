#pragma once

#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace sduseg {

// Dense 4-d extents, (batch n, channels c, height h, width w).
struct Shape4 {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  bool operator==(const Shape4&) const = default;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * static_cast<std::size_t>(h) * w;
  }

  std::string str() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }

  void validate() const {
    const int ext[4] = {n, c, h, w};
    const char* axis[4] = {"batch", "channel", "height", "width"};
    for (int i = 0; i < 4; ++i) {
      if (ext[i] < 1) {
        throw std::invalid_argument("tensor shape: " + std::string(axis[i]) +
                                    " extent must be >= 1, got " + std::to_string(ext[i]));
      }
    }
  }
};

template <typename T>
struct TensorStorage {
  Shape4 shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool tape_output = false;  // set when a taped op produced this tensor
};

// Value handle over shared storage, row-major over (n,c,h,w). Copies share
// storage; tensors are treated as immutable once produced, except that
// parameter data is updated by the optimizer and grads accumulate during
// backward. Deep copies go through clone().
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() : store_(std::make_shared<TensorStorage<T>>()) {
    store_->shape = Shape4{1, 1, 1, 1};
    store_->data.assign(1, T(0));
  }

  explicit Tensor(Shape4 shape, T fill = T(0), bool requires_grad = false)
      : store_(std::make_shared<TensorStorage<T>>()) {
    shape.validate();
    store_->shape = shape;
    store_->data.assign(shape.numel(), fill);
    store_->requires_grad = requires_grad;
  }

  static Tensor from_data(Shape4 shape, std::vector<T> values, bool requires_grad = false) {
    shape.validate();
    if (values.size() != shape.numel()) {
      throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                  " does not match shape " + shape.str());
    }
    Tensor t;
    t.store_->shape = shape;
    t.store_->data = std::move(values);
    t.store_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T value) {
    Tensor t;
    t.store_->data[0] = value;
    return t;
  }

  const Shape4& shape() const { return store_->shape; }
  std::size_t numel() const { return store_->data.size(); }
  bool is_scalar() const { return numel() == 1; }

  T* data() { return store_->data.data(); }
  const T* data() const { return store_->data.data(); }
  std::vector<T>& values() { return store_->data; }
  const std::vector<T>& values() const { return store_->data; }

  T& at(int n, int c, int h, int w) { return store_->data[index(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const { return store_->data[index(n, c, h, w)]; }

  std::size_t index(int n, int c, int h, int w) const {
    const Shape4& s = store_->shape;
    return ((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w;
  }

  T item() const {
    if (!is_scalar()) {
      throw std::invalid_argument("item() requires a scalar tensor, shape is " + shape().str());
    }
    return store_->data[0];
  }

  bool requires_grad() const { return store_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    store_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !store_->grad.empty(); }

  // Allocates a zero gradient buffer on first use.
  std::vector<T>& grad() const {
    if (store_->grad.empty()) store_->grad.assign(store_->data.size(), T(0));
    return store_->grad;
  }

  void zero_grad() const {
    if (!store_->grad.empty()) store_->grad.assign(store_->data.size(), T(0));
  }

  void drop_grad() const { store_->grad.clear(); }

  Tensor clone() const {
    Tensor t;
    t.store_->shape = store_->shape;
    t.store_->data = store_->data;
    t.store_->requires_grad = store_->requires_grad;
    return t;
  }

  // Storage identity; two tensors alias iff their storages are equal.
  const std::shared_ptr<TensorStorage<T>>& storage() const { return store_; }

 private:
  std::shared_ptr<TensorStorage<T>> store_;
};

// Convolution geometry: kernel, stride, zero padding, dilation.
struct ConvSpec {
  int kernel_h = 3, kernel_w = 3;
  int stride_h = 1, stride_w = 1;
  int pad_h = 0, pad_w = 0;
  int dilation_h = 1, dilation_w = 1;

  // 3x3 same-padding convolution: p = d keeps h,w unchanged at stride 1.
  static ConvSpec same3x3(int dilation = 1) {
    ConvSpec s;
    s.kernel_h = s.kernel_w = 3;
    s.pad_h = s.pad_w = dilation;
    s.dilation_h = s.dilation_w = dilation;
    return s;
  }

  static ConvSpec pointwise() {
    ConvSpec s;
    s.kernel_h = s.kernel_w = 1;
    return s;
  }

  int effective_kernel_h() const { return dilation_h * (kernel_h - 1) + 1; }
  int effective_kernel_w() const { return dilation_w * (kernel_w - 1) + 1; }

  int out_h(int h) const { return (h + 2 * pad_h - effective_kernel_h()) / stride_h + 1; }
  int out_w(int w) const { return (w + 2 * pad_w - effective_kernel_w()) / stride_w + 1; }

  void validate(const Shape4& input) const {
    auto check_pos = [](int v, const char* what) {
      if (v < 1) {
        throw std::invalid_argument(std::string("conv spec: ") + what + " must be >= 1, got " +
                                    std::to_string(v));
      }
    };
    check_pos(kernel_h, "kernel height");
    check_pos(kernel_w, "kernel width");
    check_pos(stride_h, "stride height");
    check_pos(stride_w, "stride width");
    check_pos(dilation_h, "dilation height");
    check_pos(dilation_w, "dilation width");
    if (pad_h < 0 || pad_w < 0) {
      throw std::invalid_argument("conv spec: padding must be >= 0");
    }
    if (effective_kernel_h() > input.h + 2 * pad_h) {
      throw std::invalid_argument("conv spec: effective kernel height " +
                                  std::to_string(effective_kernel_h()) +
                                  " exceeds padded input height " +
                                  std::to_string(input.h + 2 * pad_h));
    }
    if (effective_kernel_w() > input.w + 2 * pad_w) {
      throw std::invalid_argument("conv spec: effective kernel width " +
                                  std::to_string(effective_kernel_w()) +
                                  " exceeds padded input width " +
                                  std::to_string(input.w + 2 * pad_w));
    }
  }
};

}  // namespace sduseg
