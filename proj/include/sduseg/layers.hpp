#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sduseg/ops.hpp"
#include "sduseg/tape.hpp"
#include "sduseg/tensor.hpp"

namespace sduseg {

// Named composite of parameters, buffers and sub-layers. Registration order
// is the iteration order; qualified names join with '.'.
template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape = nullptr) = 0;

  Tensor<T>& register_parameter(const std::string& name, Tensor<T> t) {
    check_fresh(name);
    t.set_requires_grad(true);
    params_.emplace_back(name, std::move(t));
    return params_.back().second;
  }

  Tensor<T>& register_buffer(const std::string& name, Tensor<T> t) {
    check_fresh(name);
    buffers_.emplace_back(name, std::move(t));
    return buffers_.back().second;
  }

  template <typename L>
  std::shared_ptr<L> register_child(const std::string& name, std::shared_ptr<L> child) {
    check_fresh(name);
    children_.emplace_back(name, child);
    return child;
  }

  // Depth-first, definition order.
  void visit_parameters(const std::function<void(const std::string&, Tensor<T>&)>& fn,
                        const std::string& prefix = "") {
    for (auto& [name, t] : params_) fn(prefix.empty() ? name : prefix + "." + name, t);
    for (auto& [name, child] : children_) {
      child->visit_parameters(fn, prefix.empty() ? name : prefix + "." + name);
    }
  }

  void visit_buffers(const std::function<void(const std::string&, Tensor<T>&)>& fn,
                     const std::string& prefix = "") {
    for (auto& [name, t] : buffers_) fn(prefix.empty() ? name : prefix + "." + name, t);
    for (auto& [name, child] : children_) {
      child->visit_buffers(fn, prefix.empty() ? name : prefix + "." + name);
    }
  }

  void set_training(bool training) {
    training_ = training;
    for (auto& [name, child] : children_) child->set_training(training);
  }
  bool training() const { return training_; }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit_parameters([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
    return n;
  }

  const std::vector<std::pair<std::string, std::shared_ptr<Layer<T>>>>& children() const {
    return children_;
  }

 protected:
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<std::pair<std::string, Tensor<T>>> buffers_;
  std::vector<std::pair<std::string, std::shared_ptr<Layer<T>>>> children_;
  bool training_ = true;

 private:
  void check_fresh(const std::string& name) {
    for (const auto& [n, t] : params_) {
      if (n == name) throw std::invalid_argument("layer: duplicate name " + name);
    }
    for (const auto& [n, t] : buffers_) {
      if (n == name) throw std::invalid_argument("layer: duplicate name " + name);
    }
    for (const auto& [n, c] : children_) {
      if (n == name) throw std::invalid_argument("layer: duplicate name " + name);
    }
  }
};

template <typename T>
class Conv2dLayer : public Layer<T> {
 public:
  Conv2dLayer(int c_in, int c_out, ConvSpec spec) : spec_(spec) {
    spec.validate(Shape4{1, c_in, spec.effective_kernel_h(), spec.effective_kernel_w()});
    weight_ = this->register_parameter(
        "weight", Tensor<T>(Shape4{c_out, c_in, spec.kernel_h, spec.kernel_w}));
    bias_ = this->register_parameter("bias", Tensor<T>(Shape4{1, c_out, 1, 1}));
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape = nullptr) override {
    return conv2d(x, weight_, bias_, spec_, tape);
  }

  const ConvSpec& spec() const { return spec_; }
  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  ConvSpec spec_;
  Tensor<T> weight_;
  Tensor<T> bias_;
};

template <typename T>
class BatchNorm2dLayer : public Layer<T> {
 public:
  explicit BatchNorm2dLayer(int channels, T momentum = T(0.1), T eps = T(1e-5))
      : momentum_(momentum), eps_(eps) {
    scale_ = this->register_parameter("scale", Tensor<T>(Shape4{1, channels, 1, 1}, T(1)));
    shift_ = this->register_parameter("shift", Tensor<T>(Shape4{1, channels, 1, 1}, T(0)));
    running_mean_ = this->register_buffer("running_mean", Tensor<T>(Shape4{1, channels, 1, 1}));
    running_var_ =
        this->register_buffer("running_var", Tensor<T>(Shape4{1, channels, 1, 1}, T(1)));
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape = nullptr) override {
    return batchnorm2d(x, scale_, shift_, running_mean_, running_var_, this->training(),
                       momentum_, eps_, tape);
  }

 private:
  T momentum_, eps_;
  Tensor<T> scale_, shift_, running_mean_, running_var_;
};

template <typename T>
class ReluLayer : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape = nullptr) override {
    return relu(x, tape);
  }
};

template <typename T>
class SigmoidLayer : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape = nullptr) override {
    return sigmoid(x, tape);
  }
};

template <typename T>
class MaxPool2Layer : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape = nullptr) override {
    return maxpool2d(x, tape);
  }
};

template <typename T>
class Upsample2xLayer : public Layer<T> {
 public:
  explicit Upsample2xLayer(UpsampleMode mode) : mode_(mode) {}
  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape = nullptr) override {
    return upsample2x(x, mode_, tape);
  }
  UpsampleMode mode() const { return mode_; }

 private:
  UpsampleMode mode_;
};

template <typename T>
class Sequential : public Layer<T> {
 public:
  template <typename L>
  std::shared_ptr<L> append(const std::string& name, std::shared_ptr<L> layer) {
    return this->register_child(name, std::move(layer));
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape = nullptr) override {
    Tensor<T> y = x;
    for (auto& [name, child] : this->children_) y = child->forward(y, tape);
    return y;
  }
};

}  // namespace sduseg
