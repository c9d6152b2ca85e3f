#pragma once

#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "sduseg/tensor.hpp"

namespace sduseg {

// Reverse-mode gradient tape. Ops executed with a tape append their backward
// closure in execution order, which is already a topological order of the
// graph, so backward() replays the records exactly once in reverse. Gradients
// accumulate by summation, which handles fan-out. A tape serves one
// single-threaded forward/backward; distinct tapes are independent.
template <typename T>
class Tape {
 public:
  void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

  std::size_t size() const { return ops_.size(); }

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse, then consumes
  // it. The root must be scalar.
  void backward(const Tensor<T>& loss) {
    if (!loss.is_scalar()) {
      throw std::invalid_argument("backward: root must be scalar, shape is " +
                                  loss.shape().str());
    }
    loss.grad()[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
  }

  void clear() { ops_.clear(); }

 private:
  std::vector<std::function<void()>> ops_;
};

}  // namespace sduseg
