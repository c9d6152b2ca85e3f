#pragma once

#include <stdexcept>
#include <string>

namespace sduseg {

// File, dataset, or checkpoint problems. The CLI maps these to exit code 2.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite losses or gradients. The CLI maps these to exit code 3.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace sduseg
