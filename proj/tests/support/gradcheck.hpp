#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>

#include "sduseg/tensor.hpp"

namespace sduseg::testing {

// Central-difference probe of every element of `t`, compared against the
// gradient already accumulated in t.grad(). `loss` must recompute the scalar
// objective from current tensor contents without touching any tape. Returns
// the worst relative error, with |.| <= 1 treated as absolute.
template <typename T>
double max_fd_rel_err(const std::function<double()>& loss, const Tensor<T>& t,
                      double h = 1e-5) {
  double worst = 0.0;
  auto& v = const_cast<Tensor<T>&>(t).values();
  const auto& g = t.grad();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const T saved = v[i];
    v[i] = saved + static_cast<T>(h);
    const double fp = loss();
    v[i] = saved - static_cast<T>(h);
    const double fm = loss();
    v[i] = saved;
    const double fd = (fp - fm) / (2.0 * h);
    const double an = static_cast<double>(g[i]);
    const double rel = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace sduseg::testing
