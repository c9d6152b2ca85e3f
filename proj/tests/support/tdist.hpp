#pragma once

// Numeric-integration oracle for Student's t tail probabilities, kept
// deliberately independent of the continued-fraction implementation under
// test: density + adaptive Simpson quadrature, nothing shared.

#include <cmath>
#include <numbers>

namespace sduseg::testing {

inline double t_density(double x, double df) {
  const double c =
      std::exp(std::lgamma((df + 1) / 2) - std::lgamma(df / 2)) / std::sqrt(df * std::numbers::pi);
  return c * std::pow(1 + x * x / df, -(df + 1) / 2);
}

namespace detail {

template <typename F>
double simpson(F&& f, double a, double b, double fa, double fm, double fb, double whole,
               double eps, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6 * (fa + 4 * flm + fm);
  const double right = (b - m) / 6 * (fm + 4 * frm + fb);
  if (depth <= 0 || std::abs(left + right - whole) <= 15 * eps) {
    return left + right + (left + right - whole) / 15;
  }
  return simpson(f, a, m, fa, flm, fm, left, eps / 2, depth - 1) +
         simpson(f, m, b, fm, frm, fb, right, eps / 2, depth - 1);
}

}  // namespace detail

template <typename F>
double integrate(F&& f, double a, double b, double eps = 1e-12) {
  const double m = 0.5 * (a + b);
  const double fa = f(a), fm = f(m), fb = f(b);
  const double whole = (b - a) / 6 * (fa + 4 * fm + fb);
  return detail::simpson(f, a, b, fa, fm, fb, whole, eps, 48);
}

// Two-sided p by integrating the density over the central interval.
inline double t_two_sided_p_oracle(double t, double df) {
  const double a = std::abs(t);
  if (a == 0) return 1.0;
  const double central = integrate([df](double x) { return t_density(x, df); }, -a, a);
  return 1.0 - central;
}

}  // namespace sduseg::testing
