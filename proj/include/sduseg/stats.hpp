#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace sduseg {

struct Summary {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation, 0 for a single value
};

inline Summary summarize(const std::vector<double>& values) {
  if (values.empty()) {
    throw std::invalid_argument("summarize: no values");
  }
  const double n = static_cast<double>(values.size());
  double s = 0;
  for (double v : values) s += v;
  const double mean = s / n;
  if (values.size() == 1) return {mean, 0.0};
  double ss = 0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

namespace detail {

// Continued fraction for the regularized incomplete beta (modified Lentz).
inline double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 1e-15;
  constexpr double kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

inline double reg_inc_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double lbeta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  const double front = std::exp(a * std::log(x) + b * std::log1p(-x) - lbeta);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace detail

// P(|T_df| >= |t|).
inline double student_t_two_sided_p(double t, int df) {
  if (df < 1) {
    throw std::invalid_argument("t distribution: degrees of freedom must be >= 1");
  }
  const double x = df / (df + t * t);
  return detail::reg_inc_beta(df / 2.0, 0.5, x);
}

struct TTestResult {
  double t = std::numeric_limits<double>::quiet_NaN();
  int df = 0;
  double p = std::numeric_limits<double>::quiet_NaN();
  bool degenerate = false;  // zero-variance differences; t and p carry no number
};

// Paired two-sided t-test on per-item scores of two methods.
inline TTestResult paired_t_test(const std::vector<double>& first,
                                 const std::vector<double>& second) {
  if (first.size() != second.size()) {
    throw std::invalid_argument("paired t-test: " + std::to_string(first.size()) + " vs " +
                                std::to_string(second.size()) + " scores");
  }
  if (first.size() < 2) {
    throw std::invalid_argument("paired t-test: need at least 2 pairs");
  }
  const int n = static_cast<int>(first.size());
  std::vector<double> d(first.size());
  for (std::size_t i = 0; i < first.size(); ++i) d[i] = first[i] - second[i];
  double mean = 0;
  for (double v : d) mean += v;
  mean /= n;
  double ss = 0;
  for (double v : d) ss += (v - mean) * (v - mean);
  TTestResult r;
  r.df = n - 1;
  if (ss == 0.0) {
    r.degenerate = true;
    return r;
  }
  const double sd = std::sqrt(ss / (n - 1));
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  r.p = student_t_two_sided_p(r.t, r.df);
  return r;
}

}  // namespace sduseg
