#pragma once

#include <cmath>
#include <vector>

#include "affagg/core.hpp"

namespace affagg {

inline double mean(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

inline double sample_sd(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

inline double standard_error(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  return sample_sd(xs) / std::sqrt(static_cast<double>(xs.size()));
}

// P(Bin(n, p) <= k), accumulated in log space.
inline double binomial_cdf(int k, int n, double p) {
  if (n < 0 || k < 0) throw InputError("binomial_cdf: k and n must be >= 0");
  if (k >= n) return 1.0;
  if (p <= 0.0) return 1.0;
  if (p >= 1.0) return 0.0;
  const double lp = std::log(p), lq = std::log1p(-p);
  double max_term = -kInf;
  std::vector<double> terms(static_cast<std::size_t>(k) + 1);
  for (int i = 0; i <= k; ++i) {
    const double lc = std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0);
    terms[static_cast<std::size_t>(i)] = lc + i * lp + (n - i) * lq;
    max_term = std::max(max_term, terms[static_cast<std::size_t>(i)]);
  }
  double s = 0.0;
  for (double t : terms) s += std::exp(t - max_term);
  return std::min(std::exp(max_term) * s, 1.0);
}

// One-sided exact (Clopper-Pearson) upper confidence bound for a binomial
// proportion: the largest p with P(Bin(n,p) <= k) >= 1 - conf. Bisection on
// the CDF, which is decreasing in p.
inline double clopper_pearson_upper(int k, int n, double conf = 0.99) {
  if (n < 1) throw InputError("clopper_pearson_upper: n must be >= 1");
  if (k < 0 || k > n) throw InputError("clopper_pearson_upper: k must lie in [0, n]");
  if (!(conf > 0.0 && conf < 1.0))
    throw InputError("clopper_pearson_upper: conf must lie in (0,1)");
  if (k >= n) return 1.0;
  const double alpha = 1.0 - conf;
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 80; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (binomial_cdf(k, n, mid) >= alpha)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace affagg
