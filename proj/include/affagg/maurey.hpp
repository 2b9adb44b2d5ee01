#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "affagg/core.hpp"

namespace affagg {

// Floored logarithm: max(log x, 1). Nonpositive arguments fall to the floor.
inline double log_bar(double x) { return x > 0.0 ? std::max(std::log(x), 1.0) : 1.0; }

inline double lq_norm_q(const Eigen::VectorXd& theta, double q) {
  if (!(q > 0.0 && q <= 1.0)) throw ConfigError("lq_norm: q must lie in (0,1]");
  double s = 0.0;
  for (Eigen::Index j = 0; j < theta.size(); ++j) s += std::pow(std::abs(theta(j)), q);
  return s;
}

// (sum_j |theta_j|^q)^(1/q) for q in (0,1]. For q = 0 use l0_norm with the
// |0|_0 = 1 convention applied at the call site.
inline double lq_norm(const Eigen::VectorXd& theta, double q) {
  return std::pow(lq_norm_q(theta, q), 1.0 / q);
}

inline double l0_norm(const Eigen::VectorXd& theta) {
  double count = 0.0;
  for (Eigen::Index j = 0; j < theta.size(); ++j)
    if (theta(j) != 0.0) count += 1.0;
  return count;
}

struct TailBound {
  double tail_sum;
  double bound;
};

// l1 mass left after the m largest magnitudes, against the decay bound
// |theta|_q m^{1 - 1/q}. The inequality holds for every theta, q, m.
inline TailBound tail_l1_bound_check(const Eigen::VectorXd& theta, double q, int m) {
  const Eigen::Index M = theta.size();
  if (m < 1 || m > M) throw InputError("tail_l1_bound_check: m must lie in [1, M]");
  std::vector<double> mags(static_cast<std::size_t>(M));
  for (Eigen::Index j = 0; j < M; ++j) mags[static_cast<std::size_t>(j)] = std::abs(theta(j));
  std::sort(mags.begin(), mags.end(), std::greater<double>());
  double tail = 0.0;
  for (std::size_t j = static_cast<std::size_t>(m); j < mags.size(); ++j) tail += mags[j];
  const double bound = lq_norm(theta, q) * std::pow(static_cast<double>(m), 1.0 - 1.0 / q);
  return TailBound{tail, bound};
}

struct LqParams {
  double q = 1.0;
  double R = 1.0;
  double B = 1.0;
  double nu = 1.0;
  double delta = 0.1;
  int M = 1;
  double phi_lead = 9.0;  // leading constant; 17 is the conservative variant

  void validate() const {
    if (!(q > 0.0 && q <= 1.0)) throw ConfigError("LqParams: q must lie in (0,1]");
    if (!(R > 0.0 && B > 0.0 && nu > 0.0)) throw ConfigError("LqParams: R, B, nu must be positive");
    if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("LqParams: delta must lie in (0,1)");
    if (M < 1) throw ConfigError("LqParams: M must be >= 1");
    if (!(phi_lead > 0.0)) throw ConfigError("LqParams: phi_lead must be positive");
  }
};

// phi_{q,M}(theta; nu, B) as a function of |theta|_q^q:
//   lead * nu^{2-q} |theta|_q^q B^q [logbar(e M nu^q / (B^q |theta|_q^q delta))]^{1-q/2}
//   max'ed with the floor 3 nu^2 logbar(e M / delta).
inline double phi(double theta_lq_q, const LqParams& p) {
  p.validate();
  const double e = std::exp(1.0);
  const double floor_term = 3.0 * p.nu * p.nu * log_bar(e * p.M / p.delta);
  if (!(theta_lq_q > 0.0)) return floor_term;
  const double arg =
      e * p.M * std::pow(p.nu, p.q) / (std::pow(p.B, p.q) * theta_lq_q * p.delta);
  const double main_term = p.phi_lead * std::pow(p.nu, 2.0 - p.q) * theta_lq_q *
                           std::pow(p.B, p.q) * std::pow(log_bar(arg), 1.0 - 0.5 * p.q);
  return std::max(main_term, floor_term);
}

struct MaureyResult {
  Eigen::VectorXd theta_m;
  bool success = false;
  int resamples = 0;      // batches drawn; 0 when theta was already sparse enough
  double err = 0.0;       // ||mu_{theta_m} - mu||^2 of the returned vector
  double base_err = 0.0;  // ||mu_theta - mu||^2
  double allowance = 0.0; // B^2 |theta|_q^2 m^{1 - 2/q}
  double best_gap = 0.0;  // min over attempts of err - (base_err + allowance)
};

// Constructive Maurey sparsifier. Keeps the m largest-magnitude coordinates,
// replaces the tail beta by the average of m i.i.d. draws of the random
// vector U with P[U = r sign(beta_i) mu_i] = |beta_i| / r, P[U = 0] =
// 1 - |beta|_1 / r, r = |theta|_q m^{1-1/q}. A whole batch is redrawn until
// the squared-error bound holds or max_resamples is exhausted; the failure
// report carries the best achieved gap. |theta_m|_0 <= 2m always.
inline MaureyResult maurey_sparsify(const Eigen::VectorXd& theta,
                                    const Eigen::MatrixXd& dictionary, const Eigen::VectorXd& mu,
                                    double q, int m, RandomStream& rng, int max_resamples = 10,
                                    double B = 0.0) {
  const Eigen::Index M = dictionary.cols();
  if (theta.size() != M) throw DimensionError("maurey_sparsify: theta/dictionary mismatch");
  if (mu.size() != dictionary.rows()) throw DimensionError("maurey_sparsify: target dimension");
  if (m < 1 || 2 * m > M) throw InputError("maurey_sparsify: need 1 <= m <= M/2");
  if (max_resamples < 1) throw InputError("maurey_sparsify: max_resamples must be >= 1");

  double max_norm = 0.0;
  for (Eigen::Index j = 0; j < M; ++j) max_norm = std::max(max_norm, dictionary.col(j).norm());
  if (B <= 0.0)
    B = max_norm;
  else if (max_norm > B * (1.0 + 1e-12))
    throw InputError("maurey_sparsify: dictionary norm exceeds B");

  MaureyResult res;
  res.base_err = (dictionary * theta - mu).squaredNorm();
  const double lqn = lq_norm(theta, q);
  res.allowance = B * B * lqn * lqn * std::pow(static_cast<double>(m), 1.0 - 2.0 / q);

  if (l0_norm(theta) <= 2.0 * m) {
    res.theta_m = theta;
    res.success = true;
    res.err = res.base_err;
    res.best_gap = -res.allowance;
    return res;
  }

  // top-m magnitudes (ties resolved by lower index)
  std::vector<Eigen::Index> order(static_cast<std::size_t>(M));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return std::abs(theta(a)) > std::abs(theta(b));
  });
  Eigen::VectorXd alpha = Eigen::VectorXd::Zero(M);
  for (int i = 0; i < m; ++i) {
    const Eigen::Index j = order[static_cast<std::size_t>(i)];
    alpha(j) = theta(j);
  }
  const Eigen::VectorXd beta = theta - alpha;

  const double r = lqn * std::pow(static_cast<double>(m), 1.0 - 1.0 / q);
  const double beta_l1 = beta.lpNorm<1>();
  if (beta_l1 > r * (1.0 + 1e-9))
    throw std::logic_error("maurey_sparsify: tail mass exceeds the decay bound");

  // cumulative pick probabilities over the tail support, outcome U = 0 last
  std::vector<Eigen::Index> tail_idx;
  std::vector<double> cum;
  double acc = 0.0;
  for (Eigen::Index j = 0; j < M; ++j) {
    if (beta(j) == 0.0) continue;
    acc += std::abs(beta(j)) / r;
    tail_idx.push_back(j);
    cum.push_back(acc);
  }
  const double total = std::min(acc, 1.0);

  double best_gap = kInf;
  Eigen::VectorXd best_theta;
  double best_err = 0.0;
  for (int attempt = 1; attempt <= max_resamples; ++attempt) {
    Eigen::VectorXd cand = alpha;
    for (int draw = 0; draw < m; ++draw) {
      const double u = rng.uniform01();
      if (u >= total) continue;  // U = 0
      const auto it = std::upper_bound(cum.begin(), cum.end(), u);
      const Eigen::Index j = tail_idx[static_cast<std::size_t>(it - cum.begin())];
      cand(j) += (beta(j) > 0.0 ? r : -r) / static_cast<double>(m);
    }
    if (l0_norm(cand) > 2.0 * m)
      throw std::logic_error("maurey_sparsify: candidate support exceeds 2m");
    const double err = (dictionary * cand - mu).squaredNorm();
    const double gap = err - (res.base_err + res.allowance);
    if (gap < best_gap) {
      best_gap = gap;
      best_theta = cand;
      best_err = err;
    }
    res.resamples = attempt;
    if (err <= res.base_err + res.allowance) {
      res.theta_m = std::move(cand);
      res.success = true;
      res.err = err;
      res.best_gap = best_gap;
      return res;
    }
  }
  res.theta_m = std::move(best_theta);
  res.success = false;
  res.err = best_err;
  res.best_gap = best_gap;
  return res;
}

enum class ThetaClass { ModelSelection, Convex, Linear, DLinear, DConvex, Lq, DLq };

inline const std::vector<std::pair<std::string, ThetaClass>>& theta_class_names() {
  static const std::vector<std::pair<std::string, ThetaClass>> names = {
      {"model-selection", ThetaClass::ModelSelection},
      {"convex", ThetaClass::Convex},
      {"linear", ThetaClass::Linear},
      {"D-linear", ThetaClass::DLinear},
      {"D-convex", ThetaClass::DConvex},
      {"lq", ThetaClass::Lq},
      {"D-lq", ThetaClass::DLq}};
  return names;
}

inline std::string theta_class_name(ThetaClass c) {
  for (const auto& [name, cls] : theta_class_names())
    if (cls == c) return name;
  throw ConfigError("theta_class_name: unknown class");
}

inline ThetaClass parse_theta_class(const std::string& s) {
  for (const auto& [name, cls] : theta_class_names())
    if (name == s) return cls;
  std::string valid;
  for (const auto& [name, cls] : theta_class_names()) valid += (valid.empty() ? "" : ", ") + name;
  throw ConfigError("unknown theta class '" + s + "' (valid: " + valid + ")");
}

struct RateQuery {
  ThetaClass theta_class = ThetaClass::ModelSelection;
  int n = 1;
  int M = 2;
  int D = 1;
  double sigma = 1.0;
  double B = 1.0;
  double R = 1.0;
  double delta = 0.1;
  double q = 0.5;
};

// Optimal-rate expressions Delta_{n,M}(Theta) per aggregation class, with all
// numerical constants dropped. Order-of-magnitude rates, not certified bounds.
inline double aggregation_rate(const RateQuery& rq) {
  if (rq.M < 1) throw ConfigError("aggregation_rate: M must be >= 1");
  if (rq.D < 1 || rq.D > rq.M) throw ConfigError("aggregation_rate: D must lie in [1, M]");
  if (!(rq.delta > 0.0 && rq.delta < 1.0))
    throw ConfigError("aggregation_rate: delta must lie in (0,1)");
  if (!(rq.sigma > 0.0 && rq.B > 0.0 && rq.R > 0.0))
    throw ConfigError("aggregation_rate: sigma, B, R must be positive");
  const double s2 = rq.sigma * rq.sigma;
  const double M = rq.M, D = rq.D, delta = rq.delta;
  const auto convex_main = [&] {
    return std::max(rq.sigma * rq.B * std::sqrt(log_bar(rq.sigma * M / (delta * rq.B))),
                    s2 * log_bar(M / delta));
  };
  const auto lq_main = [&] {
    if (!(rq.q > 0.0 && rq.q <= 1.0)) throw ConfigError("aggregation_rate: q must lie in (0,1]");
    const double ratio = std::pow(rq.sigma / (rq.B * rq.R), rq.q);
    return std::max(std::pow(rq.sigma, 2.0 - rq.q) * std::pow(rq.R, rq.q) * std::pow(rq.B, rq.q) *
                        std::pow(log_bar(M * ratio / delta), 1.0 - 0.5 * rq.q),
                    s2 * log_bar(M / delta));
  };
  const double linear_cap = s2 * M * std::log(1.0 / delta);
  const double dlinear_cap = s2 * D * std::log(M / (delta * D));
  switch (rq.theta_class) {
    case ThetaClass::ModelSelection:
      return s2 * std::log(M / delta);
    case ThetaClass::Convex:
      return std::min(convex_main(), linear_cap);
    case ThetaClass::Linear:
      return linear_cap;
    case ThetaClass::DLinear:
      return dlinear_cap;
    case ThetaClass::DConvex:
      return std::min(convex_main(), dlinear_cap);
    case ThetaClass::Lq:
      return std::min(lq_main(), linear_cap);
    case ThetaClass::DLq:
      return std::min(lq_main(), dlinear_cap);
  }
  throw ConfigError("aggregation_rate: unknown theta class");
}

}  // namespace affagg
