#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "affagg/rng.hpp"

namespace affagg {

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

constexpr double kInf = std::numeric_limits<double>::infinity();

// Every numeric guard reads from this one record, so desk-scale defaults can
// be loosened or tightened in a single place.
struct Tolerances {
  double simplex = 1e-12;    // simplex mass drift / negativity
  double symmetry = 1e-10;   // max-norm asymmetry allowed in a PSD input
  double psd_floor = -1e-8;  // smallest admissible eigenvalue
  double svd_rank = 1e-10;   // relative singular-value cutoff for projectors
};

inline Tolerances& tolerances() {
  static Tolerances t;
  return t;
}

// Point of the flat simplex: nonnegative coordinates summing to one. Drift
// below the simplex tolerance is renormalized away, anything worse is
// rejected.
class SimplexWeights {
 public:
  explicit SimplexWeights(Eigen::VectorXd theta) : theta_(std::move(theta)) {
    if (theta_.size() < 1) throw DimensionError("SimplexWeights: need at least one coordinate");
    const double tol = tolerances().simplex;
    double sum = 0.0;
    for (Eigen::Index j = 0; j < theta_.size(); ++j) {
      const double c = theta_(j);
      if (!std::isfinite(c)) throw InputError("SimplexWeights: non-finite coordinate");
      if (c < -tol)
        throw InputError("SimplexWeights: negative coordinate " + std::to_string(c));
      if (c < 0.0) theta_(j) = 0.0;
      sum += theta_(j);
    }
    if (std::abs(sum - 1.0) > tol)
      throw InputError("SimplexWeights: mass " + std::to_string(sum) +
                       " drifts beyond the simplex tolerance");
    theta_ /= sum;
  }

  // Normalizes an arbitrary nonnegative vector with positive total mass.
  static SimplexWeights normalized(Eigen::VectorXd w) {
    if (w.size() < 1) throw DimensionError("SimplexWeights: need at least one coordinate");
    double sum = 0.0;
    for (Eigen::Index j = 0; j < w.size(); ++j) {
      if (!std::isfinite(w(j)) || w(j) < 0.0)
        throw InputError("SimplexWeights::normalized: coordinates must be finite and >= 0");
      sum += w(j);
    }
    if (sum <= 0.0) throw InputError("SimplexWeights::normalized: total mass must be positive");
    return SimplexWeights(w / sum);
  }

  Eigen::Index size() const { return theta_.size(); }
  double operator[](Eigen::Index j) const { return theta_(j); }
  const Eigen::VectorXd& vec() const { return theta_; }

 private:
  Eigen::VectorXd theta_;
};

// Prior on the candidate list with precomputed logs; zero-mass atoms carry
// log pi = -inf and stay pinned at weight zero in both aggregation schemes.
class Prior {
 public:
  explicit Prior(SimplexWeights pi) : pi_(std::move(pi)), log_pi_(pi_.size()) {
    for (Eigen::Index j = 0; j < pi_.size(); ++j)
      log_pi_(j) = pi_[j] > 0.0 ? std::log(pi_[j]) : -kInf;
  }

  static Prior uniform(Eigen::Index m) {
    return Prior(SimplexWeights(Eigen::VectorXd::Constant(m, 1.0 / static_cast<double>(m))));
  }

  Eigen::Index size() const { return pi_.size(); }
  double operator[](Eigen::Index j) const { return pi_[j]; }
  double log_pi(Eigen::Index j) const { return log_pi_(j); }
  const Eigen::VectorXd& log_vec() const { return log_pi_; }
  const SimplexWeights& weights() const { return pi_; }

 private:
  SimplexWeights pi_;
  Eigen::VectorXd log_pi_;
};

// Symmetric PSD matrix (up to the configured tolerances) with its trace and
// operator norm cached at construction.
class PsdMatrix {
 public:
  explicit PsdMatrix(Eigen::MatrixXd a) : a_(std::move(a)) {
    if (a_.rows() != a_.cols() || a_.rows() < 1)
      throw DimensionError("PsdMatrix: matrix must be square and non-empty");
    if (!a_.allFinite()) throw InputError("PsdMatrix: non-finite entry");
    const double asym = (a_ - a_.transpose()).cwiseAbs().maxCoeff();
    if (asym > tolerances().symmetry)
      throw InputError("PsdMatrix: asymmetry " + std::to_string(asym) + " beyond tolerance");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a_, Eigen::EigenvaluesOnly);
    const double eig_min = es.eigenvalues().minCoeff();
    if (eig_min < tolerances().psd_floor)
      throw InputError("PsdMatrix: eigenvalue " + std::to_string(eig_min) +
                       " below the PSD floor");
    trace_ = a_.trace();
    opnorm_ = std::max(es.eigenvalues().maxCoeff(), 0.0);
  }

  Eigen::Index dim() const { return a_.rows(); }
  const Eigen::MatrixXd& mat() const { return a_; }
  double trace() const { return trace_; }
  double opnorm() const { return opnorm_; }

 private:
  Eigen::MatrixXd a_;
  double trace_ = 0.0;
  double opnorm_ = 0.0;
};

// Observation model Y = mu + sigma * Z with Z standard normal.
struct GaussianMeanModel {
  Eigen::VectorXd mu;
  double sigma = 1.0;

  GaussianMeanModel(Eigen::VectorXd mean, double noise_sd)
      : mu(std::move(mean)), sigma(noise_sd) {
    if (mu.size() < 1) throw DimensionError("GaussianMeanModel: mean must be non-empty");
    if (!mu.allFinite()) throw InputError("GaussianMeanModel: non-finite mean coordinate");
    if (!(sigma > 0.0)) throw InputError("GaussianMeanModel: sigma must be positive");
  }

  Eigen::Index n() const { return mu.size(); }
};

inline Eigen::VectorXd sample_observation(const GaussianMeanModel& model, RandomStream& rng) {
  return model.mu + model.sigma * rng.gaussian_vector(model.n());
}

// KL(theta, pi) with the conventions 0 log 0 = 0 and t log(t/0) = +inf.
inline double kl_divergence(const SimplexWeights& theta, const Prior& pi) {
  if (theta.size() != pi.size()) throw DimensionError("kl_divergence: length mismatch");
  double kl = 0.0;
  for (Eigen::Index j = 0; j < theta.size(); ++j) {
    const double t = theta[j];
    if (t == 0.0) continue;
    if (pi[j] == 0.0) return kInf;
    kl += t * (std::log(t) - pi.log_pi(j));
  }
  return std::max(kl, 0.0);  // clip roundoff at theta == pi
}

// log sum_j exp(v_j), shifted by the maximum. Exact for a single entry;
// returns -inf when every entry is -inf.
inline double log_sum_exp(const Eigen::VectorXd& v) {
  if (v.size() < 1) throw DimensionError("log_sum_exp: empty input");
  double m = -kInf;
  for (Eigen::Index j = 0; j < v.size(); ++j) {
    if (std::isnan(v(j))) throw InputError("log_sum_exp: NaN entry");
    m = std::max(m, v(j));
  }
  if (m == -kInf || m == kInf) return m;
  double s = 0.0;
  for (Eigen::Index j = 0; j < v.size(); ++j) s += std::exp(v(j) - m);
  return m + std::log(s);
}

// Self-test statistic for the mixture variance identity
//   sum_k theta_k ||m - v_k||^2 = sum_k theta_k ||vbar - v_k||^2 + ||vbar - m||^2,
// vbar = sum_k theta_k v_k. Identically zero in exact arithmetic; accumulated
// in long double so the residual stays below 1e-10 even at stress scales.
inline double variance_identity_residual(const SimplexWeights& theta,
                                         const Eigen::MatrixXd& estimates,
                                         const Eigen::VectorXd& m) {
  if (estimates.cols() != theta.size())
    throw DimensionError("variance_identity_residual: weights/estimates mismatch");
  if (estimates.rows() != m.size())
    throw DimensionError("variance_identity_residual: point dimension mismatch");
  const Eigen::Index n = m.size();
  const Eigen::Index M = theta.size();
  // compensated accumulation: the all-positive square sums would otherwise
  // collect truncation bias linearly in n
  struct Kahan {
    long double sum = 0.0L, comp = 0.0L;
    void add(long double x) {
      const long double y = x - comp;
      const long double t = sum + y;
      comp = (t - sum) - y;
      sum = t;
    }
  };
  // re-close the simplex in extended precision: the double representation of
  // theta sums to 1 only up to ~1e-16, which the identity multiplies by
  // ||m||^2 - ||bar||^2
  long double mass = 0.0L;
  for (Eigen::Index k = 0; k < M; ++k) mass += static_cast<long double>(theta[k]);
  std::vector<long double> w(static_cast<std::size_t>(M));
  for (Eigen::Index k = 0; k < M; ++k)
    w[static_cast<std::size_t>(k)] = static_cast<long double>(theta[k]) / mass;
  std::vector<long double> bar(static_cast<std::size_t>(n), 0.0L);
  for (Eigen::Index k = 0; k < M; ++k)
    for (Eigen::Index i = 0; i < n; ++i)
      bar[static_cast<std::size_t>(i)] += w[static_cast<std::size_t>(k)] * estimates(i, k);
  Kahan lhs, spread, dist;
  for (Eigen::Index k = 0; k < M; ++k) {
    Kahan a, b;
    for (Eigen::Index i = 0; i < n; ++i) {
      const long double dm = static_cast<long double>(m(i)) - estimates(i, k);
      const long double db = bar[static_cast<std::size_t>(i)] - estimates(i, k);
      a.add(dm * dm);
      b.add(db * db);
    }
    lhs.add(w[static_cast<std::size_t>(k)] * a.sum);
    spread.add(w[static_cast<std::size_t>(k)] * b.sum);
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const long double d = bar[static_cast<std::size_t>(i)] - m(i);
    dist.add(d * d);
  }
  return static_cast<double>(std::fabs(static_cast<double>(lhs.sum - (spread.sum + dist.sum))));
}

}  // namespace affagg
