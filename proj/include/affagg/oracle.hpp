#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "affagg/core.hpp"
#include "affagg/estimators.hpp"
#include "affagg/expweights.hpp"
#include "affagg/maurey.hpp"
#include "affagg/qagg.hpp"
#include "affagg/stats.hpp"

namespace affagg {

struct TrialRecord {
  int trial = 0;
  std::uint64_t seed = 0;
  double lhs = 0.0;
  double rhs = 0.0;
  bool violated = false;  // lhs > rhs
  bool converged = true;
  int iterations = 0;
};

struct RunSummary {
  int trials = 0;
  int violations = 0;    // among converged trials
  int nonconverged = 0;  // flagged, never silently dropped
  double violation_fraction = 0.0;
  double binom_upper_99 = 1.0;  // one-sided exact binomial upper bound
  double mean_lhs = 0.0;
  double mean_rhs = 0.0;
  double mean_slack = 0.0;
};

struct RunResult {
  std::vector<TrialRecord> records;
  RunSummary summary;
};

inline RunSummary summarize(const std::vector<TrialRecord>& records) {
  RunSummary s;
  s.trials = static_cast<int>(records.size());
  int converged = 0;
  for (const auto& r : records) {
    if (!r.converged) {
      ++s.nonconverged;
      continue;
    }
    ++converged;
    if (r.violated) ++s.violations;
    s.mean_lhs += r.lhs;
    s.mean_rhs += r.rhs;
  }
  if (converged > 0) {
    s.violation_fraction = static_cast<double>(s.violations) / converged;
    s.binom_upper_99 = clopper_pearson_upper(s.violations, converged, 0.99);
    s.mean_lhs /= converged;
    s.mean_rhs /= converged;
    s.mean_slack = s.mean_rhs - s.mean_lhs;
  }
  return s;
}

// More than 1% of trials failing to converge invalidates a run.
inline bool run_converged_ok(const RunSummary& s) {
  return s.nonconverged <= 0.01 * s.trials;
}

// Runs T independent trials. Trial t owns the stream (master_seed, t), so the
// output is a pure function of (fn, T, master_seed) regardless of jobs.
template <class TrialFn>
RunResult run_trials(int T, std::uint64_t master_seed, const TrialFn& fn, int jobs = 1) {
  if (T < 1) throw InputError("run_trials: T must be >= 1");
  std::vector<TrialRecord> records(static_cast<std::size_t>(T));
  auto work = [&](int begin, int end) {
    for (int t = begin; t < end; ++t) {
      RandomStream rng(master_seed, static_cast<std::uint64_t>(t));
      TrialRecord rec = fn(t, rng);
      rec.trial = t;
      rec.seed = rng.seed();
      rec.violated = rec.lhs > rec.rhs;
      records[static_cast<std::size_t>(t)] = rec;
    }
  };
  jobs = std::clamp(jobs, 1, T);
  if (jobs == 1) {
    work(0, T);
  } else {
    std::vector<std::thread> workers;
    const int chunk = (T + jobs - 1) / jobs;
    for (int w = 0; w < jobs; ++w) {
      const int begin = w * chunk;
      const int end = std::min(T, begin + chunk);
      if (begin >= end) break;
      workers.emplace_back(work, begin, end);
    }
    for (auto& th : workers) th.join();
  }
  RunResult out{std::move(records), RunSummary{}};
  out.summary = summarize(out.records);
  return out;
}

// ---- admissibility gates -------------------------------------------------

inline double q_bound_lambda_threshold(double sigma, double nu, double V) {
  double denom = std::min(nu, 1.0 - nu);
  if (V > 0.0) denom = std::min(denom, 2.0 / (5.0 * V));
  return 8.0 * sigma * sigma / denom;
}

inline void require_q_bound_lambda(double lambda, double sigma, double nu, double V) {
  const double thr = q_bound_lambda_threshold(sigma, nu, V);
  if (!(lambda >= thr * (1.0 - 1e-12)))
    throw ConfigError("the Q-aggregation bound requires lambda >= 8 sigma^2 / min(nu, 1-nu, (5V/2)^{-1}) = " +
                      std::to_string(thr) + ", got " + std::to_string(lambda));
}

inline double ew_bound_lambda_threshold(double sigma, double V) {
  return 4.0 * sigma * sigma * std::max(16.0, 5.0 * V);
}

inline void require_ew_bound_lambda(double lambda, double sigma, double V) {
  const double thr = ew_bound_lambda_threshold(sigma, V);
  if (!(lambda >= thr * (1.0 - 1e-12)))
    throw ConfigError("the exponential-weights bound requires lambda >= 4 sigma^2 (16 v 5V) = " +
                      std::to_string(thr) + ", got " + std::to_string(lambda));
}

inline double deviation_lambda_threshold(double sigma, double V) {
  return 20.0 * V * sigma * sigma;
}

inline void require_deviation_lambda(double lambda, double sigma, double V) {
  const double thr = deviation_lambda_threshold(sigma, V);
  if (!(lambda > 0.0) || !(lambda >= thr * (1.0 - 1e-12)))
    throw ConfigError("the deviation bound requires lambda >= 20 V sigma^2 = " +
                      std::to_string(thr) + ", got " + std::to_string(lambda));
}

// ---- per-trial bound values ------------------------------------------------

// min_j { ||mu_hat_j - mu||^2 + C_j + lambda log(1/(pi_j delta)) } on the
// realized estimates. delta = 1 gives the expectation-bound integrand.
inline double q_bound_rhs(const Eigen::VectorXd& mu, const Eigen::MatrixXd& estimates,
                           const EstimatorFamily& family, double sigma, double lambda, double nu,
                           double delta) {
  require_q_bound_lambda(lambda, sigma, nu, family.family_V());
  if (!(delta > 0.0 && delta <= 1.0)) throw ConfigError("q_bound_rhs: delta must lie in (0,1]");
  const Prior& prior = family.prior();
  double best = kInf;
  for (Eigen::Index j = 0; j < family.M(); ++j) {
    if (prior[j] == 0.0) continue;
    const double loss = (estimates.col(j) - mu).squaredNorm();
    best = std::min(best, loss + family.penalties()(j) -
                              lambda * (prior.log_pi(j) + std::log(delta)));
  }
  return best;
}

// min_j { (1 + 128 sigma^2/(3 lambda)) ||mu - mu_hat_j||^2
//         + 3 lambda log(1/(delta pi_j)) + 2 C_j }.
inline double ew_bound_rhs(const Eigen::VectorXd& mu, const Eigen::MatrixXd& estimates,
                           const EstimatorFamily& family, double sigma, double lambda,
                           double delta) {
  require_ew_bound_lambda(lambda, sigma, family.family_V());
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("ew_bound_rhs: delta must lie in (0,1)");
  const double factor = 1.0 + 128.0 * sigma * sigma / (3.0 * lambda);
  const Prior& prior = family.prior();
  double best = kInf;
  for (Eigen::Index j = 0; j < family.M(); ++j) {
    if (prior[j] == 0.0) continue;
    const double loss = (estimates.col(j) - mu).squaredNorm();
    best = std::min(best, factor * loss -
                              3.0 * lambda * (std::log(delta) + prior.log_pi(j)) +
                              2.0 * family.penalties()(j));
  }
  return best;
}

enum class AggVariant { Q, EW };

// Sparsity oracle RHS, minimized over the enumerated patterns with the
// least-squares fit per pattern (which realizes the continuous min over beta
// for projection dictionaries). |0|_0 = 1 for the empty pattern. Q variant:
// residual factor 1 and penalty 3(lambda + 2 sigma^2); EW variant: factor
// 1 + 128 sigma^2/(3 lambda) and penalty 6(lambda + 2 sigma^2).
inline double rhs_sparsity(const std::vector<SparsityPattern>& patterns,
                           const EstimatorFamily& family, const Eigen::VectorXd& mu, int p,
                           double sigma, double delta, double lambda, AggVariant variant) {
  if (static_cast<Eigen::Index>(patterns.size()) != family.M())
    throw DimensionError("rhs_sparsity: patterns/family mismatch");
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("rhs_sparsity: delta must lie in (0,1)");
  const double s2 = sigma * sigma;
  if (variant == AggVariant::Q) {
    if (!(lambda >= 20.0 * s2 * (1.0 - 1e-12)))
      throw ConfigError("sparsity bound (Q) requires lambda >= 20 sigma^2 = " +
                        std::to_string(20.0 * s2) + ", got " + std::to_string(lambda));
  } else {
    if (!(lambda >= 64.0 * s2 * (1.0 - 1e-12)))
      throw ConfigError("sparsity bound (EW) requires lambda >= 64 sigma^2 = " +
                        std::to_string(64.0 * s2) + ", got " + std::to_string(lambda));
  }
  const double factor = variant == AggVariant::Q ? 1.0 : 1.0 + 128.0 * s2 / (3.0 * lambda);
  const double coeff = (variant == AggVariant::Q ? 3.0 : 6.0) * (lambda + 2.0 * s2);
  const double e = std::exp(1.0);
  double best = kInf;
  for (std::size_t i = 0; i < patterns.size(); ++i) {
    const auto& member = family.member(static_cast<Eigen::Index>(i));
    const double resid = (member.matrix() * mu - mu).squaredNorm();
    const double k = std::max(static_cast<double>(patterns[i].cardinality()), 1.0);
    const double pen = coeff * k * std::log(2.0 * e * p / (k * delta));
    best = std::min(best, factor * resid + pen);
  }
  return best;
}

// ---- oracle-inequality Monte Carlo runs ---------------------------------------

struct ExperimentSetup {
  EstimatorFamily family;
  GaussianMeanModel model;
  double sigma;   // equals model.sigma; kept explicit for bound arithmetic
  double lambda;
  double nu = 0.5;
  double delta = 0.1;
  QaggConfig qagg;  // lambda/nu mirrored for the solver

  ExperimentSetup(EstimatorFamily fam, GaussianMeanModel mod, double lam, double nu_in,
                  double delta_in)
      : family(std::move(fam)),
        model(std::move(mod)),
        sigma(model.sigma),
        lambda(lam),
        nu(nu_in),
        delta(delta_in) {
    if (family.n() != model.n()) throw DimensionError("ExperimentSetup: family/model dimension");
    qagg.lambda = lambda;
    qagg.nu = nu;
  }
};

// Sharp high-probability bound for the Q-aggregate: LHS is its loss, RHS evaluated on
// the same realized Y. Optionally reports per-j violation fractions of the
// un-minimized inequality.
inline RunResult verify_q_bound(const ExperimentSetup& ex, int T, std::uint64_t master_seed,
                                 int jobs = 1, std::vector<double>* per_j_fractions = nullptr) {
  require_q_bound_lambda(ex.lambda, ex.sigma, ex.nu, ex.family.family_V());
  const Eigen::Index M = ex.family.M();
  std::vector<std::vector<char>> per_j;
  if (per_j_fractions) per_j.assign(static_cast<std::size_t>(T), std::vector<char>());
  auto result = run_trials(
      T, master_seed,
      [&](int t, RandomStream& rng) {
        const Eigen::VectorXd y = sample_observation(ex.model, rng);
        QaggProblem problem(y, ex.family, ex.qagg);
        QaggSolution sol = solve_q_aggregate(problem);
        TrialRecord rec;
        rec.lhs = (sol.aggregate - ex.model.mu).squaredNorm();
        rec.rhs = q_bound_rhs(ex.model.mu, problem.estimates(), ex.family, ex.sigma, ex.lambda,
                               ex.nu, ex.delta);
        rec.converged = sol.converged;
        rec.iterations = sol.iterations;
        if (per_j_fractions) {
          auto& flags = per_j[static_cast<std::size_t>(t)];
          flags.resize(static_cast<std::size_t>(M), 0);
          for (Eigen::Index j = 0; j < M; ++j) {
            if (ex.family.prior()[j] == 0.0) continue;
            const double term =
                (problem.estimates().col(j) - ex.model.mu).squaredNorm() +
                ex.family.penalties()(j) -
                ex.lambda * (ex.family.prior().log_pi(j) + std::log(ex.delta));
            flags[static_cast<std::size_t>(j)] = rec.lhs > term ? 1 : 0;
          }
        }
        return rec;
      },
      jobs);
  if (per_j_fractions) {
    per_j_fractions->assign(static_cast<std::size_t>(M), 0.0);
    int converged = 0;
    for (int t = 0; t < T; ++t) {
      if (!result.records[static_cast<std::size_t>(t)].converged) continue;
      ++converged;
      for (Eigen::Index j = 0; j < M; ++j)
        (*per_j_fractions)[static_cast<std::size_t>(j)] +=
            per_j[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
    }
    if (converged > 0)
      for (auto& f : *per_j_fractions) f /= converged;
  }
  return result;
}

// Weak high-probability bound for the exponential-weights aggregate.
inline RunResult verify_ew_bound(const ExperimentSetup& ex, int T, std::uint64_t master_seed,
                                 int jobs = 1) {
  require_ew_bound_lambda(ex.lambda, ex.sigma, ex.family.family_V());
  return run_trials(
      T, master_seed,
      [&](int, RandomStream& rng) {
        const Eigen::VectorXd y = sample_observation(ex.model, rng);
        const Eigen::MatrixXd estimates = ex.family.apply_all(y);
        const SimplexWeights theta = exp_weights_from_losses(
            squared_losses(y, estimates), ex.family.penalties(), ex.family.prior(), ex.lambda);
        TrialRecord rec;
        rec.lhs = (estimates * theta.vec() - ex.model.mu).squaredNorm();
        rec.rhs = ew_bound_rhs(ex.model.mu, estimates, ex.family, ex.sigma, ex.lambda, ex.delta);
        return rec;
      },
      jobs);
}

// Sparsity-bound run: the RHS depends only on mu, so it is evaluated once
// and shared across trials.
inline RunResult verify_sparsity(const std::vector<SparsityPattern>& patterns, int p,
                                 const ExperimentSetup& ex, AggVariant variant, int T,
                                 std::uint64_t master_seed, int jobs = 1) {
  const double rhs =
      rhs_sparsity(patterns, ex.family, ex.model.mu, p, ex.sigma, ex.delta, ex.lambda, variant);
  return run_trials(
      T, master_seed,
      [&](int, RandomStream& rng) {
        const Eigen::VectorXd y = sample_observation(ex.model, rng);
        TrialRecord rec;
        rec.rhs = rhs;
        if (variant == AggVariant::Q) {
          QaggProblem problem(y, ex.family, ex.qagg);
          QaggSolution sol = solve_q_aggregate(problem);
          rec.lhs = (sol.aggregate - ex.model.mu).squaredNorm();
          rec.converged = sol.converged;
          rec.iterations = sol.iterations;
        } else {
          rec.lhs = (ew_aggregate(y, ex.family, ex.lambda) - ex.model.mu).squaredNorm();
        }
        return rec;
      },
      jobs);
}

// ---- deviation statistic behind both bounds ----------------------------------

enum class WeightRule { Q, EW, FixedVertex };

struct DeviationResult {
  std::vector<TrialRecord> records;  // lhs = Delta*, rhs = lambda log(1/delta)
  RunSummary summary;
  double threshold = 0.0;
  double tail_fraction = 0.0;
  double tail_se_null = 0.0;  // sqrt(delta (1-delta) / T)
  double mean_delta = 0.0;
  double mean_se = 0.0;
  bool tail_ok = false;  // tail_fraction <= delta + 3 se
  bool mean_ok = false;  // mean_delta <= 3 se
};

// Delta* = 2 <xi, mu_thetahat - mu_hat_j> - lambda KL(thetahat, pi)
//          - sum_k thetahat_k C_k - (8 sigma^2/lambda) sum_k thetahat_k
//            ||mu_hat_k - mu_hat_j||^2,
// for thetahat given by the chosen weight rule. Tail contract:
// P(Delta* > lambda log(1/delta)) <= delta; mean contract: E Delta* <= 0.
inline DeviationResult check_deviation_bound(const EstimatorFamily& family,
                                             const GaussianMeanModel& model, WeightRule rule,
                                             Eigen::Index j, double lambda, double delta, int T,
                                             std::uint64_t master_seed, double nu = 0.5,
                                             int jobs = 1) {
  require_deviation_lambda(lambda, model.sigma, family.family_V());
  if (!(delta > 0.0 && delta < 1.0))
    throw ConfigError("check_deviation_bound: delta must lie in (0,1)");
  if (j < 0 || j >= family.M()) throw InputError("check_deviation_bound: index out of range");
  QaggConfig qcfg;
  qcfg.lambda = lambda;
  qcfg.nu = nu;
  const double threshold = lambda * std::log(1.0 / delta);
  const double s2 = model.sigma * model.sigma;

  DeviationResult out;
  auto run = run_trials(
      T, master_seed,
      [&](int, RandomStream& rng) {
        const Eigen::VectorXd y = sample_observation(model, rng);
        const Eigen::VectorXd xi = y - model.mu;
        const Eigen::MatrixXd estimates = family.apply_all(y);
        TrialRecord rec;
        SimplexWeights theta = [&] {
          switch (rule) {
            case WeightRule::Q: {
              QaggProblem problem(y, estimates, family, qcfg);
              QaggSolution sol = solve_q_aggregate(problem);
              rec.converged = sol.converged;
              rec.iterations = sol.iterations;
              return sol.theta_hat;
            }
            case WeightRule::EW:
              return exp_weights_from_losses(squared_losses(y, estimates), family.penalties(),
                                             family.prior(), lambda);
            case WeightRule::FixedVertex:
            default: {
              Eigen::VectorXd e = Eigen::VectorXd::Zero(family.M());
              e(j) = 1.0;
              return SimplexWeights(e);
            }
          }
        }();
        const Eigen::VectorXd mu_theta = estimates * theta.vec();
        double cross = 0.0;
        for (Eigen::Index k = 0; k < family.M(); ++k)
          cross += theta[k] * (estimates.col(k) - estimates.col(j)).squaredNorm();
        rec.lhs = 2.0 * xi.dot(mu_theta - estimates.col(j)) -
                  lambda * kl_divergence(theta, family.prior()) -
                  theta.vec().dot(family.penalties()) - (8.0 * s2 / lambda) * cross;
        rec.rhs = threshold;
        return rec;
      },
      jobs);

  out.threshold = threshold;
  out.summary = run.summary;
  std::vector<double> deltas;
  deltas.reserve(run.records.size());
  for (const auto& r : run.records)
    if (r.converged) deltas.push_back(r.lhs);
  out.records = std::move(run.records);
  out.tail_fraction = out.summary.violation_fraction;
  const double n_conv = static_cast<double>(deltas.size());
  out.tail_se_null = n_conv > 0 ? std::sqrt(delta * (1.0 - delta) / n_conv) : 0.0;
  out.mean_delta = mean(deltas);
  out.mean_se = standard_error(deltas);
  out.tail_ok = out.tail_fraction <= delta + 3.0 * out.tail_se_null;
  out.mean_ok = out.mean_delta <= 3.0 * out.mean_se;
  return out;
}

// ---- chi-square deviations ---------------------------------------------------

struct Chi2Result {
  std::vector<TrialRecord> records;  // lhs = S, rhs = tail threshold
  RunSummary summary;
  double t = 0.0;
  double threshold = 0.0;  // 2 |a|_2 sqrt(t) + 2 |a|_inf t
  double tail_fraction = 0.0;
  double e_minus_t = 0.0;
  double tail_se_null = 0.0;
  bool tail_ok = false;
  bool mgf_checked = false;
  double u = 0.0;
  double mgf_empirical = 0.0;
  double mgf_bound = 0.0;
  double mgf_rel_se = 0.0;
  bool mgf_ok = false;
};

// S = sum_i a_i (Z_i^2 - 1). Tail contract P(S > 2|a|_2 sqrt(t) + 2|a|_inf t)
// <= e^{-t}; MGF contract E exp(uS) <= exp(|a|_2^2 u^2 / (1 - 2 |a|_inf u))
// for 0 < 2 |a|_inf u < 1. u < 0 selects the default 1/(4 |a|_inf).
inline Chi2Result check_chi2_tail(const Eigen::VectorXd& a, double t, int T,
                                  std::uint64_t master_seed, double u = -1.0, int jobs = 1) {
  for (Eigen::Index i = 0; i < a.size(); ++i)
    if (!(a(i) >= 0.0)) throw InputError("check_chi2_tail: coefficients must be nonnegative");
  if (!(t > 0.0)) throw InputError("check_chi2_tail: t must be positive");
  const double a_inf = a.size() > 0 ? a.maxCoeff() : 0.0;
  const double a2_sq = a.squaredNorm();

  Chi2Result out;
  out.t = t;
  out.threshold = 2.0 * std::sqrt(a2_sq * t) + 2.0 * a_inf * t;
  out.e_minus_t = std::exp(-t);

  if (u < 0.0 && a_inf > 0.0) u = 1.0 / (4.0 * a_inf);
  out.mgf_checked = u > 0.0 && a_inf > 0.0;
  if (out.mgf_checked) {
    if (!(2.0 * a_inf * u < 1.0))
      throw ConfigError("check_chi2_tail: rejected u, need 2 |a|_inf u < 1");
    out.u = u;
    out.mgf_bound = std::exp(a2_sq * u * u / (1.0 - 2.0 * a_inf * u));
  }

  std::vector<double> mgf_vals(static_cast<std::size_t>(T), 0.0);
  auto run = run_trials(
      T, master_seed,
      [&](int trial, RandomStream& rng) {
        double s = 0.0;
        for (Eigen::Index i = 0; i < a.size(); ++i) {
          const double z = rng.gaussian();
          s += a(i) * (z * z - 1.0);
        }
        if (out.mgf_checked) mgf_vals[static_cast<std::size_t>(trial)] = std::exp(out.u * s);
        TrialRecord rec;
        rec.lhs = s;
        rec.rhs = out.threshold;
        return rec;
      },
      jobs);

  out.summary = run.summary;
  out.records = std::move(run.records);
  out.tail_fraction = out.summary.violation_fraction;
  out.tail_se_null = std::sqrt(out.e_minus_t * (1.0 - out.e_minus_t) / T);
  out.tail_ok = out.tail_fraction <= out.e_minus_t + 3.0 * out.tail_se_null;
  if (out.mgf_checked) {
    out.mgf_empirical = mean(mgf_vals);
    const double se = standard_error(mgf_vals);
    out.mgf_rel_se = out.mgf_empirical > 0.0 ? se / out.mgf_empirical : 0.0;
    out.mgf_ok = out.mgf_empirical <= out.mgf_bound * (1.0 + 3.0 * out.mgf_rel_se);
  }
  return out;
}

// ---- universal aggregation ---------------------------------------------------

struct UnivaggConstants {
  double pattern = 66.0;     // sigma^2 k log(2eM/(k delta)) coefficient
  double floor_term = 198.0; // sigma^2 logbar(eM/delta) floor coefficient
  double lq_lead = 17.0;     // multiplies (nu_scale sigma)^{2-q} R^q B^q [...]^{1-q/2}
  double nu_scale = 9.0;     // nu = nu_scale * sigma inside the lq terms
};

struct UnivaggClassVerdict {
  ThetaClass cls = ThetaClass::ModelSelection;
  double oracle_term = 0.0;  // min over Theta of ||mu_theta - mu||^2
  double bound = 0.0;        // remainder with the configured constants
  double rhs = 0.0;
  int violations = 0;
  double fraction = 0.0;
  bool ok = false;  // fraction <= delta
};

enum class UnivaggFamily { FixedVectors, PatternProjections };

struct UnivaggResult {
  std::vector<TrialRecord> records;  // rhs = min over class rhs
  RunSummary summary;
  std::vector<UnivaggClassVerdict> classes;
};

namespace detail {

inline double ls_residual(const Eigen::MatrixXd& cols, const Eigen::VectorXd& mu) {
  if (cols.cols() == 0) return mu.squaredNorm();
  const Eigen::VectorXd beta = cols.colPivHouseholderQr().solve(mu);
  return (cols * beta - mu).squaredNorm();
}

inline Eigen::MatrixXd select_columns(const Eigen::MatrixXd& dict, const std::vector<int>& idx) {
  Eigen::MatrixXd out(dict.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i)
    out.col(static_cast<Eigen::Index>(i)) = dict.col(idx[i]);
  return out;
}

// Euclidean projection onto the l1 ball of the given radius.
inline Eigen::VectorXd project_l1_ball(const Eigen::VectorXd& v, double radius) {
  if (v.lpNorm<1>() <= radius) return v;
  std::vector<double> mags(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) mags[static_cast<std::size_t>(i)] = std::abs(v(i));
  std::sort(mags.begin(), mags.end(), std::greater<double>());
  double cum = 0.0, tau = 0.0;
  for (std::size_t k = 0; k < mags.size(); ++k) {
    cum += mags[k];
    const double cand = (cum - radius) / static_cast<double>(k + 1);
    if (cand < mags[k]) tau = cand;
  }
  Eigen::VectorXd out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double mag = std::max(std::abs(v(i)) - tau, 0.0);
    out(i) = v(i) >= 0.0 ? mag : -mag;
  }
  return out;
}

// min ||cols theta - mu||^2 over the l1 ball, by projected gradient from the
// clipped least-squares point and from zero.
inline double min_l1_ball(const Eigen::MatrixXd& cols, const Eigen::VectorXd& mu, double radius,
                          int iters = 4000) {
  if (cols.cols() == 0) return mu.squaredNorm();
  const Eigen::MatrixXd gram = cols.transpose() * cols;
  const Eigen::VectorXd rhs = cols.transpose() * mu;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram, Eigen::EigenvaluesOnly);
  const double lip = 2.0 * std::max(es.eigenvalues().maxCoeff(), 1e-12);
  auto value = [&](const Eigen::VectorXd& x) { return (cols * x - mu).squaredNorm(); };
  double best = mu.squaredNorm();  // theta = 0 is always feasible
  const Eigen::VectorXd ls = cols.colPivHouseholderQr().solve(mu);
  for (const Eigen::VectorXd& start :
       {project_l1_ball(ls, radius), Eigen::VectorXd::Zero(cols.cols()).eval()}) {
    Eigen::VectorXd x = start;
    for (int it = 0; it < iters; ++it) {
      const Eigen::VectorXd grad = 2.0 * (gram * x - rhs);
      x = project_l1_ball(x - grad / lip, radius);
    }
    best = std::min(best, value(x));
  }
  return best;
}

// Candidate-search upper bound for min over B_q(R) (and B_0(D) cap B_q(R)):
// least-squares fits per support, scaled onto the boundary when infeasible.
// Every candidate is feasible, so the value upper-bounds the true min.
inline double min_lq_ball(const Eigen::MatrixXd& dict, const Eigen::VectorXd& mu, double q,
                          double R, int max_support) {
  double best = mu.squaredNorm();
  const auto patterns = enumerate_patterns(static_cast<int>(dict.cols()), max_support);
  for (const auto& pat : patterns) {
    if (pat.indices.empty()) continue;
    const Eigen::MatrixXd cols = select_columns(dict, pat.indices);
    const Eigen::VectorXd beta = cols.colPivHouseholderQr().solve(mu);
    const double norm_q = lq_norm(beta, q);
    if (norm_q <= R) {
      best = std::min(best, (cols * beta - mu).squaredNorm());
      continue;
    }
    // scale the fitted direction back to the boundary; <fit, mu> = ||fit||^2
    const double c = R / norm_q;
    const double fit_sq = (cols * beta).squaredNorm();
    best = std::min(best, mu.squaredNorm() - (2.0 * c - c * c) * fit_sq);
  }
  return best;
}

inline double min_b0(const Eigen::MatrixXd& dict, const Eigen::VectorXd& mu, int D) {
  double best = mu.squaredNorm();
  for (const auto& pat : enumerate_patterns(static_cast<int>(dict.cols()), D))
    best = std::min(best, ls_residual(select_columns(dict, pat.indices), mu));
  return best;
}

inline double min_b0_l1(const Eigen::MatrixXd& dict, const Eigen::VectorXd& mu, int D) {
  double best = mu.squaredNorm();
  for (const auto& pat : enumerate_patterns(static_cast<int>(dict.cols()), D)) {
    if (pat.indices.empty()) continue;
    best = std::min(best, min_l1_ball(select_columns(dict, pat.indices), mu, 1.0));
  }
  return best;
}

inline double min_model_selection(const Eigen::MatrixXd& dict, const Eigen::VectorXd& mu) {
  double best = mu.squaredNorm();  // theta = 0
  for (Eigen::Index j = 0; j < dict.cols(); ++j) {
    const double nrm = dict.col(j).squaredNorm();
    if (nrm == 0.0) continue;
    const double t = std::clamp(mu.dot(dict.col(j)) / nrm, -1.0, 1.0);
    best = std::min(best, (t * dict.col(j) - mu).squaredNorm());
  }
  return best;
}

inline double univagg_oracle_term(const Eigen::MatrixXd& dict, const Eigen::VectorXd& mu,
                                  ThetaClass cls, int D, double q, double R) {
  const int M = static_cast<int>(dict.cols());
  switch (cls) {
    case ThetaClass::ModelSelection:
      return min_model_selection(dict, mu);
    case ThetaClass::Convex:
      return min_l1_ball(dict, mu, 1.0);
    case ThetaClass::Linear:
      return ls_residual(dict, mu);
    case ThetaClass::DLinear:
      return min_b0(dict, mu, D);
    case ThetaClass::DConvex:
      return min_b0_l1(dict, mu, D);
    case ThetaClass::Lq:
      return min_lq_ball(dict, mu, q, R, M);
    case ThetaClass::DLq:
      return min_lq_ball(dict, mu, q, R, D);
  }
  throw ConfigError("univagg_oracle_term: unknown theta class");
}

// Per-class remainder built from the configured constants.
inline double univagg_bound(ThetaClass cls, const UnivaggConstants& c, int M, int D, double q,
                            double R, double sigma, double B, double delta) {
  const double e = std::exp(1.0);
  const double s2 = sigma * sigma;
  const double m_cap = c.pattern * s2 * M * std::log(2.0 * e / delta);
  const double d_cap = c.pattern * s2 * D * std::log(2.0 * e * M / (D * delta));
  auto lq_term = [&](double qq, double rr) {
    const double nu = c.nu_scale * sigma;
    const double main = c.lq_lead * std::pow(nu, 2.0 - qq) * std::pow(rr, qq) *
                        std::pow(B, qq) *
                        std::pow(log_bar(e * M * std::pow(nu / (B * rr), qq) / delta),
                                 1.0 - 0.5 * qq);
    return std::max(main, c.floor_term * s2 * log_bar(e * M / delta));
  };
  switch (cls) {
    case ThetaClass::ModelSelection:
      return c.pattern * s2 * std::log(2.0 * e * M / delta);
    case ThetaClass::Convex:
      return std::min(lq_term(1.0, 1.0), m_cap);
    case ThetaClass::Linear:
      return m_cap;
    case ThetaClass::DLinear:
      return d_cap;
    case ThetaClass::DConvex:
      return std::min(lq_term(1.0, 1.0), d_cap);
    case ThetaClass::Lq:
      return std::min(lq_term(q, R), m_cap);
    case ThetaClass::DLq:
      return std::min(lq_term(q, R), d_cap);
  }
  throw ConfigError("univagg_bound: unknown theta class");
}

}  // namespace detail

// Runs the Q-aggregate once per trial on the dictionary family and tests the
// seven-class oracle inequalities simultaneously. The per-class RHS depends
// only on (dictionary, mu), so it is evaluated once up front.
inline UnivaggResult check_univagg(const Eigen::MatrixXd& dictionary,
                                   const GaussianMeanModel& model,
                                   const std::vector<ThetaClass>& classes,
                                   const UnivaggConstants& consts, int T,
                                   std::uint64_t master_seed, double lambda, double nu,
                                   double delta, int D, double q, double R, double B,
                                   UnivaggFamily family_kind = UnivaggFamily::FixedVectors,
                                   int jobs = 1) {
  const int M = static_cast<int>(dictionary.cols());
  if (M < 1) throw DimensionError("check_univagg: empty dictionary");
  if (dictionary.rows() != model.n()) throw DimensionError("check_univagg: dimension mismatch");
  if (D < 1 || D > M) throw ConfigError("check_univagg: D must lie in [1, M]");
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("check_univagg: delta must lie in (0,1)");
  for (Eigen::Index j = 0; j < dictionary.cols(); ++j)
    if (dictionary.col(j).norm() > B * (1.0 + 1e-12))
      throw InputError("check_univagg: dictionary norm exceeds B");
  if (classes.empty()) throw ConfigError("check_univagg: no classes requested");

  const EstimatorFamily family =
      family_kind == UnivaggFamily::FixedVectors
          ? fixed_vector_family(dictionary, Prior::uniform(M), model.sigma)
          : sparsity_pattern_family(dictionary, M, model.sigma).family;
  require_q_bound_lambda(lambda, model.sigma, nu, family.family_V());

  UnivaggResult out;
  double min_rhs = kInf;
  for (ThetaClass cls : classes) {
    UnivaggClassVerdict v;
    v.cls = cls;
    v.oracle_term = detail::univagg_oracle_term(dictionary, model.mu, cls, D, q, R);
    v.bound = detail::univagg_bound(cls, consts, M, D, q, R, model.sigma, B, delta);
    v.rhs = v.oracle_term + v.bound;
    out.classes.push_back(v);
    min_rhs = std::min(min_rhs, v.rhs);
  }

  QaggConfig qcfg;
  qcfg.lambda = lambda;
  qcfg.nu = nu;
  auto run = run_trials(
      T, master_seed,
      [&](int, RandomStream& rng) {
        const Eigen::VectorXd y = sample_observation(model, rng);
        QaggSolution sol = solve_q_aggregate(y, family, qcfg);
        TrialRecord rec;
        rec.lhs = (sol.aggregate - model.mu).squaredNorm();
        rec.rhs = min_rhs;
        rec.converged = sol.converged;
        rec.iterations = sol.iterations;
        return rec;
      },
      jobs);

  int converged = 0;
  for (const auto& r : run.records) {
    if (!r.converged) continue;
    ++converged;
    for (auto& v : out.classes)
      if (r.lhs > v.rhs) ++v.violations;
  }
  for (auto& v : out.classes) {
    v.fraction = converged > 0 ? static_cast<double>(v.violations) / converged : 0.0;
    v.ok = v.fraction <= delta;
  }
  out.summary = run.summary;
  out.records = std::move(run.records);
  return out;
}

// ---- emission ----------------------------------------------------------------

// %.17g round-trips doubles, so reruns stay byte-identical.
inline std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

inline std::string trials_csv(const std::vector<TrialRecord>& records) {
  std::string out = "trial,seed,lhs,rhs,violated,converged,iterations\n";
  for (const auto& r : records) {
    out += std::to_string(r.trial);
    out += ',';
    out += std::to_string(r.seed);
    out += ',';
    out += format_double(r.lhs);
    out += ',';
    out += format_double(r.rhs);
    out += ',';
    out += r.violated ? '1' : '0';
    out += ',';
    out += r.converged ? '1' : '0';
    out += ',';
    out += std::to_string(r.iterations);
    out += '\n';
  }
  return out;
}

}  // namespace affagg
