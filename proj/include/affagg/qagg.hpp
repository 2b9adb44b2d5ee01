#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "affagg/core.hpp"
#include "affagg/estimators.hpp"

namespace affagg {

struct QaggConfig {
  double nu = 0.5;         // mixing between averaged candidate risk and mixture risk
  double lambda = 0.0;     // KL temperature, must be set by the caller
  int max_iters = 50000;
  double obj_tol = 1e-10;  // stop once an accepted step improves less than this
  bool backtracking = true;
  double step = 0.0;       // initial mirror step; 0 means 1/lambda

  void validate() const {
    if (!(nu > 0.0 && nu < 1.0)) throw ConfigError("QaggConfig: nu must lie in (0,1)");
    if (!(lambda > 0.0)) throw ConfigError("QaggConfig: lambda must be positive");
    if (max_iters < 1) throw ConfigError("QaggConfig: max_iters must be >= 1");
    if (!(obj_tol > 0.0)) throw ConfigError("QaggConfig: obj_tol must be positive");
  }
};

struct QaggSolution {
  SimplexWeights theta_hat;
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
  Eigen::VectorXd aggregate;
};

// One observation's view of the criterion: member estimates, their losses and
// penalties are evaluated once here and shared by objective, gradient and
// solver.
class QaggProblem {
 public:
  QaggProblem(Eigen::VectorXd y, const EstimatorFamily& family, QaggConfig cfg)
      : y_(std::move(y)),
        cfg_(cfg),
        estimates_(family.apply_all(y_)),
        losses_(squared_losses(y_, estimates_)),
        penalties_(family.penalties()),
        log_pi_(family.prior().log_vec()) {
    init_checks();
  }

  // Reuses estimates already computed for the same observation.
  QaggProblem(Eigen::VectorXd y, Eigen::MatrixXd estimates, const EstimatorFamily& family,
              QaggConfig cfg)
      : y_(std::move(y)),
        cfg_(cfg),
        estimates_(std::move(estimates)),
        losses_(squared_losses(y_, estimates_)),
        penalties_(family.penalties()),
        log_pi_(family.prior().log_vec()) {
    init_checks();
  }
  // nu * sum_j theta_j ||Y - mu_j||^2 + (1-nu) ||Y - mu_theta||^2
  //   + sum_j theta_j C_j + lambda KL(theta, pi); +inf on zero-prior mass.
  double objective(const SimplexWeights& theta) const {
    check_len(theta.size());
    double kl = 0.0;
    for (Eigen::Index j = 0; j < theta.size(); ++j) {
      const double t = theta[j];
      if (t == 0.0) continue;
      if (log_pi_(j) == -kInf) return kInf;
      kl += t * (std::log(t) - log_pi_(j));
    }
    const Eigen::VectorXd& th = theta.vec();
    const double lin = th.dot(cfg_.nu * losses_ + penalties_);
    const double quad = (1.0 - cfg_.nu) * (y_ - estimates_ * th).squaredNorm();
    return lin + quad + cfg_.lambda * std::max(kl, 0.0);
  }

  // Coordinate j: nu L_j - 2(1-nu) <Y - mu_theta, mu_j> + C_j
  //   + lambda (log(theta_j / pi_j) + 1).
  // At theta_j = 0 the KL term follows the limit convention, so the returned
  // coordinate is -inf; the solver keeps its iterates strictly positive and
  // never lands there.
  Eigen::VectorXd gradient(const SimplexWeights& theta) const {
    check_len(theta.size());
    const Eigen::VectorXd resid = y_ - estimates_ * theta.vec();
    const Eigen::VectorXd inner = estimates_.transpose() * resid;
    Eigen::VectorXd g(theta.size());
    for (Eigen::Index j = 0; j < theta.size(); ++j) {
      const double log_t = theta[j] > 0.0 ? std::log(theta[j]) : -kInf;
      g(j) = cfg_.nu * losses_(j) - 2.0 * (1.0 - cfg_.nu) * inner(j) + penalties_(j) +
             cfg_.lambda * (log_t - log_pi_(j) + 1.0);
    }
    return g;
  }

  const Eigen::VectorXd& y() const { return y_; }
  const QaggConfig& config() const { return cfg_; }
  const Eigen::MatrixXd& estimates() const { return estimates_; }
  const Eigen::VectorXd& losses() const { return losses_; }
  const Eigen::VectorXd& penalties() const { return penalties_; }
  const Eigen::VectorXd& log_pi() const { return log_pi_; }
  Eigen::Index M() const { return estimates_.cols(); }

 private:
  void init_checks() const {
    cfg_.validate();
    if (!y_.allFinite()) throw InputError("QaggProblem: non-finite observation");
    if (y_.size() != estimates_.rows())
      throw DimensionError("QaggProblem: observation/estimates mismatch");
    if (estimates_.cols() != log_pi_.size())
      throw DimensionError("QaggProblem: estimates/prior mismatch");
  }

  void check_len(Eigen::Index m) const {
    if (m != estimates_.cols()) throw DimensionError("QaggProblem: weight length mismatch");
  }

  Eigen::VectorXd y_;
  QaggConfig cfg_;
  Eigen::MatrixXd estimates_;
  Eigen::VectorXd losses_;
  Eigen::VectorXd penalties_;
  Eigen::VectorXd log_pi_;
};

inline double q_objective(const SimplexWeights& theta, const Eigen::VectorXd& y,
                          const EstimatorFamily& family, const QaggConfig& cfg) {
  return QaggProblem(y, family, cfg).objective(theta);
}

inline Eigen::VectorXd q_gradient(const QaggProblem& problem, const SimplexWeights& theta) {
  return problem.gradient(theta);
}

// Entropic mirror descent (multiplicative weights) restricted to the prior's
// support, started at the prior. The iterate state is log theta, updated as
// log theta - eta * grad and renormalized through log_sum_exp, so iterates
// stay strictly positive on the support. The step starts at 1/lambda (the
// Gibbs fixed-point step), is halved until the objective decreases and grown
// again after accepted steps. objective_trace, when given, records the
// objective at the start and after every accepted step.
inline QaggSolution solve_q_aggregate(const QaggProblem& problem,
                                      std::vector<double>* objective_trace = nullptr) {
  const QaggConfig& cfg = problem.config();
  const Eigen::Index M = problem.M();

  std::vector<Eigen::Index> support;
  for (Eigen::Index j = 0; j < M; ++j)
    if (problem.log_pi()(j) > -kInf) support.push_back(j);
  if (support.empty()) throw ConfigError("solve_q_aggregate: prior has no support");
  const Eigen::Index s = static_cast<Eigen::Index>(support.size());

  Eigen::MatrixXd est(problem.estimates().rows(), s);
  Eigen::VectorXd lin(s), lp(s);
  for (Eigen::Index i = 0; i < s; ++i) {
    est.col(i) = problem.estimates().col(support[static_cast<std::size_t>(i)]);
    lin(i) = cfg.nu * problem.losses()(support[static_cast<std::size_t>(i)]) +
             problem.penalties()(support[static_cast<std::size_t>(i)]);
    lp(i) = problem.log_pi()(support[static_cast<std::size_t>(i)]);
  }
  lp.array() -= log_sum_exp(lp);

  const Eigen::VectorXd& y = problem.y();
  auto objective_of = [&](const Eigen::VectorXd& th, const Eigen::VectorXd& logth) {
    double kl = 0.0;
    for (Eigen::Index i = 0; i < s; ++i) kl += th(i) * (logth(i) - lp(i));
    return th.dot(lin) + (1.0 - cfg.nu) * (y - est * th).squaredNorm() +
           cfg.lambda * std::max(kl, 0.0);
  };
  auto gradient_of = [&](const Eigen::VectorXd& th, const Eigen::VectorXd& logth) {
    const Eigen::VectorXd resid = y - est * th;
    const Eigen::VectorXd inner = est.transpose() * resid;
    Eigen::VectorXd g(s);
    for (Eigen::Index i = 0; i < s; ++i)
      g(i) = lin(i) - 2.0 * (1.0 - cfg.nu) * inner(i) +
             cfg.lambda * (logth(i) - lp(i) + 1.0);
    return g;
  };

  Eigen::VectorXd logth = lp;
  Eigen::VectorXd th = logth.array().exp();
  double obj = objective_of(th, logth);
  if (objective_trace) {
    objective_trace->clear();
    objective_trace->push_back(obj);
  }

  const double eta0 = cfg.step > 0.0 ? cfg.step : 1.0 / cfg.lambda;
  const double eta_cap = 1024.0 * eta0;
  double eta = eta0;
  int iterations = 0;
  bool converged = false;

  for (int it = 1; it <= cfg.max_iters; ++it) {
    iterations = it;
    const Eigen::VectorXd g = gradient_of(th, logth);
    double try_eta = eta;
    Eigen::VectorXd logth_new, th_new;
    double obj_new = kInf;
    bool accepted = false;
    for (int bt = 0; bt < 64; ++bt) {
      logth_new = logth - try_eta * g;
      logth_new.array() -= log_sum_exp(logth_new);
      th_new = logth_new.array().exp();
      obj_new = objective_of(th_new, logth_new);
      if (obj_new < obj) {
        accepted = true;
        break;
      }
      if (!cfg.backtracking) break;
      try_eta *= 0.5;
    }
    if (!accepted) {
      // no descent at any step size: numerically stationary
      converged = cfg.backtracking;
      break;
    }
    const double decrease = obj - obj_new;
    logth.swap(logth_new);
    th.swap(th_new);
    obj = obj_new;
    if (objective_trace) objective_trace->push_back(obj);
    if (cfg.backtracking) eta = std::min(try_eta * 2.0, eta_cap);
    if (decrease < cfg.obj_tol) {
      converged = true;
      break;
    }
  }

  Eigen::VectorXd full = Eigen::VectorXd::Zero(M);
  for (Eigen::Index i = 0; i < s; ++i) full(support[static_cast<std::size_t>(i)]) = th(i);
  SimplexWeights theta_hat(full);
  Eigen::VectorXd aggregate = problem.estimates() * theta_hat.vec();
  return QaggSolution{std::move(theta_hat), obj, iterations, converged, std::move(aggregate)};
}

inline QaggSolution solve_q_aggregate(const Eigen::VectorXd& y, const EstimatorFamily& family,
                                      const QaggConfig& cfg) {
  return solve_q_aggregate(QaggProblem(y, family, cfg));
}

}  // namespace affagg
