#pragma once

#include <cmath>

#include "affagg/core.hpp"
#include "affagg/estimators.hpp"

namespace affagg {

// Gibbs weights theta_j proportional to pi_j exp(-(loss_j + C_j)/lambda),
// formed entirely in log space so losses of any magnitude survive the
// exponential. Exact ties come out exactly equal.
inline SimplexWeights exp_weights_from_losses(const Eigen::VectorXd& losses,
                                              const Eigen::VectorXd& penalties,
                                              const Prior& prior, double lambda) {
  if (!(lambda > 0.0)) throw ConfigError("exp_weights: lambda must be positive");
  if (losses.size() != prior.size() || penalties.size() != prior.size())
    throw DimensionError("exp_weights: length mismatch");
  Eigen::VectorXd logw(prior.size());
  for (Eigen::Index j = 0; j < prior.size(); ++j) {
    if (std::isnan(losses(j))) throw InputError("exp_weights: NaN loss");
    logw(j) = prior.log_pi(j) - (losses(j) + penalties(j)) / lambda;
  }
  const double shift = logw.maxCoeff();
  if (!(shift > -kInf)) throw ConfigError("exp_weights: prior has empty support");
  return SimplexWeights::normalized((logw.array() - shift).exp());
}

inline SimplexWeights exp_weights(const Eigen::VectorXd& y, const EstimatorFamily& family,
                                  double lambda) {
  const Eigen::MatrixXd estimates = family.apply_all(y);
  return exp_weights_from_losses(squared_losses(y, estimates), family.penalties(),
                                 family.prior(), lambda);
}

inline Eigen::VectorXd ew_aggregate(const Eigen::VectorXd& y, const EstimatorFamily& family,
                                    double lambda) {
  const Eigen::MatrixXd estimates = family.apply_all(y);
  const SimplexWeights theta = exp_weights_from_losses(
      squared_losses(y, estimates), family.penalties(), family.prior(), lambda);
  return estimates * theta.vec();
}

// Objective of the variational characterization; the closed form above is its
// argmin over the simplex.
inline double ew_variational_objective(const SimplexWeights& theta, const Eigen::VectorXd& losses,
                                       const Eigen::VectorXd& penalties, const Prior& prior,
                                       double lambda) {
  if (theta.size() != losses.size() || theta.size() != penalties.size())
    throw DimensionError("ew_variational_objective: length mismatch");
  return theta.vec().dot(losses + penalties) + lambda * kl_divergence(theta, prior);
}

}  // namespace affagg
