#pragma once

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "affagg/core.hpp"

namespace affagg {

// Affine rule mu_hat = A Y + b with PSD A. penalty_C = 4 sigma^2 Tr(A) is the
// variance surcharge the aggregation criteria charge to this candidate.
class AffineEstimator {
 public:
  AffineEstimator(PsdMatrix a, Eigen::VectorXd b, double sigma)
      : a_(std::move(a)), b_(std::move(b)) {
    if (a_.dim() != b_.size()) throw DimensionError("AffineEstimator: A/b dimension mismatch");
    if (!b_.allFinite()) throw InputError("AffineEstimator: non-finite offset");
    if (!(sigma > 0.0)) throw InputError("AffineEstimator: sigma must be positive");
    penalty_c_ = 4.0 * sigma * sigma * a_.trace();
  }

  Eigen::VectorXd apply(const Eigen::VectorXd& y) const {
    if (y.size() != a_.dim()) throw DimensionError("AffineEstimator::apply: dimension mismatch");
    return a_.mat() * y + b_;
  }

  Eigen::Index dim() const { return a_.dim(); }
  const Eigen::MatrixXd& matrix() const { return a_.mat(); }
  const Eigen::VectorXd& offset() const { return b_; }
  double trace_A() const { return a_.trace(); }
  double opnorm_A() const { return a_.opnorm(); }
  double penalty_C() const { return penalty_c_; }

 private:
  PsdMatrix a_;
  Eigen::VectorXd b_;
  double penalty_c_ = 0.0;
};

// Ordered candidate list with its prior. family_V = max_j ||A_j||_op is the
// constant every admissibility threshold depends on.
class EstimatorFamily {
 public:
  EstimatorFamily(std::vector<AffineEstimator> members, Prior prior)
      : members_(std::move(members)), prior_(std::move(prior)) {
    if (members_.empty()) throw DimensionError("EstimatorFamily: no members");
    if (prior_.size() != static_cast<Eigen::Index>(members_.size()))
      throw DimensionError("EstimatorFamily: prior length does not match member count");
    n_ = members_.front().dim();
    family_v_ = 0.0;
    penalties_.resize(static_cast<Eigen::Index>(members_.size()));
    for (std::size_t j = 0; j < members_.size(); ++j) {
      if (members_[j].dim() != n_)
        throw DimensionError("EstimatorFamily: members have mixed dimensions");
      family_v_ = std::max(family_v_, members_[j].opnorm_A());
      penalties_(static_cast<Eigen::Index>(j)) = members_[j].penalty_C();
    }
  }

  Eigen::Index M() const { return static_cast<Eigen::Index>(members_.size()); }
  Eigen::Index n() const { return n_; }
  double family_V() const { return family_v_; }
  const AffineEstimator& member(Eigen::Index j) const { return members_[static_cast<std::size_t>(j)]; }
  const Prior& prior() const { return prior_; }
  const Eigen::VectorXd& penalties() const { return penalties_; }

  // Realized estimates for one observation, one column per member.
  Eigen::MatrixXd apply_all(const Eigen::VectorXd& y) const {
    Eigen::MatrixXd est(n_, M());
    for (Eigen::Index j = 0; j < M(); ++j) est.col(j) = member(j).apply(y);
    return est;
  }

 private:
  std::vector<AffineEstimator> members_;
  Prior prior_;
  Eigen::Index n_ = 0;
  double family_v_ = 0.0;
  Eigen::VectorXd penalties_;
};

inline Eigen::VectorXd squared_losses(const Eigen::VectorXd& y, const Eigen::MatrixXd& estimates) {
  if (y.size() != estimates.rows()) throw DimensionError("squared_losses: dimension mismatch");
  Eigen::VectorXd losses(estimates.cols());
  for (Eigen::Index j = 0; j < estimates.cols(); ++j)
    losses(j) = (y - estimates.col(j)).squaredNorm();
  return losses;
}

// Orthogonal projector onto the span of the given columns, via SVD with
// singular values below svd_rank * s_max treated as zero. Empty column sets
// give the zero estimator.
inline AffineEstimator projection_estimator(const Eigen::MatrixXd& design_columns, double sigma) {
  const Eigen::Index n = design_columns.rows();
  if (n < 1) throw DimensionError("projection_estimator: need at least one row");
  if (design_columns.size() > 0 && !design_columns.allFinite())
    throw InputError("projection_estimator: non-finite design entry");
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
  if (design_columns.cols() > 0) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(design_columns, Eigen::ComputeThinU);
    const Eigen::VectorXd& s = svd.singularValues();
    const double cut = tolerances().svd_rank * s(0);
    Eigen::Index rank = 0;
    while (rank < s.size() && s(rank) > cut) ++rank;
    const Eigen::MatrixXd u = svd.matrixU().leftCols(rank);
    a = u * u.transpose();
    a = 0.5 * (a + a.transpose());
  }
  AffineEstimator est(PsdMatrix(std::move(a)), Eigen::VectorXd::Zero(n), sigma);
  if (std::abs(est.trace_A() - std::llround(est.trace_A())) > 1e-6)
    throw InputError("projection_estimator: projector trace is not an integer rank");
  return est;
}

// A = diag(a) with entries in [0,1]; covers ordered projections and generic
// shrinkage filters, always with operator norm <= 1.
inline AffineEstimator diagonal_filter(const Eigen::VectorXd& a, double sigma) {
  for (Eigen::Index i = 0; i < a.size(); ++i)
    if (!(a(i) >= 0.0 && a(i) <= 1.0))
      throw InputError("diagonal_filter: entry " + std::to_string(a(i)) + " outside [0,1]");
  return AffineEstimator(PsdMatrix(Eigen::MatrixXd(a.asDiagonal())),
                         Eigen::VectorXd::Zero(a.size()), sigma);
}

struct SparsityPattern {
  std::vector<int> indices;  // 0-based column ids, ascending
  int rank = -1;             // Rk(X_J), filled when the projector is built
  int cardinality() const { return static_cast<int>(indices.size()); }
};

// All subsets of [p] up to max_cardinality, empty set included, ordered by
// cardinality then lexicographically. Refuses p > 30.
inline std::vector<SparsityPattern> enumerate_patterns(int p, int max_cardinality) {
  if (p < 1) throw InputError("enumerate_patterns: p must be >= 1");
  if (p > 30) throw InputError("enumerate_patterns: p > 30 refused (2^p patterns)");
  if (max_cardinality < 0 || max_cardinality > p)
    throw InputError("enumerate_patterns: max_cardinality must lie in [0, p]");
  std::vector<SparsityPattern> out;
  for (int k = 0; k <= max_cardinality; ++k) {
    std::vector<int> comb(static_cast<std::size_t>(k));
    std::iota(comb.begin(), comb.end(), 0);
    while (true) {
      out.push_back(SparsityPattern{comb, -1});
      int i = k - 1;
      while (i >= 0 && comb[static_cast<std::size_t>(i)] == p - k + i) --i;
      if (i < 0) break;
      ++comb[static_cast<std::size_t>(i)];
      for (int j = i + 1; j < k; ++j)
        comb[static_cast<std::size_t>(j)] = comb[static_cast<std::size_t>(j - 1)] + 1;
    }
  }
  return out;
}

// pi_J proportional to exp(-|J|) / C(p,|J|), normalized over the supplied
// pattern list with the normalizer formed in log space.
inline Prior sparsity_prior(const std::vector<SparsityPattern>& patterns, int p) {
  if (patterns.empty()) throw InputError("sparsity_prior: empty pattern list");
  Eigen::VectorXd logw(static_cast<Eigen::Index>(patterns.size()));
  for (std::size_t i = 0; i < patterns.size(); ++i) {
    const int k = patterns[i].cardinality();
    if (k < 0 || k > p) throw InputError("sparsity_prior: pattern cardinality outside [0, p]");
    const double log_binom =
        std::lgamma(p + 1.0) - std::lgamma(k + 1.0) - std::lgamma(p - k + 1.0);
    logw(static_cast<Eigen::Index>(i)) = -static_cast<double>(k) - log_binom;
  }
  const double logz = log_sum_exp(logw);
  return Prior(SimplexWeights::normalized((logw.array() - logz).exp()));
}

struct SparsityFamily {
  std::vector<SparsityPattern> patterns;
  EstimatorFamily family;
};

// Least-squares projections onto every pattern's column span, paired with the
// cardinality-downweighting prior.
inline SparsityFamily sparsity_pattern_family(const Eigen::MatrixXd& X, int max_cardinality,
                                              double sigma) {
  auto patterns = enumerate_patterns(static_cast<int>(X.cols()), max_cardinality);
  std::vector<AffineEstimator> members;
  members.reserve(patterns.size());
  for (auto& pat : patterns) {
    Eigen::MatrixXd cols(X.rows(), pat.cardinality());
    for (int i = 0; i < pat.cardinality(); ++i)
      cols.col(i) = X.col(pat.indices[static_cast<std::size_t>(i)]);
    members.push_back(projection_estimator(cols, sigma));
    pat.rank = static_cast<int>(std::llround(members.back().trace_A()));
  }
  Prior prior = sparsity_prior(patterns, static_cast<int>(X.cols()));
  return SparsityFamily{std::move(patterns), EstimatorFamily(std::move(members), std::move(prior))};
}

// Dictionary vectors as constant estimators: A_j = 0, b_j = mu_j, so C_j = 0
// and V = 0.
inline EstimatorFamily fixed_vector_family(const Eigen::MatrixXd& dictionary, Prior prior,
                                           double sigma) {
  if (dictionary.cols() < 1) throw DimensionError("fixed_vector_family: empty dictionary");
  std::vector<AffineEstimator> members;
  members.reserve(static_cast<std::size_t>(dictionary.cols()));
  const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(dictionary.rows(), dictionary.rows());
  for (Eigen::Index j = 0; j < dictionary.cols(); ++j)
    members.emplace_back(PsdMatrix(zero), dictionary.col(j), sigma);
  return EstimatorFamily(std::move(members), std::move(prior));
}

// CSV design matrix: rows are observations, columns are X_j. An optional
// single header line is skipped; every data cell must parse as a finite
// decimal float.
inline Eigen::MatrixXd load_design_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("load_design_csv: cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  bool first = true;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t,") == std::string::npos) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool parse_ok = true;
    while (std::getline(ss, cell, ',')) {
      const char* begin = cell.c_str();
      char* end = nullptr;
      const double v = std::strtod(begin, &end);
      while (end && *end == ' ') ++end;
      if (end == begin || (end && *end != '\0')) {
        parse_ok = false;
        break;
      }
      if (!std::isfinite(v)) throw InputError("load_design_csv: non-finite value in " + path);
      row.push_back(v);
    }
    if (!parse_ok) {
      if (first) {
        first = false;  // header line
        continue;
      }
      throw InputError("load_design_csv: unparseable row in " + path + ": " + line);
    }
    if (width == 0) width = row.size();
    if (row.size() != width)
      throw InputError("load_design_csv: ragged row in " + path);
    rows.push_back(std::move(row));
    first = false;
  }
  if (rows.empty()) throw InputError("load_design_csv: no data rows in " + path);
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < width; ++j)
      X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return X;
}

// Single-column observation vector from CSV.
inline Eigen::VectorXd load_vector_csv(const std::string& path) {
  Eigen::MatrixXd m = load_design_csv(path);
  if (m.cols() != 1) throw InputError("load_vector_csv: expected one column in " + path);
  return m.col(0);
}

inline Eigen::MatrixXd gaussian_design(Eigen::Index n, Eigen::Index p, std::uint64_t seed) {
  if (n < 1 || p < 1) throw InputError("gaussian_design: n and p must be >= 1");
  RandomStream rng(seed);
  Eigen::MatrixXd X(n, p);
  for (Eigen::Index j = 0; j < p; ++j)
    for (Eigen::Index i = 0; i < n; ++i) X(i, j) = rng.gaussian();
  return X;
}

}  // namespace affagg
