#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "affagg/qagg.hpp"
#include "test_support.hpp"

using Catch::Approx;
using namespace affagg;

namespace {

QaggConfig make_cfg(double lambda, double nu = 0.5) {
  QaggConfig cfg;
  cfg.lambda = lambda;
  cfg.nu = nu;
  return cfg;
}

}  // namespace

TEST_CASE("q_objective at a vertex") {
  RandomStream rng(101);
  EstimatorFamily fam = test_support::random_diagonal_family(6, 3, 1.0, rng);
  const Eigen::VectorXd y = rng.gaussian_vector(6);
  const QaggConfig cfg = make_cfg(20.0);
  QaggProblem prob(y, fam, cfg);
  for (Eigen::Index j = 0; j < 3; ++j) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(3);
    e(j) = 1.0;
    const double expect = (y - prob.estimates().col(j)).squaredNorm() + fam.penalties()(j) +
                          cfg.lambda * std::log(1.0 / fam.prior()[j]);
    REQUIRE(prob.objective(SimplexWeights(e)) == Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("q_objective with identical estimators loses the spread term") {
  const int n = 5;
  Eigen::VectorXd filt = Eigen::VectorXd::Constant(n, 0.3);
  Eigen::VectorXd offset(n);
  offset << 1, -2, 0, 4, 0.5;
  std::vector<AffineEstimator> members;
  members.emplace_back(PsdMatrix(Eigen::MatrixXd(filt.asDiagonal())), offset, 1.0);
  members.emplace_back(PsdMatrix(Eigen::MatrixXd(filt.asDiagonal())), offset, 1.0);
  EstimatorFamily fam(std::move(members), Prior::uniform(2));
  RandomStream rng(7);
  const Eigen::VectorXd y = rng.gaussian_vector(n);
  const QaggConfig cfg = make_cfg(20.0, 0.5);
  QaggProblem prob(y, fam, cfg);
  Eigen::VectorXd th(2);
  th << 0.3, 0.7;
  SimplexWeights theta(th);
  const double expect = (y - prob.estimates().col(0)).squaredNorm() +
                        theta.vec().dot(fam.penalties()) +
                        cfg.lambda * kl_divergence(theta, fam.prior());
  REQUIRE(prob.objective(theta) == Approx(expect).epsilon(1e-12));
}

TEST_CASE("q_objective matches the naive evaluator") {
  RandomStream rng(55);
  for (int rep = 0; rep < 20; ++rep) {
    EstimatorFamily fam = test_support::random_diagonal_family(5, 3, 1.0, rng);
    const Eigen::VectorXd y = 2.0 * rng.gaussian_vector(5);
    const QaggConfig cfg = make_cfg(5.0 + 30.0 * rng.uniform01(), 0.2 + 0.6 * rng.uniform01());
    QaggProblem prob(y, fam, cfg);
    Eigen::VectorXd w(3);
    for (int j = 0; j < 3; ++j) w(j) = rng.uniform01() + 0.01;
    SimplexWeights theta = SimplexWeights::normalized(w);
    const double naive = test_support::naive_q_objective(
        theta.vec(), y, prob.estimates(), fam.penalties(), fam.prior().weights().vec(), cfg.nu,
        cfg.lambda);
    REQUIRE(prob.objective(theta) == Approx(naive).epsilon(1e-12));
  }
}

TEST_CASE("q_objective is +inf on zero-prior mass") {
  RandomStream rng(3);
  std::vector<AffineEstimator> members;
  for (int j = 0; j < 2; ++j)
    members.push_back(diagonal_filter(Eigen::VectorXd::Constant(3, 0.5), 1.0));
  Eigen::VectorXd pi(2);
  pi << 1.0, 0.0;
  EstimatorFamily fam(std::move(members), Prior{SimplexWeights(pi)});
  QaggProblem prob(rng.gaussian_vector(3), fam, make_cfg(20.0));
  Eigen::VectorXd th(2);
  th << 0.5, 0.5;
  REQUIRE(prob.objective(SimplexWeights(th)) == kInf);
}

TEST_CASE("q_gradient agrees with central finite differences") {
  RandomStream rng(404);
  const double h = 1e-6;
  for (int rep = 0; rep < 10; ++rep) {
    const int M = 2 + static_cast<int>(rng.next_u64() % 8);
    const int n = 4 + static_cast<int>(rng.next_u64() % 16);
    EstimatorFamily fam = test_support::random_diagonal_family(n, M, 1.0, rng);
    const Eigen::VectorXd y = 2.0 * rng.gaussian_vector(n);
    const QaggConfig cfg = make_cfg(15.0, 0.4);
    QaggProblem prob(y, fam, cfg);

    Eigen::VectorXd w(M);
    for (int j = 0; j < M; ++j) w(j) = rng.uniform01() + 0.1;
    SimplexWeights theta = SimplexWeights::normalized(w);
    const Eigen::VectorXd g = prob.gradient(theta);

    for (Eigen::Index j = 0; j < M; ++j) {
      Eigen::VectorXd up = theta.vec(), dn = theta.vec();
      up(j) += h;
      dn(j) -= h;
      const auto naive = [&](const Eigen::VectorXd& t) {
        return test_support::naive_q_objective(t, y, prob.estimates(), fam.penalties(),
                                               fam.prior().weights().vec(), cfg.nu, cfg.lambda);
      };
      const double fd = (naive(up) - naive(dn)) / (2.0 * h);
      REQUIRE(std::abs(g(j) - fd) <= 1e-4);
    }
  }
}

TEST_CASE("q_gradient flags boundary coordinates with the limit convention") {
  RandomStream rng(64);
  EstimatorFamily fam = test_support::random_diagonal_family(4, 3, 1.0, rng);
  QaggProblem prob(rng.gaussian_vector(4), fam, make_cfg(10.0));
  Eigen::VectorXd th(3);
  th << 0.5, 0.5, 0.0;
  const Eigen::VectorXd g = prob.gradient(SimplexWeights(th));
  REQUIRE(g(2) == -kInf);
  REQUIRE(std::isfinite(g(0)));
  REQUIRE(std::isfinite(g(1)));
}

TEST_CASE("q_gradient is stationary on the symmetric instance") {
  const int n = 4;
  Eigen::VectorXd offset(n);
  offset << 1, 2, 3, 4;
  std::vector<AffineEstimator> members;
  for (int j = 0; j < 3; ++j)
    members.emplace_back(PsdMatrix(Eigen::MatrixXd::Zero(n, n)), offset, 1.0);
  EstimatorFamily fam(std::move(members), Prior::uniform(3));
  Eigen::VectorXd y(n);
  y << 0.5, -1, 2, 0;
  QaggProblem prob(y, fam, make_cfg(10.0));
  const Eigen::VectorXd g = prob.gradient(fam.prior().weights());
  REQUIRE(std::abs(g(0) - g(1)) <= 1e-12);
  REQUIRE(std::abs(g(0) - g(2)) <= 1e-12);
}

TEST_CASE("q_gradient KL part is linear in lambda") {
  RandomStream rng(77);
  EstimatorFamily fam = test_support::random_diagonal_family(6, 4, 1.0, rng);
  const Eigen::VectorXd y = rng.gaussian_vector(6);
  Eigen::VectorXd w(4);
  for (int j = 0; j < 4; ++j) w(j) = rng.uniform01() + 0.1;
  SimplexWeights theta = SimplexWeights::normalized(w);
  const Eigen::VectorXd g1 = QaggProblem(y, fam, make_cfg(1.0)).gradient(theta);
  const Eigen::VectorXd g2 = QaggProblem(y, fam, make_cfg(2.0)).gradient(theta);
  for (Eigen::Index j = 0; j < 4; ++j) {
    const double kl_term = std::log(theta[j] / fam.prior()[j]) + 1.0;
    REQUIRE(g2(j) - g1(j) == Approx(kl_term).margin(1e-10));
  }
}

TEST_CASE("solver: single member and symmetric pair") {
  RandomStream rng(500);
  {
    std::vector<AffineEstimator> members;
    members.push_back(diagonal_filter(Eigen::VectorXd::Constant(4, 0.7), 1.0));
    EstimatorFamily fam(std::move(members), Prior::uniform(1));
    const Eigen::VectorXd y = rng.gaussian_vector(4);
    QaggSolution sol = solve_q_aggregate(y, fam, make_cfg(20.0));
    REQUIRE(sol.theta_hat[0] == 1.0);
    REQUIRE(sol.converged);
    REQUIRE((sol.aggregate - fam.member(0).apply(y)).cwiseAbs().maxCoeff() <= 1e-14);
  }
  {
    Eigen::VectorXd filt = Eigen::VectorXd::Constant(4, 0.5);
    std::vector<AffineEstimator> members;
    Eigen::VectorXd b(4);
    b << 1, 0, -1, 2;
    members.emplace_back(PsdMatrix(Eigen::MatrixXd(filt.asDiagonal())), b, 1.0);
    members.emplace_back(PsdMatrix(Eigen::MatrixXd(filt.asDiagonal())), b, 1.0);
    EstimatorFamily fam(std::move(members), Prior::uniform(2));
    const Eigen::VectorXd y = rng.gaussian_vector(4);
    QaggSolution sol = solve_q_aggregate(y, fam, make_cfg(20.0));
    REQUIRE(sol.theta_hat[0] == Approx(0.5).margin(1e-8));
    REQUIRE(sol.theta_hat[1] == Approx(0.5).margin(1e-8));
  }
}

TEST_CASE("solver beats the simplex grid at step 1e-3") {
  RandomStream rng(2024);
  for (int rep = 0; rep < 3; ++rep) {
    EstimatorFamily fam = test_support::random_diagonal_family(10, 3, 1.0, rng);
    GaussianMeanModel model(2.0 * rng.gaussian_vector(10), 1.0);
    const Eigen::VectorXd y = sample_observation(model, rng);
    const QaggConfig cfg = make_cfg(20.0, 0.5);
    QaggProblem prob(y, fam, cfg);
    QaggSolution sol = solve_q_aggregate(prob);
    REQUIRE(sol.converged);

    double grid_min = kInf;
    test_support::for_each_simplex_grid_point(3, 1000, [&](const Eigen::VectorXd& th) {
      const double v = test_support::naive_q_objective(th, y, prob.estimates(), fam.penalties(),
                                                       fam.prior().weights().vec(), cfg.nu,
                                                       cfg.lambda);
      grid_min = std::min(grid_min, v);
    });
    REQUIRE(std::abs(sol.objective - grid_min) <= 2e-3);
    REQUIRE(sol.objective <= grid_min + 1e-12);  // grid can never beat the true min
  }
}

TEST_CASE("solver objective properties: convexity, vertex dominance, start dominance") {
  RandomStream rng(606);
  for (int rep = 0; rep < 10; ++rep) {
    const int M = 3 + static_cast<int>(rng.next_u64() % 4);
    EstimatorFamily fam = test_support::random_diagonal_family(8, M, 1.0, rng);
    const Eigen::VectorXd y = 2.0 * rng.gaussian_vector(8);
    const QaggConfig cfg = make_cfg(20.0, 0.5);
    QaggProblem prob(y, fam, cfg);

    // convexity along random chords
    for (int c = 0; c < 5; ++c) {
      Eigen::VectorXd wa(M), wb(M);
      for (int j = 0; j < M; ++j) {
        wa(j) = rng.uniform01() + 0.02;
        wb(j) = rng.uniform01() + 0.02;
      }
      SimplexWeights a = SimplexWeights::normalized(wa);
      SimplexWeights b = SimplexWeights::normalized(wb);
      for (double t : {0.25, 0.5, 0.75}) {
        SimplexWeights mid(t * a.vec() + (1.0 - t) * b.vec());
        REQUIRE(prob.objective(mid) <=
                t * prob.objective(a) + (1.0 - t) * prob.objective(b) + 1e-10);
      }
    }

    QaggSolution sol = solve_q_aggregate(prob);
    REQUIRE(sol.converged);
    double vertex_min = kInf;
    for (int j = 0; j < M; ++j) {
      Eigen::VectorXd e = Eigen::VectorXd::Zero(M);
      e(j) = 1.0;
      vertex_min = std::min(vertex_min, prob.objective(SimplexWeights(e)));
    }
    REQUIRE(sol.objective <= vertex_min + cfg.obj_tol);
    REQUIRE(sol.objective <= prob.objective(fam.prior().weights()) + 1e-12);
    REQUIRE(sol.objective == Approx(prob.objective(sol.theta_hat)).margin(1e-9));
  }
}

TEST_CASE("solver accepted-iterate objectives are strictly decreasing") {
  RandomStream rng(911);
  for (int rep = 0; rep < 10; ++rep) {
    const int M = 2 + static_cast<int>(rng.next_u64() % 6);
    EstimatorFamily fam = test_support::random_diagonal_family(9, M, 1.0, rng);
    const Eigen::VectorXd y = 2.0 * rng.gaussian_vector(9);
    QaggProblem prob(y, fam, make_cfg(20.0));
    std::vector<double> trace;
    QaggSolution sol = solve_q_aggregate(prob, &trace);
    REQUIRE(trace.size() >= 1);
    for (std::size_t i = 1; i < trace.size(); ++i) REQUIRE(trace[i] < trace[i - 1]);
    REQUIRE(trace.back() == sol.objective);
  }
}

TEST_CASE("solver is invariant to member permutation") {
  RandomStream rng(321);
  const int n = 6, M = 4;
  EstimatorFamily fam = test_support::random_diagonal_family(n, M, 1.0, rng);
  const Eigen::VectorXd y = rng.gaussian_vector(n);
  const QaggConfig cfg = make_cfg(20.0);
  QaggSolution base = solve_q_aggregate(y, fam, cfg);

  const std::vector<int> perm{2, 0, 3, 1};
  std::vector<AffineEstimator> shuffled;
  Eigen::VectorXd pi(M);
  for (int j = 0; j < M; ++j) {
    shuffled.push_back(fam.member(perm[static_cast<std::size_t>(j)]));
    pi(j) = fam.prior()[perm[static_cast<std::size_t>(j)]];
  }
  EstimatorFamily fam_p(std::move(shuffled), Prior{SimplexWeights(pi)});
  QaggSolution permuted = solve_q_aggregate(y, fam_p, cfg);
  for (int j = 0; j < M; ++j)
    REQUIRE(permuted.theta_hat[j] == Approx(base.theta_hat[perm[static_cast<std::size_t>(j)]])
                                         .margin(1e-8));
}

TEST_CASE("solver pins zero-prior atoms at zero") {
  RandomStream rng(9);
  EstimatorFamily full = test_support::random_diagonal_family(5, 3, 1.0, rng);
  Eigen::VectorXd pi(3);
  pi << 0.5, 0.5, 0.0;
  std::vector<AffineEstimator> members;
  for (int j = 0; j < 3; ++j) members.push_back(full.member(j));
  EstimatorFamily fam(std::move(members), Prior{SimplexWeights(pi)});
  QaggSolution sol = solve_q_aggregate(rng.gaussian_vector(5), fam, make_cfg(20.0));
  REQUIRE(sol.theta_hat[2] == 0.0);
  REQUIRE(sol.theta_hat[0] > 0.0);
  REQUIRE(sol.converged);
}

TEST_CASE("QaggConfig validation") {
  QaggConfig cfg;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);  // lambda unset
  cfg.lambda = 10.0;
  cfg.nu = 1.0;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg.nu = 0.5;
  REQUIRE_NOTHROW(cfg.validate());
}
