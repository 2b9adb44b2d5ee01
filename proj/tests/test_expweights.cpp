#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "affagg/expweights.hpp"
#include "test_support.hpp"

using Catch::Approx;
using namespace affagg;

TEST_CASE("exp_weights: equal penalized losses give equal weights") {
  Eigen::VectorXd losses(2), pen(2);
  losses << 10.0, 12.0;
  pen << 3.0, 1.0;  // penalized losses tie at 13
  SimplexWeights w = exp_weights_from_losses(losses, pen, Prior::uniform(2), 5.0);
  REQUIRE(w[0] == 0.5);
  REQUIRE(w[1] == 0.5);
}

TEST_CASE("exp_weights: huge temperature washes out the losses") {
  RandomStream rng(12);
  EstimatorFamily fam = test_support::random_diagonal_family(8, 4, 1.0, rng);
  const Eigen::VectorXd y = rng.gaussian_vector(8);
  SimplexWeights w = exp_weights(y, fam, 1e12);
  for (Eigen::Index j = 0; j < 4; ++j)
    REQUIRE(w[j] == Approx(fam.prior()[j]).margin(1e-9));
}

TEST_CASE("exp_weights survive losses of order 1e3 without underflow") {
  Eigen::VectorXd losses(3), pen = Eigen::VectorXd::Zero(3);
  losses << 1000.0, 1100.0, 1500.0;
  SimplexWeights w = exp_weights_from_losses(losses, pen, Prior::uniform(3), 64.0);
  REQUIRE(w.vec().sum() == Approx(1.0).margin(1e-12));
  REQUIRE(w[0] > w[1]);
  REQUIRE(w[1] > w[2]);
  REQUIRE(w[2] > 0.0);
}

TEST_CASE("exp_weights equal the variational argmin on a 1e-3 grid") {
  RandomStream rng(2121);
  EstimatorFamily fam = test_support::random_diagonal_family(6, 3, 1.0, rng);
  const Eigen::VectorXd y = 2.0 * rng.gaussian_vector(6);
  const double lambda = 64.0;
  const Eigen::MatrixXd estimates = fam.apply_all(y);
  const Eigen::VectorXd losses = squared_losses(y, estimates);
  SimplexWeights closed = exp_weights_from_losses(losses, fam.penalties(), fam.prior(), lambda);

  double best = kInf;
  Eigen::VectorXd best_theta;
  test_support::for_each_simplex_grid_point(3, 1000, [&](const Eigen::VectorXd& th) {
    double val = th.dot(losses + fam.penalties());
    for (Eigen::Index j = 0; j < 3; ++j)
      if (th(j) > 0.0) val += lambda * th(j) * std::log(th(j) / fam.prior()[j]);
    if (val < best) {
      best = val;
      best_theta = th;
    }
  });
  for (Eigen::Index j = 0; j < 3; ++j)
    REQUIRE(closed[j] == Approx(best_theta(j)).margin(2e-3));

  const double closed_val =
      ew_variational_objective(closed, losses, fam.penalties(), fam.prior(), lambda);
  REQUIRE(closed_val <= best + 1e-9);
}

TEST_CASE("ew_aggregate trivial cases and recombination") {
  RandomStream rng(88);
  {
    std::vector<AffineEstimator> members;
    members.push_back(diagonal_filter(Eigen::VectorXd::Constant(5, 0.4), 1.0));
    EstimatorFamily fam(std::move(members), Prior::uniform(1));
    const Eigen::VectorXd y = rng.gaussian_vector(5);
    REQUIRE((ew_aggregate(y, fam, 10.0) - fam.member(0).apply(y)).cwiseAbs().maxCoeff() <= 1e-14);
  }
  {
    Eigen::VectorXd v(5);
    v << 1, 2, 3, 4, 5;
    std::vector<AffineEstimator> members;
    for (int j = 0; j < 3; ++j)
      members.emplace_back(PsdMatrix(Eigen::MatrixXd::Zero(5, 5)), v, 1.0);
    Eigen::VectorXd pi(3);
    pi << 0.2, 0.5, 0.3;
    EstimatorFamily fam(std::move(members), Prior{SimplexWeights(pi)});
    const Eigen::VectorXd y = rng.gaussian_vector(5);
    REQUIRE((ew_aggregate(y, fam, 3.0) - v).cwiseAbs().maxCoeff() <= 1e-12);
  }
  {
    EstimatorFamily fam = test_support::random_diagonal_family(7, 4, 1.0, rng);
    const Eigen::VectorXd y = rng.gaussian_vector(7);
    const Eigen::MatrixXd estimates = fam.apply_all(y);
    SimplexWeights w = exp_weights(y, fam, 25.0);
    Eigen::VectorXd manual = Eigen::VectorXd::Zero(7);
    for (Eigen::Index j = 0; j < 4; ++j) manual += w[j] * estimates.col(j);
    REQUIRE((ew_aggregate(y, fam, 25.0) - manual).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("exp_weights: top-atom weight grows as the temperature drops") {
  RandomStream rng(19);
  Eigen::VectorXd losses(4), pen = Eigen::VectorXd::Zero(4);
  losses << 5.0, 7.0, 9.0, 6.0;
  Eigen::Index best_atom = 0;
  double prev = 0.0;
  for (double lambda : {512.0, 256.0, 128.0, 64.0, 32.0, 16.0, 8.0, 4.0, 2.0, 1.0, 0.5, 0.25}) {
    SimplexWeights w = exp_weights_from_losses(losses, pen, Prior::uniform(4), lambda);
    REQUIRE(w[best_atom] >= prev - 1e-15);
    prev = w[best_atom];
  }
  REQUIRE(prev > 0.9);  // lambda -> 0 concentrates on the penalized-loss argmin
}

TEST_CASE("exp_weights: adding a constant to all penalized losses changes nothing") {
  RandomStream rng(44);
  Eigen::VectorXd losses(5), pen(5);
  for (int j = 0; j < 5; ++j) {
    losses(j) = 50.0 * rng.uniform01();
    pen(j) = 4.0 * rng.uniform01();
  }
  Eigen::VectorXd w(5);
  for (int j = 0; j < 5; ++j) w(j) = rng.uniform01() + 0.1;
  Prior prior{SimplexWeights::normalized(w)};
  SimplexWeights a = exp_weights_from_losses(losses, pen, prior, 20.0);
  SimplexWeights b =
      exp_weights_from_losses((losses.array() + 137.5).matrix(), pen, prior, 20.0);
  for (Eigen::Index j = 0; j < 5; ++j) REQUIRE(a[j] == Approx(b[j]).margin(1e-12));
}

TEST_CASE("exp_weights error paths") {
  Eigen::VectorXd losses(2), pen = Eigen::VectorXd::Zero(2);
  losses << 1.0, std::nan("");
  REQUIRE_THROWS_AS(exp_weights_from_losses(losses, pen, Prior::uniform(2), 10.0), InputError);
  losses << 1.0, 2.0;
  REQUIRE_THROWS_AS(exp_weights_from_losses(losses, pen, Prior::uniform(2), 0.0), ConfigError);
  REQUIRE_THROWS_AS(exp_weights_from_losses(losses, pen, Prior::uniform(3), 1.0), DimensionError);
}

TEST_CASE("exp_weights zero-prior atoms stay at zero") {
  Eigen::VectorXd losses(3), pen = Eigen::VectorXd::Zero(3);
  losses << 100.0, 1.0, 0.0;  // best loss sits on the null atom
  Eigen::VectorXd pi(3);
  pi << 0.5, 0.5, 0.0;
  SimplexWeights w = exp_weights_from_losses(losses, pen, Prior{SimplexWeights(pi)}, 10.0);
  REQUIRE(w[2] == 0.0);
  REQUIRE(w[0] + w[1] == Approx(1.0).margin(1e-12));
}
