#include <doctest.h>

#include <cmath>
#include <random>

#include "levda/optim.hpp"

using namespace levda;

TEST_CASE("L-BFGS solves a random SPD quadratic to the closed-form minimizer") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 2 + trial % 8;
    Eigen::MatrixXd m(d, d);
    for (int i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    const Eigen::MatrixXd a = m * m.transpose() + Eigen::MatrixXd::Identity(d, d);
    Eigen::VectorXd b(d);
    for (int i = 0; i < d; ++i) b[i] = n(rng);
    auto f = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
      g = a * x - b;
      return 0.5 * x.dot(a * x) - b.dot(x);
    };
    LbfgsOptions o;
    o.gradient_tolerance = 1e-10;
    const LbfgsResult r = minimize_lbfgs(f, Eigen::VectorXd::Zero(d), o);
    CHECK(r.converged);
    CHECK((r.x - a.ldlt().solve(b)).norm() < 1e-8);
  }
}

TEST_CASE("L-BFGS minimizes Rosenbrock with a monotone trace") {
  auto f = [](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    const double a = 1 - x[0];
    const double b = x[1] - x[0] * x[0];
    g.resize(2);
    g[0] = -2 * a - 400 * x[0] * b;
    g[1] = 200 * b;
    return a * a + 100 * b * b;
  };
  LbfgsOptions o;
  o.max_iterations = 500;
  o.gradient_tolerance = 1e-9;
  const LbfgsResult r = minimize_lbfgs(f, Eigen::Vector2d(-1.2, 1.0), o);
  CHECK(r.converged);
  CHECK(std::abs(r.x[0] - 1.0) < 1e-6);
  CHECK(std::abs(r.x[1] - 1.0) < 1e-6);
  for (std::size_t i = 1; i < r.trace.size(); ++i) CHECK(r.trace[i] <= r.trace[i - 1] + 1e-12 * std::abs(r.trace[i - 1]));
}

TEST_CASE("L-BFGS stops immediately at a stationary point") {
  auto f = [](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    g = x;
    return 0.5 * x.squaredNorm();
  };
  const LbfgsResult r = minimize_lbfgs(f, Eigen::VectorXd::Zero(3));
  CHECK(r.converged);
  CHECK(r.iterations == 0);
  CHECK(r.evaluations == 1);
}

TEST_CASE("L-BFGS returns the best iterate when the objective is unbounded in a region") {
  // Non-finite beyond |x| > 2: the search must back off and never return a non-finite value.
  auto f = [](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    if (x.norm() > 2.0) {
      g.setConstant(std::nan(""));
      return std::numeric_limits<double>::infinity();
    }
    g = -Eigen::VectorXd::Ones(x.size());
    return -x.sum();
  };
  LbfgsOptions o;
  o.max_iterations = 50;
  const LbfgsResult r = minimize_lbfgs(f, Eigen::VectorXd::Zero(2), o);
  CHECK(std::isfinite(r.value));
  CHECK(r.value <= 0.0);
  CHECK(r.x.norm() <= 2.0);
}

TEST_CASE("L-BFGS with a non-finite start reports failure") {
  auto f = [](const Eigen::VectorXd&, Eigen::VectorXd& g) {
    g.setZero();
    return std::nan("");
  };
  const LbfgsResult r = minimize_lbfgs(f, Eigen::VectorXd::Zero(2));
  CHECK(r.line_search_failed);
  CHECK_FALSE(r.converged);
}

TEST_CASE("Adam reaches the minimum of a separable quadratic") {
  Eigen::VectorXd x = Eigen::VectorXd::Constant(4, 3.0);
  const Eigen::VectorXd target = Eigen::Vector4d(1.0, -2.0, 0.5, 0.0);
  Adam adam(4, AdamOptions{0.05});
  for (int i = 0; i < 2000; ++i) adam.step(x, 2.0 * (x - target));
  CHECK((x - target).norm() < 1e-3);
  CHECK(adam.steps_taken() == 2000);
}

TEST_CASE("first Adam step has magnitude equal to the learning rate") {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(3);
  Adam adam(3, AdamOptions{0.1});
  adam.step(x, Eigen::Vector3d(5.0, -0.2, 1e3));
  for (int i = 0; i < 3; ++i) CHECK(std::abs(x[i]) == doctest::Approx(0.1).epsilon(1e-6));
}
