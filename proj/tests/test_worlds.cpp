#include <doctest.h>

#include <cmath>
#include <random>

#include "levda/errors.hpp"
#include "levda/worlds.hpp"

using namespace levda;

namespace {

// Dense forward-backward operator assembled from the staggered-grid stencils:
// faces get -g dt grad(eta), then eta gets -H dt div(u_new). Wall faces are fixed at zero.
Eigen::MatrixXd dense_shallow_water_step(int n, double g, double depth, double dt) {
  const double h = 1.0 / n;
  const int ne = n * n, nu = (n + 1) * n, nv = n * (n + 1);
  const int dim = ne + nu + nv;
  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(nu + nv, ne);
  for (int j = 0; j < n; ++j) {
    for (int i = 1; i < n; ++i) {
      grad(j * (n + 1) + i, j * n + i) = 1.0 / h;
      grad(j * (n + 1) + i, j * n + i - 1) = -1.0 / h;
    }
  }
  for (int j = 1; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      grad(nu + j * n + i, j * n + i) = 1.0 / h;
      grad(nu + j * n + i, (j - 1) * n + i) = -1.0 / h;
    }
  }
  Eigen::MatrixXd div = Eigen::MatrixXd::Zero(ne, nu + nv);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      div(j * n + i, j * (n + 1) + i + 1) += 1.0 / h;
      div(j * n + i, j * (n + 1) + i) -= 1.0 / h;
      div(j * n + i, nu + (j + 1) * n + i) += 1.0 / h;
      div(j * n + i, nu + j * n + i) -= 1.0 / h;
    }
  }
  Eigen::MatrixXd momentum = Eigen::MatrixXd::Identity(dim, dim);
  momentum.block(ne, 0, nu + nv, ne) = -g * dt * grad;
  Eigen::MatrixXd continuity = Eigen::MatrixXd::Identity(dim, dim);
  continuity.block(0, ne, ne, nu + nv) = -depth * dt * div;
  return continuity * momentum;
}

ShallowWaterConfig small_config() {
  ShallowWaterConfig c;
  c.n = 6;
  c.steps = 10;
  c.dt = 0.02;
  c.depth = 0.5;
  c.width = 0.2;
  return c;
}

}  // namespace

TEST_CASE("shallow water step equals the dense staggered-grid operator") {
  const ShallowWaterConfig c = small_config();
  ShallowWaterModel m(c);
  const Eigen::MatrixXd op = dense_shallow_water_step(c.n, c.gravity, c.depth, c.dt);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::VectorXd x(m.dimension());
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = nd(rng);
    // Wall faces carry no flow.
    const int n = c.n, ne = n * n, nu = (n + 1) * n;
    for (int j = 0; j < n; ++j) {
      x[ne + j * (n + 1)] = 0.0;
      x[ne + j * (n + 1) + n] = 0.0;
      x[ne + nu + j] = 0.0;
      x[ne + nu + n * n + j] = 0.0;
    }
    Eigen::VectorXd y = x;
    m.step(y);
    CHECK((y - op * x).lpNorm<Eigen::Infinity>() < 1e-12);
  }
}

TEST_CASE("shallow water conserves mass to round-off") {
  ShallowWaterConfig c;
  c.n = 32;
  c.steps = 400;
  c.center = Eigen::Vector2d(0.31, 0.62);
  const PhysicalTrajectory t = simulate_shallow_water(c);
  const double m0 = t.frames.front().sum();
  for (const auto& f : t.frames) CHECK(std::abs(f.sum() - m0) < 1e-10 * std::max(1.0, std::abs(m0)));
  CHECK(t.frames.size() == 401);
  CHECK(t.true_param.isApprox(Eigen::Vector2d(0.31, 0.62)));
}

TEST_CASE("a centred bump stays mirror symmetric") {
  ShallowWaterConfig c;
  c.n = 16;
  c.steps = 100;
  c.dt = 0.01;
  const PhysicalTrajectory t = simulate_shallow_water(c);
  const Eigen::VectorXd& f = t.frames.back();
  for (int j = 0; j < c.n; ++j) {
    for (int i = 0; i < c.n; ++i) {
      CHECK(std::abs(f[j * c.n + i] - f[j * c.n + (c.n - 1 - i)]) < 1e-12);
      CHECK(std::abs(f[j * c.n + i] - f[i * c.n + j]) < 1e-12);
    }
  }
}

TEST_CASE("CFL violations are rejected with the number in the message") {
  ShallowWaterConfig c;
  c.dt = 1.0;
  try {
    simulate_shallow_water(c);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("CFL") != std::string::npos);
  }
}

TEST_CASE("shallow water advance matches repeated steps and rejects going backwards") {
  ShallowWaterModel m(small_config());
  Eigen::VectorXd x = m.initial_state(Eigen::Vector2d(0.4, 0.5));
  Eigen::VectorXd y = x;
  for (int k = 0; k < 7; ++k) m.step(y);
  CHECK((m.advance(x, 0.1, 0.1 + 7 * 0.02) - y).norm() < 1e-14);
  CHECK_THROWS_AS(m.advance(x, 0.2, 0.1), ValidationError);
}

TEST_CASE("Lorenz-96 RK4 converges at fourth order") {
  auto run = [](double dt) {
    Lorenz96Config c;
    c.dim = 12;
    c.dt = dt;
    c.steps = static_cast<int>(std::lround(0.4 / dt));
    return simulate_lorenz96(c).frames.back();
  };
  const Eigen::VectorXd ref = run(0.0005);
  const double e1 = (run(0.008) - ref).norm();
  const double e2 = (run(0.004) - ref).norm();
  CHECK(e1 / e2 > 12.0);
  CHECK(e1 / e2 < 20.0);
}

TEST_CASE("Lorenz-96 tendency matches the defining formula") {
  Lorenz96Config c;
  c.dim = 5;
  c.forcing = 8.0;
  Lorenz96Model m(c);
  const Eigen::VectorXd x = (Eigen::VectorXd(5) << 1, 2, 3, 4, 5).finished();
  const Eigen::VectorXd d = m.tendency(x);
  // dx_i = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F
  CHECK(d[0] == doctest::Approx((2 - 4) * 5 - 1 + 8));
  CHECK(d[2] == doctest::Approx((4 - 1) * 2 - 3 + 8));
  CHECK_THROWS_AS(Lorenz96Model(Lorenz96Config{3}), ValidationError);
}

TEST_CASE("Lorenz-96 blow-up reports the step") {
  Lorenz96Config c;
  c.dim = 8;
  c.dt = 0.05;
  c.steps = 20000;
  c.forcing = 1e6;
  try {
    simulate_lorenz96(c);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(e.index() >= 0);
  }
}

TEST_CASE("fixed-grid observations: counts, exact sampling, noise level") {
  ShallowWaterConfig c;
  c.n = 32;
  c.steps = 400;
  const PhysicalTrajectory t = simulate_shallow_water(c);
  ObservationPlan p;
  p.stride = 4;
  p.interval_steps = 20;
  p.seed = 9;
  const ObservationSeries clean = observe(t, p, 0.0);
  REQUIRE(clean.size() == 21);
  CHECK(clean.front().points() == 64);
  for (const auto& b : clean) {
    const Eigen::VectorXd f = t.frame_at(b.time);
    for (Eigen::Index q = 0; q < b.points(); ++q) {
      CHECK(b.values[q] == f[t.grid.nearest_cell(b.coords.col(q))]);
    }
  }
  const ObservationSeries noisy = observe(t, p, 0.1);
  const double sigma = 0.1 * t.rms();
  double ss = 0.0;
  long n = 0;
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    CHECK(noisy[i].noise_std[0] == doctest::Approx(sigma).epsilon(1e-12));
    ss += (noisy[i].values - clean[i].values).squaredNorm();
    n += noisy[i].values.size();
  }
  // 1344 draws: the sample std is within ~6% of sigma with overwhelming probability.
  CHECK(std::sqrt(ss / n) == doctest::Approx(sigma).epsilon(0.06));
}

TEST_CASE("irregular observation modes") {
  ShallowWaterConfig c;
  c.n = 16;
  c.steps = 100;
  c.dt = 0.01;
  const PhysicalTrajectory t = simulate_shallow_water(c);
  ObservationPlan p;
  p.stride = 4;
  p.interval_steps = 10;
  p.seed = 4;

  p.mode = ObservationMode::moving_locations;
  const auto moving = observe(t, p, 0.1);
  CHECK(moving.size() == 11);
  CHECK(moving[0].points() == 16);
  CHECK_FALSE(moving[0].coords.isApprox(moving[1].coords));

  p.mode = ObservationMode::irregular_times;
  p.time_count = 7;
  const auto irregular = observe(t, p, 0.1);
  REQUIRE(irregular.size() == 7);
  for (std::size_t i = 1; i < irregular.size(); ++i) CHECK(irregular[i].time >= irregular[i - 1].time);
  for (const auto& b : irregular) {
    CHECK(b.time >= t.start_time());
    CHECK(b.time <= t.end_time());
  }

  p.mode = ObservationMode::joint_irregular;
  p.point_count = 5;
  const auto joint = observe(t, p, 0.1);
  CHECK(joint.size() == 7);
  CHECK(joint[0].points() == 5);

  const auto again = observe(t, p, 0.1);
  for (std::size_t i = 0; i < joint.size(); ++i) CHECK(joint[i].values == again[i].values);
}

TEST_CASE("observation plan validation") {
  ShallowWaterConfig c;
  c.n = 8;
  c.steps = 10;
  c.dt = 0.01;
  const PhysicalTrajectory t = simulate_shallow_water(c);
  ObservationPlan p;
  p.stride = 9;
  CHECK_THROWS_AS(observe(t, p, 0.1), ValidationError);
  p.stride = 2;
  CHECK_THROWS_AS(observe(t, p, -0.1), ValidationError);
  CHECK(to_string(observation_mode_from_string("joint-irregular")) == "joint-irregular");
  CHECK_THROWS_AS(observation_mode_from_string("sometimes"), ValidationError);
}

TEST_CASE("noiseless observations still carry a positive noise std") {
  ShallowWaterConfig c;
  c.n = 8;
  c.steps = 10;
  c.dt = 0.01;
  const PhysicalTrajectory t = simulate_shallow_water(c);
  ObservationPlan p;
  p.stride = 2;
  p.interval_steps = 5;
  for (const auto& b : observe(t, p, 0.0)) {
    CHECK_NOTHROW(b.validate());
    CHECK(b.noise_std.minCoeff() > 0.0);
  }
}

TEST_CASE("grid sampling is bilinear inside and clamped near walls") {
  Grid g;
  g.nx = 4;
  g.ny = 4;
  Eigen::VectorXd f(16);
  for (int j = 0; j < 4; ++j) {
    for (int i = 0; i < 4; ++i) f[g.index(i, j)] = 2.0 * g.center(g.index(i, j))[0] + 3.0 * g.center(g.index(i, j))[1];
  }
  const Eigen::Vector2d inside(0.4, 0.55);
  CHECK(g.sample(f, inside) == doctest::Approx(2 * 0.4 + 3 * 0.55));
  CHECK(g.sample(f, Eigen::Vector2d(0.0, 0.5)) == doctest::Approx(2 * 0.125 + 3 * 0.5));
  CHECK_THROWS(g.sample(f, Eigen::Vector2d(1.5, 0.5)));
}

TEST_CASE("frame lookup and time interpolation") {
  ShallowWaterConfig c;
  c.n = 8;
  c.steps = 10;
  c.dt = 0.01;
  const PhysicalTrajectory t = simulate_shallow_water(c);
  CHECK(t.frame_index(0.05) == 5);
  CHECK(t.frame_index(0.055) == -1);
  CHECK(t.frame_at(0.055).isApprox(0.5 * (t.frames[5] + t.frames[6])));
  CHECK_THROWS_AS(t.frame_at(0.2), ValidationError);
}
