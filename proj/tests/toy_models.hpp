#pragma once

// Small models and independent oracles shared by the unit tests and the
// acceptance binary.

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <vector>

#include "levda/assimilate.hpp"
#include "levda/state_space.hpp"
#include "levda/surrogate.hpp"

namespace toy {

using levda::Rng;

inline Eigen::MatrixXd gaussian(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

/// Random tanh surrogate on the unit square with a sinusoidal decoder.
inline levda::SurrogateModel random_surrogate(Rng& rng, int latent_dim, int param_dim, int channels = 1) {
  levda::SurrogateModel m;
  m.latent_dim = latent_dim;
  m.param_dim = param_dim;
  m.channels = channels;
  m.embedding_frequencies = 1;
  m.field = levda::Mlp::glorot({latent_dim + param_dim, 8, latent_dim}, levda::Activation::tanh, rng);
  m.decoder = levda::Mlp::glorot({latent_dim + m.coordinate_features(), 8, channels}, levda::Activation::tanh, rng);
  for (auto* net : {&m.field, &m.decoder}) {
    for (auto& l : net->layers) l.bias = gaussian(rng, l.bias.size(), 1, 0.2);
  }
  m.time_step = 0.1;
  m.log_dt = std::log(0.1 * uniform(rng, 0.8, 1.2));
  m.learn_dt = true;
  m.param_offset = Eigen::VectorXd::Zero(param_dim);
  m.param_scale = Eigen::VectorXd::Ones(param_dim);
  m.field_offset = 0.1;
  m.field_scale = 1.5;
  m.validate();
  return m;
}

inline levda::LatentEnsemble random_ensemble(Rng& rng, int k, int latent_dim, int param_dim, double spread = 0.5) {
  levda::LatentEnsemble e;
  const Eigen::VectorXd center = gaussian(rng, latent_dim + param_dim, 1, 0.3);
  for (int j = 0; j < k; ++j) {
    e.members.push_back(levda::AugmentedLatentState::split(
        center + gaussian(rng, latent_dim + param_dim, 1, spread), latent_dim));
  }
  return e;
}

/// Observation batch at `time` with random points on the unit square.
inline levda::ObservationBatch random_batch(Rng& rng, double time, int points, int channels = 1) {
  levda::ObservationBatch b;
  b.time = time;
  b.channels = channels;
  b.coords.resize(2, points);
  for (Eigen::Index i = 0; i < b.coords.size(); ++i) b.coords.data()[i] = uniform(rng, 0.0, 1.0);
  b.values = gaussian(rng, points * channels, 1, 0.5);
  b.noise_std = Eigen::VectorXd::Constant(points * channels, uniform(rng, 0.3, 0.8));
  return b;
}

// ---------------------------------------------------------------------------
// Linear-Gaussian toy: identity decoder over a 1-D grid of n cells, Euler
// dynamics s' = A s + C u with static u.

struct LinearToy {
  int n = 0;
  int p = 0;
  double dt = 0.1;
  Eigen::MatrixXd a;
  Eigen::MatrixXd c;
  levda::Grid grid;
  levda::SurrogateModel model;

  /// z -> z after one grid step.
  Eigen::MatrixXd transition() const { return interpolation(1.0); }

  /// z -> (s + frac dt F(s, u), u).
  Eigen::MatrixXd interpolation(double frac) const {
    Eigen::MatrixXd t = Eigen::MatrixXd::Identity(n + p, n + p);
    t.topLeftCorner(n, n) += frac * dt * a;
    if (p > 0) t.topRightCorner(n, p) = frac * dt * c;
    return t;
  }

  /// Linear map from the window-initial z to the observed cells at `time`.
  Eigen::MatrixXd observation_map(const levda::ObservationBatch& b, double anchor) const {
    const double f = (b.time - anchor) / dt;
    int k = static_cast<int>(std::floor(f + 1e-9));
    double frac = f - k;
    if (frac < 1e-9) frac = 0.0;
    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(n + p, n + p);
    for (int i = 0; i < k; ++i) m = transition() * m;
    m = interpolation(frac) * m;
    Eigen::MatrixXd g(b.points(), n + p);
    for (Eigen::Index i = 0; i < b.points(); ++i) g.row(i) = m.row(grid.nearest_cell(b.coords.col(i)));
    return g;
  }

  levda::ObservationBatch batch(Rng& rng, double time, int points) const {
    levda::ObservationBatch b;
    b.time = time;
    b.coords.resize(1, points);
    std::uniform_int_distribution<int> cell(0, n - 1);
    for (int i = 0; i < points; ++i) b.coords(0, i) = cell(rng) + 0.5;
    b.values = gaussian(rng, points, 1, 1.0);
    b.noise_std = Eigen::VectorXd::Constant(points, uniform(rng, 0.2, 1.0));
    return b;
  }
};

inline LinearToy linear_toy(Rng& rng, int n, int p) {
  LinearToy t;
  t.n = n;
  t.p = p;
  t.a = gaussian(rng, n, n, 0.5);
  t.c = gaussian(rng, n, p, 0.5);
  t.grid.domain.dim = 1;
  t.grid.domain.hi = {static_cast<double>(n), 1.0};
  t.grid.nx = n;
  t.grid.ny = 1;
  t.model = levda::make_linear_surrogate(t.a, t.c, Eigen::VectorXd::Zero(n), t.dt, t.grid);
  return t;
}

struct StackedObservations {
  Eigen::MatrixXd g;
  Eigen::VectorXd y;
  Eigen::VectorXd rinv;
};

inline StackedObservations stack(const LinearToy& toy, const levda::WindowSpec& w) {
  StackedObservations s;
  Eigen::Index total = 0;
  for (const auto& b : w.batches) total += b.values.size();
  s.g.resize(total, toy.n + toy.p);
  s.y.resize(total);
  s.rinv.resize(total);
  Eigen::Index o = 0;
  for (const auto& b : w.batches) {
    s.g.middleRows(o, b.values.size()) = toy.observation_map(b, w.anchor);
    s.y.segment(o, b.values.size()) = b.values;
    s.rinv.segment(o, b.values.size()) = b.noise_std.cwiseAbs2().cwiseInverse();
    o += b.values.size();
  }
  return s;
}

/// Gaussian posterior mean for prior N(mean, cov) and y = G z + N(0, R).
inline Eigen::VectorXd conjugate_posterior_mean(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
                                                const StackedObservations& o) {
  const Eigen::MatrixXd r = o.rinv.cwiseInverse().asDiagonal();
  const Eigen::MatrixXd s = o.g * cov * o.g.transpose() + r;
  return mean + cov * o.g.transpose() * s.ldlt().solve(o.y - o.g * mean);
}

/// Minimizer of 1/2|alpha|^2 + 1/2|G(mean + P alpha) - y|^2_{R^-1}.
inline Eigen::VectorXd quadratic_minimizer(const Eigen::VectorXd& mean, const Eigen::MatrixXd& p,
                                           const StackedObservations& o) {
  const Eigen::MatrixXd gp = o.g * p;
  Eigen::MatrixXd h = gp.transpose() * o.rinv.asDiagonal() * gp;
  h.diagonal().array() += 1.0;
  return h.ldlt().solve(gp.transpose() * o.rinv.asDiagonal() * (o.y - o.g * mean));
}

/// Kalman filter followed by a Rauch-Tung-Striebel pass with no process
/// noise; returns the smoothed mean at step 0. obs[k] holds the rows of H and
/// data at step k (possibly empty).
struct StepObservation {
  Eigen::MatrixXd h;
  Eigen::VectorXd y;
  Eigen::VectorXd r;  // variances
};

inline Eigen::VectorXd rts_smoothed_initial_mean(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
                                                 const Eigen::MatrixXd& m, const std::vector<StepObservation>& obs) {
  const std::size_t steps = obs.size();
  std::vector<Eigen::VectorXd> xf(steps), xp(steps);
  std::vector<Eigen::MatrixXd> pf(steps), pp(steps);
  Eigen::VectorXd x = mean;
  Eigen::MatrixXd p = cov;
  for (std::size_t k = 0; k < steps; ++k) {
    if (k > 0) {
      x = m * x;
      p = m * p * m.transpose();
    }
    xp[k] = x;
    pp[k] = p;
    if (obs[k].y.size() > 0) {
      const Eigen::MatrixXd& h = obs[k].h;
      const Eigen::MatrixXd s = h * p * h.transpose() + Eigen::MatrixXd(obs[k].r.asDiagonal());
      const Eigen::MatrixXd gain = p * h.transpose() * s.inverse();
      x = x + gain * (obs[k].y - h * x);
      p = (Eigen::MatrixXd::Identity(p.rows(), p.cols()) - gain * h) * p;
      p = 0.5 * (p + p.transpose()).eval();
    }
    xf[k] = x;
    pf[k] = p;
  }
  Eigen::VectorXd xs = xf[steps - 1];
  for (std::size_t k = steps - 1; k-- > 0;) {
    const Eigen::MatrixXd j = pf[k] * m.transpose() * pp[k + 1].inverse();
    xs = xf[k] + j * (xs - xp[k + 1]);
  }
  return xs;
}

}  // namespace toy
