#include "levda/assimilate.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <thread>

#include "levda/errors.hpp"
#include "levda/random.hpp"

namespace levda {

using ad::TapeD;
using ad::VarD;

Eigen::MatrixXd LatentEnsemble::stacked() const {
  Eigen::MatrixXd z(members.front().size(), size());
  for (int k = 0; k < size(); ++k) z.col(k) = members[k].stacked();
  return z;
}

LatentEnsemble LatentEnsemble::from_stacked(double time, const Eigen::MatrixXd& z, Eigen::Index latent_dim) {
  LatentEnsemble e;
  e.time = time;
  for (Eigen::Index k = 0; k < z.cols(); ++k) e.members.push_back(AugmentedLatentState::split(z.col(k), latent_dim));
  return e;
}

void LatentEnsemble::validate() const {
  if (members.size() < 2) throw ValidationError("ensemble needs at least 2 members, got " + std::to_string(size()));
  for (const auto& m : members) {
    if (m.s.size() != members.front().s.size() || m.u.size() != members.front().u.size()) {
      throw ValidationError("ensemble members differ in dimension");
    }
    if (!m.s.allFinite() || !m.u.allFinite()) throw ValidationError("ensemble member is not finite");
  }
}

EnsemblePerturbations build_perturbations(const LatentEnsemble& ensemble, double multiplicative, double additive,
                                          std::uint64_t seed) {
  ensemble.validate();
  if (!(multiplicative >= 1.0)) throw ValidationError("multiplicative inflation must be >= 1");
  if (!(additive >= 0.0)) throw ValidationError("additive inflation must be >= 0");
  const Eigen::MatrixXd z = ensemble.stacked();
  const int k = ensemble.size();
  EnsemblePerturbations out;
  out.mean = z.rowwise().mean();
  Eigen::MatrixXd dz = multiplicative * (z.colwise() - out.mean);
  if (additive > 0.0) {
    Rng rng(derive_seed(seed, "additive-inflation"));
    std::normal_distribution<double> normal(0.0, additive);
    for (Eigen::Index j = 0; j < dz.cols(); ++j) {
      for (Eigen::Index i = 0; i < dz.rows(); ++i) dz(i, j) += normal(rng);
    }
  }
  out.perturbations.columns = dz / std::sqrt(static_cast<double>(k - 1));
  out.perturbations.inflation = {multiplicative, additive, seed};
  return out;
}

// --- LEVDA objective ----------------------------------------------------------

namespace {

VarD observation_misfit(const TapedSurrogate& tm, const TapedTrajectory& traj, const WindowSpec& window) {
  TapeD& tape = tm.tape();
  VarD total = tape.scalar_constant(0.0);
  for (const auto& b : window.batches) {
    if (b.values.size() == 0) continue;
    const VarD s = interpolate(traj, tm, b.time);
    const VarD pred = tm.decode(s, b.coords);
    const VarD r = ad::cwise_product(pred - tape.constant(b.values), tape.constant(b.noise_std.cwiseInverse()));
    total = total + 0.5 * ad::squared_norm(r);
  }
  return total;
}

}  // namespace

VarD levda_objective(const TapedSurrogate& model, const VarD& alpha, const Eigen::VectorXd& mean,
                     const PerturbationMatrix& perturbations, const WindowSpec& window) {
  TapeD& tape = model.tape();
  const SurrogateModel& m = model.model();
  if (perturbations.columns.rows() != mean.size() || mean.size() != m.latent_dim + m.param_dim) {
    throw ValidationError("levda objective: ensemble dimension " + std::to_string(mean.size()) +
                          " does not match surrogate (" + std::to_string(m.latent_dim) + " + " +
                          std::to_string(m.param_dim) + ")");
  }
  const VarD z = ad::matmul(tape.constant(perturbations.columns), alpha) + tape.constant(mean);
  const VarD s0 = ad::slice(z, 0, m.latent_dim);
  const VarD u0 = m.param_dim > 0 ? ad::slice(z, m.latent_dim, m.param_dim) : tape.constant(Eigen::VectorXd(0));
  const TapedTrajectory traj = integrate(model, s0, u0, window.horizon, window.anchor, false);
  return 0.5 * ad::squared_norm(alpha) + observation_misfit(model, traj, window);
}

double levda_objective(const SurrogateModel& model, const Eigen::VectorXd& alpha, const Eigen::VectorXd& mean,
                       const PerturbationMatrix& perturbations, const WindowSpec& window, Eigen::VectorXd* gradient) {
  TapeD tape;
  TapedSurrogate tm(tape, model, false);
  const VarD a = tape.leaf(alpha);
  const VarD j = levda_objective(tm, a, mean, perturbations, window);
  if (gradient != nullptr) *gradient = tape.backward(j).wrt(a);
  return j.value()(0, 0);
}

namespace {

// Wraps an objective so that surrogate blow-ups become +inf probes.
ObjectiveFn guarded(std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)> f) {
  return [f = std::move(f)](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    try {
      return f(x, g);
    } catch (const NumericalError&) {
      g.setConstant(std::numeric_limits<double>::quiet_NaN());
      return std::numeric_limits<double>::infinity();
    }
  };
}

template <typename Fn>
void parallel_for(int count, int threads, Fn&& fn) {
  threads = std::max(1, std::min(threads, count));
  if (threads == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (int i = t; i < count; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

double AnalysisResult::reconstruction_residual() const {
  double r = 0.0;
  for (int j = 0; j < analysis.size(); ++j) {
    const Eigen::VectorXd z = mean + perturbations.columns * coefficients.col(j);
    r = std::max(r, (analysis.members[j].stacked() - z).lpNorm<Eigen::Infinity>());
  }
  return r;
}

int default_thread_count() {
  if (const char* env = std::getenv("LEVDA_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return 1;
}

AnalysisResult levda_analyze(const LatentEnsemble& ensemble, const SurrogateModel& model, const WindowSpec& window,
                             const AnalysisOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  ensemble.validate();
  window.validate(model.time_step);
  if (ensemble.latent_dim() != model.latent_dim || ensemble.param_dim() != model.param_dim) {
    throw ValidationError("levda: ensemble dims (" + std::to_string(ensemble.latent_dim()) + ", " +
                          std::to_string(ensemble.param_dim()) + ") vs surrogate (" +
                          std::to_string(model.latent_dim) + ", " + std::to_string(model.param_dim) + ")");
  }
  const int k = ensemble.size();
  const double root = std::sqrt(static_cast<double>(k - 1));

  AnalysisResult res;
  res.time = window.anchor;
  res.background = ensemble;
  res.observation_count = window.observation_count();
  res.members.resize(k);

  if (res.observation_count == 0) {
    const EnsemblePerturbations ep = build_perturbations(ensemble, 1.0, 0.0, options.seed);
    res.mean = ep.mean;
    res.perturbations = ep.perturbations;
    res.coefficients = root * Eigen::MatrixXd::Identity(k, k);
    res.analysis = ensemble;
    res.skipped = true;
    res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return res;
  }

  const EnsemblePerturbations ep = build_perturbations(ensemble, options.multiplicative_inflation,
                                                       options.additive_inflation, options.seed);
  res.mean = ep.mean;
  res.perturbations = ep.perturbations;
  res.coefficients.resize(k, k);

  const ObjectiveFn objective = guarded([&](const Eigen::VectorXd& a, Eigen::VectorXd& g) {
    return levda_objective(model, a, ep.mean, ep.perturbations, window, &g);
  });

  const int threads = options.threads > 0 ? options.threads : default_thread_count();
  parallel_for(k, threads, [&](int j) {
    Eigen::VectorXd x0 = Eigen::VectorXd::Zero(k);
    x0[j] = root;
    const LbfgsResult r = minimize_lbfgs(objective, x0, options.lbfgs);
    MemberDiagnostics& d = res.members[j];
    d.warm_start_objective = r.trace.front();
    d.objective = r.value;
    d.trace = r.trace;
    d.iterations = r.iterations;
    d.evaluations = r.evaluations;
    d.converged = r.converged;
    d.line_search_failed = r.line_search_failed;
    res.coefficients.col(j) = r.x;
  });

  int failed = 0;
  for (const auto& d : res.members) {
    if (!std::isfinite(d.objective) || (d.line_search_failed && d.iterations == 0 && d.trace.size() == 1)) ++failed;
  }
  if (failed == k) throw NumericalError("levda: every member optimization failed at t=" + std::to_string(window.anchor));

  Eigen::MatrixXd za = (ep.perturbations.columns * res.coefficients).colwise() + ep.mean;
  res.analysis = LatentEnsemble::from_stacked(ensemble.time, za, model.latent_dim);
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

// --- latent 4DVar -------------------------------------------------------------

FourDVarResult latent_4dvar(const AugmentedLatentState& background, const Eigen::MatrixXd& covariance,
                            const SurrogateModel& model, const WindowSpec& window, const LbfgsOptions& options) {
  window.validate(model.time_step);
  const Eigen::Index n = background.size();
  if (background.s.size() != model.latent_dim || background.u.size() != model.param_dim) {
    throw ValidationError("latent 4dvar: background dims do not match surrogate");
  }
  if (covariance.rows() != n || covariance.cols() != n) throw ValidationError("latent 4dvar: B has wrong shape");
  Eigen::LLT<Eigen::MatrixXd> llt(covariance);
  if (llt.info() != Eigen::Success) throw ValidationError("latent 4dvar: B is not positive definite");
  const Eigen::MatrixXd l = llt.matrixL();
  const Eigen::VectorXd zb = background.stacked();

  // In the whitened control the prior term is 1/2 |v|^2 and z = zb + L v.
  PerturbationMatrix whitening;
  whitening.columns = l;
  const ObjectiveFn objective = guarded([&](const Eigen::VectorXd& v, Eigen::VectorXd& g) {
    return levda_objective(model, v, zb, whitening, window, &g);
  });
  FourDVarResult out;
  out.optimizer = minimize_lbfgs(objective, Eigen::VectorXd::Zero(n), options);
  if (!std::isfinite(out.optimizer.value)) throw NumericalError("latent 4dvar: objective is not finite");
  out.background_objective = out.optimizer.trace.front();
  out.objective = out.optimizer.value;
  out.state = AugmentedLatentState::split(zb + l * out.optimizer.x, model.latent_dim);
  return out;
}

FourDVarResult latent_4dvar(const AugmentedLatentState& background, const Eigen::VectorXd& variance_s,
                            const Eigen::VectorXd& variance_u, const SurrogateModel& model, const WindowSpec& window,
                            const LbfgsOptions& options) {
  if ((variance_s.array() <= 0.0).any() || (variance_u.array() <= 0.0).any()) {
    throw ValidationError("latent 4dvar: B diagonal must be strictly positive");
  }
  Eigen::VectorXd d(variance_s.size() + variance_u.size());
  d << variance_s, variance_u;
  return latent_4dvar(background, Eigen::MatrixXd(d.asDiagonal()), model, window, options);
}

Eigen::VectorXd ensemble_variance(const LatentEnsemble& ensemble, double ridge) {
  ensemble.validate();
  const Eigen::MatrixXd z = ensemble.stacked();
  const Eigen::MatrixXd dz = z.colwise() - z.rowwise().mean();
  return (dz.rowwise().squaredNorm() / static_cast<double>(ensemble.size() - 1)).array() + ridge;
}

// --- full-state 4DEnVar ---------------------------------------------------------

namespace {

std::vector<const ObservationBatch*> sorted_batches(const WindowSpec& window) {
  std::vector<const ObservationBatch*> out;
  for (const auto& b : window.batches) out.push_back(&b);
  std::stable_sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->time < b->time; });
  return out;
}

// H(M(x)) stacked over the window's batches.
Eigen::VectorXd observe_window(const Eigen::VectorXd& x0, const StateSpaceModel& model, double anchor,
                               const std::vector<const ObservationBatch*>& batches, Eigen::Index total) {
  Eigen::VectorXd out(total);
  Eigen::VectorXd x = x0;
  double t = anchor;
  Eigen::Index o = 0;
  for (const auto* b : batches) {
    x = model.advance(x, t, b->time);
    t = b->time;
    if (!x.allFinite()) throw NumericalError("4denvar: propagation produced non-finite values");
    out.segment(o, b->values.size()) = model.observe(x, *b);
    o += b->values.size();
  }
  return out;
}

Eigen::MatrixXd symmetric_inverse_sqrt(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  if (es.info() != Eigen::Success || !(es.eigenvalues().minCoeff() > 0.0)) {
    throw NumericalError("ensemble transform is singular");
  }
  return es.eigenvectors() * es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

FourDEnVarResult fourdenvar_solve(const FullStateEnsemble& background, const StateSpaceModel& model,
                                  const WindowSpec& window, const FourDEnVarOptions& options) {
  const int k = background.size();
  if (k < 2) throw ValidationError("4denvar: ensemble needs at least 2 members");
  if (background.members.rows() != model.dimension()) throw ValidationError("4denvar: state dimension mismatch");
  if (options.outer_loops < 1) throw ValidationError("4denvar: outer_loops must be >= 1");
  const auto batches = sorted_batches(window);
  Eigen::Index total = 0;
  Eigen::VectorXd y;
  Eigen::VectorXd rinv;
  for (const auto* b : batches) total += b->values.size();
  y.resize(total);
  rinv.resize(total);
  {
    Eigen::Index o = 0;
    for (const auto* b : batches) {
      y.segment(o, b->values.size()) = b->values;
      rinv.segment(o, b->values.size()) = b->noise_std.cwiseAbs2().cwiseInverse();
      o += b->values.size();
    }
  }

  const double root = std::sqrt(static_cast<double>(k - 1));
  const Eigen::VectorXd mean = background.mean();
  const Eigen::MatrixXd pz = (background.members.colwise() - mean) / root;

  FourDEnVarResult out;
  out.alpha = Eigen::VectorXd::Zero(k);
  Eigen::MatrixXd normal = Eigen::MatrixXd::Identity(k, k);
  if (total > 0) {
    for (int loop = 0; loop < options.outer_loops; ++loop) {
      const Eigen::VectorXd x = mean + pz * out.alpha;
      const Eigen::VectorXd hx = observe_window(x, model, window.anchor, batches, total);
      Eigen::MatrixXd hm(total, k);
      for (int j = 0; j < k; ++j) {
        hm.col(j) = observe_window(x + root * pz.col(j), model, window.anchor, batches, total);
      }
      const Eigen::MatrixXd py = (hm.colwise() - hm.rowwise().mean()) / root;
      const Eigen::VectorXd d = y - hx;
      const Eigen::MatrixXd wpy = rinv.asDiagonal() * py;
      normal = Eigen::MatrixXd::Identity(k, k) + py.transpose() * wpy;
      const Eigen::VectorXd rhs = wpy.transpose() * (d + py * out.alpha);
      Eigen::LLT<Eigen::MatrixXd> llt(normal);
      if (llt.info() != Eigen::Success) {
        normal.diagonal().array() += 1e-10;
        llt.compute(normal);
        out.ridge_added = true;
        if (llt.info() != Eigen::Success) throw NumericalError("4denvar: normal matrix is not positive definite");
      }
      out.alpha = llt.solve(rhs);
    }
  }
  out.analysis_mean = mean + pz * out.alpha;
  const Eigen::MatrixXd transform = symmetric_inverse_sqrt(normal);
  out.analysis.time = background.time;
  out.analysis.members = (root * (pz * transform)).colwise() + out.analysis_mean;
  return out;
}

// --- ETKF -----------------------------------------------------------------------

double gaspari_cohn(double distance, double c) {
  if (c <= 0.0) return 1.0;
  const double r = std::abs(distance) / c;
  if (r >= 2.0) return 0.0;
  if (r <= 1.0) {
    return -0.25 * std::pow(r, 5) + 0.5 * std::pow(r, 4) + 0.625 * std::pow(r, 3) - 5.0 / 3.0 * r * r + 1.0;
  }
  return std::pow(r, 5) / 12.0 - 0.5 * std::pow(r, 4) + 0.625 * std::pow(r, 3) + 5.0 / 3.0 * r * r - 5.0 * r + 4.0 -
         2.0 / 3.0 / r;
}

namespace {

// Mean weights and transform for observation-space perturbations yp (p x K),
// innovation d, and precision rinv.
void etkf_weights(const Eigen::MatrixXd& yp, const Eigen::VectorXd& d, const Eigen::VectorXd& rinv, int k,
                  Eigen::VectorXd& wmean, Eigen::MatrixXd& w) {
  const Eigen::MatrixXd c = yp.transpose() * rinv.asDiagonal();
  Eigen::MatrixXd a = c * yp;
  a.diagonal().array() += static_cast<double>(k - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  if (es.info() != Eigen::Success || !(es.eigenvalues().minCoeff() > 0.0) || !es.eigenvalues().allFinite()) {
    throw NumericalError("etkf: ensemble transform is singular");
  }
  const Eigen::MatrixXd& v = es.eigenvectors();
  const Eigen::VectorXd& lam = es.eigenvalues();
  wmean = v * lam.cwiseInverse().asDiagonal() * v.transpose() * (c * d);
  w = v * (static_cast<double>(k - 1) * lam.cwiseInverse()).cwiseSqrt().asDiagonal() * v.transpose();
}

}  // namespace

Eigen::MatrixXd etkf_update(const Eigen::MatrixXd& members, const StateSpaceModel& model,
                            const ObservationBatch& batch, const EtkfOptions& options) {
  const int k = static_cast<int>(members.cols());
  if (k < 2) throw ValidationError("etkf: ensemble needs at least 2 members");
  if (!(options.inflation >= 1.0)) throw ValidationError("etkf: inflation must be >= 1");
  batch.validate();
  if (batch.values.size() == 0) return members;

  const Eigen::VectorXd mean = members.rowwise().mean();
  const Eigen::MatrixXd a = options.inflation * (members.colwise() - mean);
  Eigen::MatrixXd hy(batch.values.size(), k);
  for (int j = 0; j < k; ++j) hy.col(j) = model.observe(mean + a.col(j), batch);
  const Eigen::VectorXd ymean = hy.rowwise().mean();
  const Eigen::MatrixXd yp = hy.colwise() - ymean;
  const Eigen::VectorXd d = batch.values - ymean;
  const Eigen::VectorXd rinv = batch.noise_std.cwiseAbs2().cwiseInverse();

  Eigen::VectorXd wmean;
  Eigen::MatrixXd w;
  if (options.localization_radius <= 0.0) {
    etkf_weights(yp, d, rinv, k, wmean, w);
    return (a * (w.colwise() + wmean)).colwise() + mean;
  }

  Eigen::MatrixXd out(members.rows(), k);
  const int channels = batch.channels;
  for (Eigen::Index i = 0; i < members.rows(); ++i) {
    const auto loc = model.location(i);
    Eigen::VectorXd local = rinv;
    if (loc) {
      for (Eigen::Index p = 0; p < batch.points(); ++p) {
        const double taper = gaspari_cohn((batch.coords.col(p) - *loc).norm(), options.localization_radius);
        for (int c = 0; c < channels; ++c) local[p * channels + c] *= taper;
      }
    }
    etkf_weights(yp, d, local, k, wmean, w);
    out.row(i) = (a.row(i) * (w.colwise() + wmean)).array() + mean[i];
  }
  return out;
}

}  // namespace levda
