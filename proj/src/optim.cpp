#include "levda/optim.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

namespace levda {
namespace {

struct Probe {
  double step = 0.0;
  double value = 0.0;
  double slope = 0.0;  // directional derivative
  Eigen::VectorXd x;
  Eigen::VectorXd grad;
};

// Minimizer of the cubic through (a, fa, da) and (b, fb, db), clamped into
// the safeguarded interior of [a, b].
double cubic_step(double a, double fa, double da, double b, double fb, double db) {
  const double lo = std::min(a, b);
  const double hi = std::max(a, b);
  const double d1 = da + db - 3.0 * (fa - fb) / (a - b);
  const double disc = d1 * d1 - da * db;
  double t = 0.5 * (a + b);
  if (disc >= 0.0) {
    const double d2 = std::copysign(std::sqrt(disc), b - a);
    const double denom = db - da + 2.0 * d2;
    if (denom != 0.0) t = b - (b - a) * (db + d2 - d1) / denom;
  }
  const double margin = 0.1 * (hi - lo);
  if (!std::isfinite(t) || t < lo + margin || t > hi - margin) t = 0.5 * (a + b);
  return t;
}

class LineSearch {
 public:
  LineSearch(const ObjectiveFn& f, const Eigen::VectorXd& x, const Eigen::VectorXd& dir,
             double f0, double slope0, const LbfgsOptions& opt, int& evaluations)
      : f_(f), x_(x), dir_(dir), f0_(f0), slope0_(slope0), opt_(opt), evals_(evaluations) {}

  // Returns true with `out` satisfying the strong Wolfe conditions. On
  // failure `best` holds the lowest-valued probe (if any improved on f0).
  bool run(double initial_step, Probe& out, Probe& best) {
    Probe prev{0.0, f0_, slope0_, x_, {}};
    double step = initial_step;
    for (int i = 0; budget_left(); ++i) {
      Probe cur = evaluate(step);
      track(cur, best);
      if (approximately_flat(cur)) {
        out = std::move(cur);
        return true;
      }
      if (!std::isfinite(cur.value) || cur.value > f0_ + opt_.c1 * step * slope0_ ||
          (i > 0 && cur.value >= prev.value)) {
        return zoom(prev, cur, out, best);
      }
      if (std::abs(cur.slope) <= -opt_.c2 * slope0_) {
        out = std::move(cur);
        return true;
      }
      if (cur.slope >= 0.0) return zoom(cur, prev, out, best);
      prev = std::move(cur);
      step *= 2.0;
    }
    return false;
  }

 private:
  // Near a minimizer the sufficient-decrease test drowns in round-off; accept
  // a step that satisfies the curvature condition without a measurable increase.
  bool approximately_flat(const Probe& p) const {
    return std::isfinite(p.value) && p.grad.allFinite() && p.value <= f0_ + 1e-12 * std::abs(f0_) &&
           std::abs(p.slope) <= -opt_.c2 * slope0_;
  }

  bool budget_left() const { return used_ < opt_.max_line_search_evaluations; }

  Probe evaluate(double step) {
    Probe p;
    p.step = step;
    p.x = x_ + step * dir_;
    p.grad.resize(x_.size());
    p.value = f_(p.x, p.grad);
    p.slope = p.grad.dot(dir_);
    ++used_;
    ++evals_;
    return p;
  }

  void track(const Probe& p, Probe& best) const {
    if (std::isfinite(p.value) && p.grad.allFinite() && p.value < best.value) best = p;
  }

  bool zoom(Probe lo, Probe hi, Probe& out, Probe& best) {
    while (budget_left()) {
      double step;
      if (std::isfinite(hi.value) && std::isfinite(hi.slope)) {
        step = cubic_step(lo.step, lo.value, lo.slope, hi.step, hi.value, hi.slope);
      } else {
        step = 0.5 * (lo.step + hi.step);
      }
      if (std::abs(hi.step - lo.step) < 1e-16 * std::max(1.0, std::abs(lo.step))) return false;
      Probe cur = evaluate(step);
      track(cur, best);
      if (approximately_flat(cur)) {
        out = std::move(cur);
        return true;
      }
      if (!std::isfinite(cur.value) || cur.value > f0_ + opt_.c1 * step * slope0_ ||
          cur.value >= lo.value) {
        hi = std::move(cur);
        continue;
      }
      if (std::abs(cur.slope) <= -opt_.c2 * slope0_) {
        out = std::move(cur);
        return true;
      }
      if (cur.slope * (hi.step - lo.step) >= 0.0) hi = lo;
      lo = std::move(cur);
    }
    return false;
  }

  const ObjectiveFn& f_;
  const Eigen::VectorXd& x_;
  const Eigen::VectorXd& dir_;
  double f0_;
  double slope0_;
  const LbfgsOptions& opt_;
  int& evals_;
  int used_ = 0;
};

}  // namespace

LbfgsResult minimize_lbfgs(const ObjectiveFn& objective, Eigen::VectorXd x0,
                           const LbfgsOptions& options) {
  LbfgsResult res;
  res.x = std::move(x0);
  res.gradient.resize(res.x.size());
  res.value = objective(res.x, res.gradient);
  res.evaluations = 1;
  res.trace.push_back(res.value);
  if (!std::isfinite(res.value) || !res.gradient.allFinite()) {
    res.line_search_failed = true;
    return res;
  }

  double best_value = res.value;
  Eigen::VectorXd best_x = res.x;
  Eigen::VectorXd best_grad = res.gradient;

  std::deque<Eigen::VectorXd> s_hist;
  std::deque<Eigen::VectorXd> y_hist;
  std::deque<double> rho_hist;

  for (res.iterations = 0; res.iterations < options.max_iterations; ++res.iterations) {
    if (res.gradient.norm() <= options.gradient_tolerance) {
      res.converged = true;
      break;
    }

    // Two-loop recursion.
    Eigen::VectorXd q = res.gradient;
    std::vector<double> a(s_hist.size());
    for (std::size_t i = s_hist.size(); i-- > 0;) {
      a[i] = rho_hist[i] * s_hist[i].dot(q);
      q -= a[i] * y_hist[i];
    }
    double gamma = 1.0;
    if (!s_hist.empty()) gamma = s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    Eigen::VectorXd dir = gamma * q;
    for (std::size_t i = 0; i < s_hist.size(); ++i) {
      const double b = rho_hist[i] * y_hist[i].dot(dir);
      dir += (a[i] - b) * s_hist[i];
    }
    dir = -dir;

    double slope = res.gradient.dot(dir);
    if (!(slope < 0.0)) {
      // Curvature history is inconsistent; restart from steepest descent.
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      dir = -res.gradient;
      slope = -res.gradient.squaredNorm();
    }

    const double initial_step = s_hist.empty() ? std::min(1.0, 1.0 / res.gradient.norm()) : 1.0;
    Probe accepted;
    Probe best;
    best.value = res.value;
    LineSearch ls(objective, res.x, dir, res.value, slope, options, res.evaluations);
    if (!ls.run(initial_step, accepted, best)) {
      if (best.value < res.value) {
        res.x = std::move(best.x);
        res.value = best.value;
        res.gradient = std::move(best.grad);
        res.trace.push_back(res.value);
      }
      res.line_search_failed = true;
      break;
    }

    Eigen::VectorXd s = accepted.x - res.x;
    Eigen::VectorXd y = accepted.grad - res.gradient;
    const double previous = res.value;
    res.x = std::move(accepted.x);
    res.value = accepted.value;
    res.gradient = std::move(accepted.grad);
    res.trace.push_back(res.value);
    if (res.value < best_value) {
      best_value = res.value;
      best_x = res.x;
      best_grad = res.gradient;
    }

    const double sy = s.dot(y);
    if (sy > std::numeric_limits<double>::epsilon() * y.squaredNorm()) {
      if (static_cast<int>(s_hist.size()) == options.memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
    }

    if (options.relative_decrease_tolerance > 0.0 &&
        previous - res.value <= options.relative_decrease_tolerance * std::max(1.0, std::abs(previous))) {
      res.converged = true;
      ++res.iterations;
      break;
    }
  }
  if (!res.converged && res.gradient.norm() <= options.gradient_tolerance) res.converged = true;
  if (best_value < res.value) {
    res.x = std::move(best_x);
    res.value = best_value;
    res.gradient = std::move(best_grad);
    res.trace.push_back(res.value);
  }
  return res;
}

Adam::Adam(Eigen::Index size, AdamOptions options)
    : opt_(options), m_(Eigen::VectorXd::Zero(size)), v_(Eigen::VectorXd::Zero(size)) {}

void Adam::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
  ++t_;
  m_ = opt_.beta1 * m_ + (1.0 - opt_.beta1) * grad;
  v_ = opt_.beta2 * v_ + (1.0 - opt_.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  params.array() -= opt_.learning_rate * (m_.array() / c1) / ((v_.array() / c2).sqrt() + opt_.epsilon);
}

}  // namespace levda
