#pragma once

#include <Eigen/Dense>

#include <functional>
#include <vector>

namespace levda {

/// Objective callback: returns f(x) and writes the gradient into `grad`
/// (already sized to x).
using ObjectiveFn = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd& grad)>;

struct LbfgsOptions {
  int memory = 10;
  int max_iterations = 200;
  double gradient_tolerance = 1e-6;
  // Stop when |f_k - f_{k+1}| <= tol * max(1, |f_k|). Zero disables.
  double relative_decrease_tolerance = 0.0;
  double c1 = 1e-4;
  double c2 = 0.9;
  int max_line_search_evaluations = 40;
};

struct LbfgsResult {
  Eigen::VectorXd x;
  double value = 0.0;
  Eigen::VectorXd gradient;
  std::vector<double> trace;  // objective at x0 and after each accepted step
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  bool line_search_failed = false;
};

/// Limited-memory BFGS with a strong-Wolfe line search. On line-search
/// failure the best iterate seen so far is returned with the flag set.
LbfgsResult minimize_lbfgs(const ObjectiveFn& objective, Eigen::VectorXd x0,
                           const LbfgsOptions& options = {});

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment state for a flat parameter vector.
class Adam {
 public:
  Adam(Eigen::Index size, AdamOptions options);
  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);
  long steps_taken() const { return t_; }

 private:
  AdamOptions opt_;
  Eigen::VectorXd m_;
  Eigen::VectorXd v_;
  long t_ = 0;
};

}  // namespace levda
