#pragma once

#include <Eigen/Dense>

#include <optional>

#include "levda/geometry.hpp"
#include "levda/observations.hpp"

namespace levda {

/// Full-state dynamical system seen by the classical baselines (ETKF,
/// full-state 4DEnVar). States are flat vectors; the observation operator
/// and the diagnostic field are part of the model.
class StateSpaceModel {
 public:
  virtual ~StateSpaceModel() = default;

  virtual Eigen::Index dimension() const = 0;
  /// Propagates a state from time `from` to time `to` (to >= from).
  virtual Eigen::VectorXd advance(const Eigen::VectorXd& state, double from, double to) const = 0;
  /// H_t(x): predicted values for every coordinate/channel in the batch.
  virtual Eigen::VectorXd observe(const Eigen::VectorXd& state, const ObservationBatch& batch) const = 0;
  /// Cell-centred diagnostic field used for verification.
  virtual Eigen::VectorXd field(const Eigen::VectorXd& state) const = 0;
  /// Spatial location of a state component (for localization).
  virtual std::optional<Eigen::VectorXd> location(Eigen::Index component) const {
    (void)component;
    return std::nullopt;
  }
};

/// x_{k+1} = M x_k on a fixed step. Each state component is one cell of
/// `grid`; an observation at xi reads the component of the nearest cell.
class LinearStateSpaceModel : public StateSpaceModel {
 public:
  LinearStateSpaceModel(Eigen::MatrixXd transition, double step, Grid grid);

  Eigen::Index dimension() const override { return transition_.rows(); }
  Eigen::VectorXd advance(const Eigen::VectorXd& state, double from, double to) const override;
  Eigen::VectorXd observe(const Eigen::VectorXd& state, const ObservationBatch& batch) const override;
  Eigen::VectorXd field(const Eigen::VectorXd& state) const override { return state; }
  std::optional<Eigen::VectorXd> location(Eigen::Index component) const override {
    return grid_.center(static_cast<int>(component));
  }

  const Eigen::MatrixXd& transition() const { return transition_; }
  double step() const { return step_; }
  const Grid& grid() const { return grid_; }
  int steps_between(double from, double to) const;

 private:
  Eigen::MatrixXd transition_;
  double step_;
  Grid grid_;
};

}  // namespace levda
