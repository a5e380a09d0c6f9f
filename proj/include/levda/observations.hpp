#pragma once

#include <Eigen/Dense>

#include <vector>

namespace levda {

/// One realization of (H_t, R_t, y_t): point values at `coords` taken at
/// time `time`. Values are coordinate-major: value(p * channels + c).
struct ObservationBatch {
  double time = 0.0;
  Eigen::MatrixXd coords;     // spatial dim x points
  Eigen::VectorXd values;     // points * channels
  Eigen::VectorXd noise_std;  // diagonal of R^{1/2}, same length as values
  int channels = 1;

  Eigen::Index points() const { return coords.cols(); }
  void validate() const;
};

using ObservationSeries = std::vector<ObservationBatch>;

}  // namespace levda
