#pragma once

#include <Eigen/Dense>

#include <array>
#include <stdexcept>

namespace levda {

/// Axis-aligned rectangle (or interval when dim == 1).
struct Domain {
  int dim = 2;
  std::array<double, 2> lo{0.0, 0.0};
  std::array<double, 2> hi{1.0, 1.0};

  bool contains(const Eigen::Ref<const Eigen::VectorXd>& xi, double slack = 1e-12) const;

  /// Affine map of each axis onto [-1, 1].
  Eigen::VectorXd normalize(const Eigen::Ref<const Eigen::VectorXd>& xi) const;
};

/// Cell-centred rectangular grid; cells are stored x-fastest.
struct Grid {
  Domain domain;
  int nx = 1;
  int ny = 1;

  int cells() const { return nx * ny; }
  double dx() const { return (domain.hi[0] - domain.lo[0]) / nx; }
  double dy() const { return domain.dim == 2 ? (domain.hi[1] - domain.lo[1]) / ny : 1.0; }
  int index(int ix, int iy) const { return iy * nx + ix; }

  Eigen::VectorXd center(int cell) const;
  /// dim x cells matrix of cell-centre coordinates.
  Eigen::MatrixXd centers() const;
  int nearest_cell(const Eigen::Ref<const Eigen::VectorXd>& xi) const;

  /// Bilinear (linear in 1-D) interpolation of a cell field at xi. Points
  /// within half a cell of the boundary take the nearest centre's value
  /// along that axis. Throws std::out_of_range when xi lies outside the domain.
  double sample(const Eigen::Ref<const Eigen::VectorXd>& field, const Eigen::Ref<const Eigen::VectorXd>& xi,
                int channels = 1, int channel = 0) const;

  /// Cell indices and weights used by sample(); returns how many are set.
  int stencil(const Eigen::Ref<const Eigen::VectorXd>& xi, std::array<int, 4>& cells,
              std::array<double, 4>& weights) const;
};

}  // namespace levda
