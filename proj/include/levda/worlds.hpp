#pragma once

// Synthetic truth generators and the observation process for twin
// experiments.

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "levda/geometry.hpp"
#include "levda/observations.hpp"
#include "levda/state_space.hpp"

namespace levda {

struct PhysicalTrajectory {
  Grid grid;
  int channels = 1;
  double dt = 0.0;       // simulator step
  int save_every = 1;    // simulator steps between stored frames
  std::vector<double> times;
  std::vector<Eigen::VectorXd> frames;  // cells * channels, cell-major
  Eigen::VectorXd true_param;
  double process_noise_state = 0.0;  // Q_t (scalar diagonal)
  double process_noise_param = 0.0;  // Q_t^u

  double start_time() const { return times.front(); }
  double end_time() const { return times.back(); }
  /// Root-mean-square over every frame, cell and channel.
  double rms() const;
  /// Frame at t, linear in time between stored frames.
  Eigen::VectorXd frame_at(double t) const;
  /// Index of the stored frame at exactly t (within 1e-9 of the frame spacing), or -1.
  int frame_index(double t) const;
};

// ---------------------------------------------------------------------------
// Linearized single-layer shallow water on an Arakawa C-grid with reflective
// walls. State layout: eta (n*n) | u on x-faces ((n+1)*n) | v on y-faces
// (n*(n+1)).

struct ShallowWaterConfig {
  int n = 32;
  int steps = 400;
  double dt = 0.005;
  double gravity = 1.0;
  double depth = 0.0625;
  double amplitude = 1.0;
  double width = 0.08;
  Eigen::Vector2d center{0.5, 0.5};
  int save_every = 1;
  Domain domain{};

  double wave_speed() const;
  double cfl() const;
};

class ShallowWaterModel : public StateSpaceModel {
 public:
  explicit ShallowWaterModel(ShallowWaterConfig config);

  const ShallowWaterConfig& config() const { return cfg_; }
  const Grid& grid() const { return grid_; }

  Eigen::VectorXd initial_state(const Eigen::Vector2d& center) const;
  void step(Eigen::VectorXd& state) const;

  Eigen::Index dimension() const override;
  Eigen::VectorXd advance(const Eigen::VectorXd& state, double from, double to) const override;
  Eigen::VectorXd observe(const Eigen::VectorXd& state, const ObservationBatch& batch) const override;
  Eigen::VectorXd field(const Eigen::VectorXd& state) const override;
  std::optional<Eigen::VectorXd> location(Eigen::Index component) const override;

 private:
  ShallowWaterConfig cfg_;
  Grid grid_;
};

/// Throws ValidationError on a CFL violation (message carries the number).
PhysicalTrajectory simulate_shallow_water(const ShallowWaterConfig& config);

// ---------------------------------------------------------------------------

struct Lorenz96Config {
  int dim = 40;
  double forcing = 8.0;
  int steps = 1000;
  double dt = 0.01;
  int save_every = 1;
  Eigen::VectorXd initial;  // empty: forcing everywhere, +0.01 on component 0
};

class Lorenz96Model : public StateSpaceModel {
 public:
  explicit Lorenz96Model(Lorenz96Config config);

  const Grid& grid() const { return grid_; }
  Eigen::VectorXd tendency(const Eigen::VectorXd& x) const;
  void step(Eigen::VectorXd& x) const;

  Eigen::Index dimension() const override { return cfg_.dim; }
  Eigen::VectorXd advance(const Eigen::VectorXd& state, double from, double to) const override;
  Eigen::VectorXd observe(const Eigen::VectorXd& state, const ObservationBatch& batch) const override;
  Eigen::VectorXd field(const Eigen::VectorXd& state) const override { return state; }
  std::optional<Eigen::VectorXd> location(Eigen::Index component) const override;

 private:
  Lorenz96Config cfg_;
  Grid grid_;
};

/// RK4 integration; throws NumericalError (index = step) on blow-up.
PhysicalTrajectory simulate_lorenz96(const Lorenz96Config& config);

// ---------------------------------------------------------------------------

enum class ObservationMode { fixed_grid, moving_locations, irregular_times, joint_irregular };

std::string to_string(ObservationMode mode);
ObservationMode observation_mode_from_string(const std::string& name);

struct ObservationPlan {
  ObservationMode mode = ObservationMode::fixed_grid;
  int stride = 4;             // grid cells between observed cells, per axis
  int interval_steps = 20;    // simulator steps between observation times
  int time_count = 0;         // irregular modes: 0 = same count as the regular schedule
  int point_count = 0;        // moving modes: 0 = same count as the strided grid
  std::uint64_t seed = 0;
};

/// Regular observation times of a plan over the trajectory span.
std::vector<double> regular_observation_times(const PhysicalTrajectory& truth, const ObservationPlan& plan);

/// dim x points coordinates of the strided observation grid.
Eigen::MatrixXd strided_coordinates(const Grid& grid, int stride);

/// Samples the truth per the plan and adds N(0, s^2) noise with
/// s = noise_to_signal * truth.rms().
ObservationSeries observe(const PhysicalTrajectory& truth, const ObservationPlan& plan,
                          double noise_to_signal);

}  // namespace levda
