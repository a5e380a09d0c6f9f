#include "levda/worlds.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "levda/errors.hpp"
#include "levda/random.hpp"

namespace levda {

// --- geometry ---------------------------------------------------------------

bool Domain::contains(const Eigen::Ref<const Eigen::VectorXd>& xi, double slack) const {
  if (xi.size() != dim) return false;
  for (int a = 0; a < dim; ++a) {
    if (!(xi[a] >= lo[a] - slack && xi[a] <= hi[a] + slack)) return false;
  }
  return true;
}

Eigen::VectorXd Domain::normalize(const Eigen::Ref<const Eigen::VectorXd>& xi) const {
  Eigen::VectorXd out(dim);
  for (int a = 0; a < dim; ++a) out[a] = 2.0 * (xi[a] - lo[a]) / (hi[a] - lo[a]) - 1.0;
  return out;
}

Eigen::VectorXd Grid::center(int cell) const {
  Eigen::VectorXd c(domain.dim);
  const int ix = cell % nx;
  c[0] = domain.lo[0] + (ix + 0.5) * dx();
  if (domain.dim == 2) c[1] = domain.lo[1] + (cell / nx + 0.5) * dy();
  return c;
}

Eigen::MatrixXd Grid::centers() const {
  Eigen::MatrixXd c(domain.dim, cells());
  for (int i = 0; i < cells(); ++i) c.col(i) = center(i);
  return c;
}

int Grid::nearest_cell(const Eigen::Ref<const Eigen::VectorXd>& xi) const {
  if (!domain.contains(xi)) throw ValidationError("coordinate outside domain");
  auto axis = [&](double x, double lo, double h, int n) {
    return std::clamp(static_cast<int>(std::floor((x - lo) / h)), 0, n - 1);
  };
  const int ix = axis(xi[0], domain.lo[0], dx(), nx);
  const int iy = domain.dim == 2 ? axis(xi[1], domain.lo[1], dy(), ny) : 0;
  return index(ix, iy);
}

int Grid::stencil(const Eigen::Ref<const Eigen::VectorXd>& xi, std::array<int, 4>& cells,
                  std::array<double, 4>& weights) const {
  if (!domain.contains(xi)) {
    std::ostringstream os;
    os << "coordinate (" << xi.transpose() << ") outside domain";
    throw ValidationError(os.str());
  }
  auto axis = [](double x, double lo, double h, int n, int& i0, double& w) {
    double f = std::clamp((x - lo) / h - 0.5, 0.0, static_cast<double>(n - 1));
    if (std::abs(f - std::round(f)) < 1e-9) f = std::round(f);
    i0 = std::min(static_cast<int>(std::floor(f)), std::max(n - 2, 0));
    w = n > 1 ? f - i0 : 0.0;
  };
  int ix, iy = 0;
  double wx, wy = 0.0;
  axis(xi[0], domain.lo[0], dx(), nx, ix, wx);
  if (domain.dim == 2) axis(xi[1], domain.lo[1], dy(), ny, iy, wy);
  const int ix1 = std::min(ix + 1, nx - 1);
  const int iy1 = std::min(iy + 1, ny - 1);
  if (domain.dim == 1) {
    cells = {ix, ix1, 0, 0};
    weights = {1.0 - wx, wx, 0.0, 0.0};
    return 2;
  }
  cells = {index(ix, iy), index(ix1, iy), index(ix, iy1), index(ix1, iy1)};
  weights = {(1.0 - wx) * (1.0 - wy), wx * (1.0 - wy), (1.0 - wx) * wy, wx * wy};
  return 4;
}

double Grid::sample(const Eigen::Ref<const Eigen::VectorXd>& field, const Eigen::Ref<const Eigen::VectorXd>& xi,
                    int channels, int channel) const {
  std::array<int, 4> c;
  std::array<double, 4> w;
  const int n = stencil(xi, c, w);
  double v = 0.0;
  for (int i = 0; i < n; ++i) {
    if (w[i] != 0.0) v += w[i] * field[static_cast<Eigen::Index>(c[i]) * channels + channel];
  }
  return v;
}

void ObservationBatch::validate() const {
  if (channels < 1) throw ValidationError("observation batch: channels must be >= 1");
  if (values.size() != coords.cols() * channels) {
    throw ValidationError("observation batch: " + std::to_string(values.size()) + " values for " +
                          std::to_string(coords.cols()) + " coordinates x " + std::to_string(channels) +
                          " channels");
  }
  if (noise_std.size() != values.size()) throw ValidationError("observation batch: noise_std length mismatch");
  if ((noise_std.array() <= 0.0).any()) throw ValidationError("observation batch: noise std must be > 0");
}

// --- linear model -----------------------------------------------------------

LinearStateSpaceModel::LinearStateSpaceModel(Eigen::MatrixXd transition, double step, Grid grid)
    : transition_(std::move(transition)), step_(step), grid_(std::move(grid)) {
  if (transition_.rows() != transition_.cols()) throw ValidationError("transition matrix must be square");
  if (grid_.cells() != transition_.rows()) throw ValidationError("grid cells must equal state dimension");
}

int LinearStateSpaceModel::steps_between(double from, double to) const {
  const double n = (to - from) / step_;
  const long r = std::lround(n);
  if (r < 0 || std::abs(n - r) > 1e-9) {
    throw ValidationError("linear model: interval is not a whole number of steps");
  }
  return static_cast<int>(r);
}

Eigen::VectorXd LinearStateSpaceModel::advance(const Eigen::VectorXd& state, double from, double to) const {
  Eigen::VectorXd x = state;
  for (int k = steps_between(from, to); k > 0; --k) x = transition_ * x;
  return x;
}

Eigen::VectorXd LinearStateSpaceModel::observe(const Eigen::VectorXd& state, const ObservationBatch& batch) const {
  Eigen::VectorXd out(batch.points());
  for (Eigen::Index p = 0; p < batch.points(); ++p) out[p] = state[grid_.nearest_cell(batch.coords.col(p))];
  return out;
}

// --- trajectories -----------------------------------------------------------

double PhysicalTrajectory::rms() const {
  double ss = 0.0;
  Eigen::Index n = 0;
  for (const auto& f : frames) {
    ss += f.squaredNorm();
    n += f.size();
  }
  return n > 0 ? std::sqrt(ss / static_cast<double>(n)) : 0.0;
}

int PhysicalTrajectory::frame_index(double t) const {
  if (times.empty()) return -1;
  const double spacing = times.size() > 1 ? times[1] - times[0] : 1.0;
  const double f = (t - times.front()) / spacing;
  const long r = std::lround(f);
  if (r < 0 || r >= static_cast<long>(times.size())) return -1;
  return std::abs(f - r) <= 1e-9 ? static_cast<int>(r) : -1;
}

Eigen::VectorXd PhysicalTrajectory::frame_at(double t) const {
  if (times.empty()) throw ValidationError("empty trajectory");
  const int exact = frame_index(t);
  if (exact >= 0) return frames[exact];
  if (t < times.front() || t > times.back()) {
    throw ValidationError("time " + std::to_string(t) + " outside trajectory span");
  }
  const auto it = std::upper_bound(times.begin(), times.end(), t);
  const auto k = static_cast<std::size_t>(it - times.begin()) - 1;
  const double w = (t - times[k]) / (times[k + 1] - times[k]);
  return (1.0 - w) * frames[k] + w * frames[k + 1];
}

// --- shallow water ----------------------------------------------------------

double ShallowWaterConfig::wave_speed() const { return std::sqrt(gravity * depth); }

double ShallowWaterConfig::cfl() const {
  const double h = (domain.hi[0] - domain.lo[0]) / n;
  return dt * wave_speed() * std::sqrt(2.0) / h;
}

namespace {

void validate_shallow_water(const ShallowWaterConfig& c) {
  if (c.n < 2) throw ValidationError("shallow water: n must be >= 2");
  if (c.dt <= 0.0 || c.steps < 0 || c.save_every < 1) {
    throw ValidationError("shallow water: dt > 0, steps >= 0, save_every >= 1 required");
  }
  if (c.gravity <= 0.0 || c.depth <= 0.0) throw ValidationError("shallow water: gravity and depth must be > 0");
  const double cfl = c.cfl();
  if (!(cfl < 1.0)) {
    std::ostringstream os;
    os << "shallow water: CFL number " << cfl << " >= 1";
    throw ValidationError(os.str());
  }
}

}  // namespace

ShallowWaterModel::ShallowWaterModel(ShallowWaterConfig config) : cfg_(std::move(config)) {
  validate_shallow_water(cfg_);
  cfg_.domain.dim = 2;
  grid_.domain = cfg_.domain;
  grid_.nx = cfg_.n;
  grid_.ny = cfg_.n;
}

Eigen::Index ShallowWaterModel::dimension() const {
  const Eigen::Index n = cfg_.n;
  return n * n + 2 * (n + 1) * n;
}

Eigen::VectorXd ShallowWaterModel::initial_state(const Eigen::Vector2d& center) const {
  Eigen::VectorXd s = Eigen::VectorXd::Zero(dimension());
  const double inv = 1.0 / (2.0 * cfg_.width * cfg_.width);
  for (int cell = 0; cell < grid_.cells(); ++cell) {
    const Eigen::VectorXd c = grid_.center(cell);
    const double ddx = c[0] - center[0];
    const double ddy = c[1] - center[1];
    s[cell] = cfg_.amplitude * std::exp(-(ddx * ddx + ddy * ddy) * inv);
  }
  return s;
}

void ShallowWaterModel::step(Eigen::VectorXd& state) const {
  const int n = cfg_.n;
  const double h = grid_.dx();
  const double gdt = cfg_.gravity * cfg_.dt / h;
  const double hdt = cfg_.depth * cfg_.dt / h;
  double* eta = state.data();
  double* u = eta + n * n;            // u(i, j) at x = i*h, i in [0, n], row j
  double* v = u + (n + 1) * n;        // v(i, j) at y = j*h, j in [0, n], column i
  auto U = [&](int i, int j) -> double& { return u[j * (n + 1) + i]; };
  auto V = [&](int i, int j) -> double& { return v[j * n + i]; };
  auto E = [&](int i, int j) -> double { return eta[j * n + i]; };

  // Momentum first (forward-backward); wall faces stay at zero.
  for (int j = 0; j < n; ++j) {
    for (int i = 1; i < n; ++i) U(i, j) -= gdt * (E(i, j) - E(i - 1, j));
  }
  for (int j = 1; j < n; ++j) {
    for (int i = 0; i < n; ++i) V(i, j) -= gdt * (E(i, j) - E(i, j - 1));
  }
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      eta[j * n + i] -= hdt * ((U(i + 1, j) - U(i, j)) + (V(i, j + 1) - V(i, j)));
    }
  }
}

Eigen::VectorXd ShallowWaterModel::advance(const Eigen::VectorXd& state, double from, double to) const {
  const long steps = std::lround(to / cfg_.dt) - std::lround(from / cfg_.dt);
  if (steps < 0) throw ValidationError("shallow water: cannot advance backwards");
  Eigen::VectorXd s = state;
  for (long k = 0; k < steps; ++k) step(s);
  return s;
}

Eigen::VectorXd ShallowWaterModel::field(const Eigen::VectorXd& state) const {
  return state.head(grid_.cells());
}

Eigen::VectorXd ShallowWaterModel::observe(const Eigen::VectorXd& state, const ObservationBatch& batch) const {
  const Eigen::VectorXd eta = state.head(grid_.cells());
  Eigen::VectorXd out(batch.points());
  for (Eigen::Index p = 0; p < batch.points(); ++p) out[p] = grid_.sample(eta, batch.coords.col(p));
  return out;
}

std::optional<Eigen::VectorXd> ShallowWaterModel::location(Eigen::Index component) const {
  const int n = cfg_.n;
  const double h = grid_.dx();
  const double x0 = cfg_.domain.lo[0];
  const double y0 = cfg_.domain.lo[1];
  Eigen::VectorXd p(2);
  if (component < n * n) return grid_.center(static_cast<int>(component));
  component -= n * n;
  if (component < (n + 1) * n) {
    p << x0 + (component % (n + 1)) * h, y0 + (component / (n + 1) + 0.5) * h;
    return p;
  }
  component -= (n + 1) * n;
  p << x0 + (component % n + 0.5) * h, y0 + (component / n) * h;
  return p;
}

PhysicalTrajectory simulate_shallow_water(const ShallowWaterConfig& config) {
  ShallowWaterModel model(config);
  PhysicalTrajectory traj;
  traj.grid = model.grid();
  traj.channels = 1;
  traj.dt = config.dt;
  traj.save_every = config.save_every;
  traj.true_param = config.center;
  Eigen::VectorXd s = model.initial_state(config.center);
  traj.times.push_back(0.0);
  traj.frames.push_back(model.field(s));
  for (int k = 1; k <= config.steps; ++k) {
    model.step(s);
    if (k % config.save_every == 0) {
      traj.times.push_back(k * config.dt);
      traj.frames.push_back(model.field(s));
    }
  }
  return traj;
}

// --- Lorenz-96 --------------------------------------------------------------

Lorenz96Model::Lorenz96Model(Lorenz96Config config) : cfg_(std::move(config)) {
  if (cfg_.dim < 4) throw ValidationError("lorenz96: dim must be >= 4");
  if (!(cfg_.dt > 0.0 && cfg_.dt <= 0.05)) throw ValidationError("lorenz96: dt must be in (0, 0.05]");
  if (cfg_.save_every < 1 || cfg_.steps < 0) throw ValidationError("lorenz96: steps >= 0, save_every >= 1");
  grid_.domain.dim = 1;
  grid_.domain.lo = {0.0, 0.0};
  grid_.domain.hi = {static_cast<double>(cfg_.dim), 0.0};
  grid_.nx = cfg_.dim;
  grid_.ny = 1;
}

Eigen::VectorXd Lorenz96Model::tendency(const Eigen::VectorXd& x) const {
  const int d = cfg_.dim;
  Eigen::VectorXd dx(d);
  for (int i = 0; i < d; ++i) {
    const double xp1 = x[(i + 1) % d];
    const double xm1 = x[(i + d - 1) % d];
    const double xm2 = x[(i + d - 2) % d];
    dx[i] = (xp1 - xm2) * xm1 - x[i] + cfg_.forcing;
  }
  return dx;
}

void Lorenz96Model::step(Eigen::VectorXd& x) const {
  const double h = cfg_.dt;
  const Eigen::VectorXd k1 = tendency(x);
  const Eigen::VectorXd k2 = tendency(x + 0.5 * h * k1);
  const Eigen::VectorXd k3 = tendency(x + 0.5 * h * k2);
  const Eigen::VectorXd k4 = tendency(x + h * k3);
  x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

Eigen::VectorXd Lorenz96Model::advance(const Eigen::VectorXd& state, double from, double to) const {
  const long steps = std::lround(to / cfg_.dt) - std::lround(from / cfg_.dt);
  if (steps < 0) throw ValidationError("lorenz96: cannot advance backwards");
  Eigen::VectorXd x = state;
  for (long k = 0; k < steps; ++k) step(x);
  return x;
}

Eigen::VectorXd Lorenz96Model::observe(const Eigen::VectorXd& state, const ObservationBatch& batch) const {
  Eigen::VectorXd out(batch.points());
  for (Eigen::Index p = 0; p < batch.points(); ++p) out[p] = grid_.sample(state, batch.coords.col(p));
  return out;
}

std::optional<Eigen::VectorXd> Lorenz96Model::location(Eigen::Index component) const {
  return grid_.center(static_cast<int>(component));
}

PhysicalTrajectory simulate_lorenz96(const Lorenz96Config& config) {
  Lorenz96Model model(config);
  Eigen::VectorXd x = config.initial;
  if (x.size() == 0) {
    x = Eigen::VectorXd::Constant(config.dim, config.forcing);
    x[0] += 0.01;
  }
  if (x.size() != config.dim) throw ValidationError("lorenz96: initial state has wrong dimension");
  PhysicalTrajectory traj;
  traj.grid = model.grid();
  traj.channels = 1;
  traj.dt = config.dt;
  traj.save_every = config.save_every;
  traj.true_param = Eigen::VectorXd::Constant(1, config.forcing);
  traj.times.push_back(0.0);
  traj.frames.push_back(x);
  for (int k = 1; k <= config.steps; ++k) {
    model.step(x);
    if (!x.allFinite()) throw NumericalError("lorenz96: non-finite state at step " + std::to_string(k), k);
    if (k % config.save_every == 0) {
      traj.times.push_back(k * config.dt);
      traj.frames.push_back(x);
    }
  }
  return traj;
}

// --- observation process ----------------------------------------------------

std::string to_string(ObservationMode mode) {
  switch (mode) {
    case ObservationMode::fixed_grid: return "fixed-grid";
    case ObservationMode::moving_locations: return "moving-locations";
    case ObservationMode::irregular_times: return "irregular-times";
    case ObservationMode::joint_irregular: return "joint-irregular";
  }
  return "fixed-grid";
}

ObservationMode observation_mode_from_string(const std::string& name) {
  for (auto m : {ObservationMode::fixed_grid, ObservationMode::moving_locations, ObservationMode::irregular_times,
                 ObservationMode::joint_irregular}) {
    if (to_string(m) == name) return m;
  }
  throw ValidationError("unknown observation mode '" + name + "'");
}

Eigen::MatrixXd strided_coordinates(const Grid& grid, int stride) {
  if (stride < 1 || stride > grid.nx || (grid.domain.dim == 2 && stride > grid.ny)) {
    throw ValidationError("observation stride " + std::to_string(stride) + " incompatible with " +
                          std::to_string(grid.nx) + "x" + std::to_string(grid.ny) + " grid");
  }
  std::vector<int> cells;
  const int ny = grid.domain.dim == 2 ? grid.ny : 1;
  const int jy0 = grid.domain.dim == 2 ? stride / 2 : 0;
  const int jstep = grid.domain.dim == 2 ? stride : 1;
  for (int j = jy0; j < ny; j += jstep) {
    for (int i = stride / 2; i < grid.nx; i += stride) cells.push_back(grid.index(i, j));
  }
  Eigen::MatrixXd coords(grid.domain.dim, static_cast<Eigen::Index>(cells.size()));
  for (std::size_t p = 0; p < cells.size(); ++p) coords.col(static_cast<Eigen::Index>(p)) = grid.center(cells[p]);
  return coords;
}

std::vector<double> regular_observation_times(const PhysicalTrajectory& truth, const ObservationPlan& plan) {
  if (plan.interval_steps < 1) throw ValidationError("observation interval must be >= 1 step");
  std::vector<double> times;
  const double t0 = truth.start_time();
  const double t1 = truth.end_time();
  const double interval = plan.interval_steps * truth.dt;
  for (long k = 0;; ++k) {
    const double t = t0 + k * interval;
    if (t > t1 + 1e-9 * interval) break;
    times.push_back(t);
  }
  return times;
}

ObservationSeries observe(const PhysicalTrajectory& truth, const ObservationPlan& plan, double noise_to_signal) {
  if (noise_to_signal < 0.0) throw ValidationError("noise_to_signal must be >= 0");
  if (truth.frames.empty()) throw ValidationError("observe: empty truth trajectory");
  const Grid& grid = truth.grid;
  const Eigen::MatrixXd fixed_coords = strided_coordinates(grid, plan.stride);
  std::vector<double> times = regular_observation_times(truth, plan);

  Rng coord_rng(derive_seed(plan.seed, "obs-coords"));
  Rng time_rng(derive_seed(plan.seed, "obs-times"));
  Rng noise_rng(derive_seed(plan.seed, "obs-noise"));

  const bool random_times =
      plan.mode == ObservationMode::irregular_times || plan.mode == ObservationMode::joint_irregular;
  const bool random_coords =
      plan.mode == ObservationMode::moving_locations || plan.mode == ObservationMode::joint_irregular;

  if (random_times) {
    const std::size_t count = plan.time_count > 0 ? static_cast<std::size_t>(plan.time_count) : times.size();
    std::uniform_real_distribution<double> ut(truth.start_time(), truth.end_time());
    times.resize(count);
    for (auto& t : times) t = ut(time_rng);
    std::sort(times.begin(), times.end());
  }

  const double sigma = noise_to_signal * truth.rms();
  // R must stay positive definite; noiseless plans record a nominal 0.1% of the signal.
  const double rms = truth.rms();
  const double recorded_std = sigma > 0.0 ? sigma : (rms > 0.0 ? 1e-3 * rms : 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const Eigen::Index n_points = plan.point_count > 0 ? plan.point_count : fixed_coords.cols();

  ObservationSeries out;
  out.reserve(times.size());
  for (double t : times) {
    ObservationBatch b;
    b.time = t;
    b.channels = truth.channels;
    if (random_coords) {
      b.coords.resize(grid.domain.dim, n_points);
      for (Eigen::Index p = 0; p < n_points; ++p) {
        for (int a = 0; a < grid.domain.dim; ++a) {
          std::uniform_real_distribution<double> ux(grid.domain.lo[a], grid.domain.hi[a]);
          b.coords(a, p) = ux(coord_rng);
        }
      }
    } else {
      b.coords = fixed_coords;
    }
    const Eigen::VectorXd frame = truth.frame_at(t);
    b.values.resize(b.coords.cols() * b.channels);
    for (Eigen::Index p = 0; p < b.coords.cols(); ++p) {
      for (int c = 0; c < b.channels; ++c) {
        double v = grid.sample(frame, b.coords.col(p), b.channels, c);
        if (sigma > 0.0) v += sigma * noise(noise_rng);
        b.values[p * b.channels + c] = v;
      }
    }
    b.noise_std = Eigen::VectorXd::Constant(b.values.size(), recorded_std);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace levda
