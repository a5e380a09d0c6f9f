#pragma once

// Differentiable latent dynamics surrogate: an MLP vector field over the
// augmented latent state (s, u), a coordinate-based decoder, forward-Euler
// integration and Euler-consistent interpolation between grid times.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "levda/geometry.hpp"
#include "levda/random.hpp"
#include "levda/tape.hpp"

namespace levda {

enum class Activation { tanh, sine };
enum class DecoderKind { mlp, nearest_cell };
enum class ParameterRule { static_params, linear_decay };

std::string to_string(Activation a);
std::string to_string(DecoderKind k);
std::string to_string(ParameterRule r);
Activation activation_from_string(const std::string& s);
DecoderKind decoder_kind_from_string(const std::string& s);
ParameterRule parameter_rule_from_string(const std::string& s);

struct DenseLayer {
  Eigen::MatrixXd weight;
  Eigen::VectorXd bias;
};

/// Fully connected network; every layer but the last is followed by the
/// activation. A network with a single layer is an affine map.
struct Mlp {
  std::vector<DenseLayer> layers;
  Activation activation = Activation::tanh;

  Eigen::Index inputs() const { return layers.empty() ? 0 : layers.front().weight.cols(); }
  Eigen::Index outputs() const { return layers.empty() ? 0 : layers.back().weight.rows(); }
  Eigen::Index parameter_count() const;

  /// Glorot-uniform weights, zero biases. sizes = {in, hidden..., out}.
  static Mlp glorot(const std::vector<int>& sizes, Activation activation, Rng& rng);
};

/// z = (s, u): latent state and parameters/forcings.
struct AugmentedLatentState {
  Eigen::VectorXd s;
  Eigen::VectorXd u;

  Eigen::Index size() const { return s.size() + u.size(); }
  Eigen::VectorXd stacked() const;
  static AugmentedLatentState split(const Eigen::Ref<const Eigen::VectorXd>& z, Eigen::Index latent_dim);
};

struct SurrogateModel {
  int latent_dim = 1;
  int param_dim = 0;
  int channels = 1;
  Domain domain{};

  Mlp field;  // (latent_dim + param_dim) -> latent_dim

  DecoderKind decoder_kind = DecoderKind::mlp;
  Mlp decoder;  // (latent_dim + coordinate features) -> channels
  int embedding_frequencies = 0;
  Grid identity_grid{};  // nearest_cell decoder only; cells == latent_dim

  ParameterRule parameter_rule = ParameterRule::static_params;
  double decay_rate = 0.0;

  double log_dt = 0.0;  // Euler step = exp(log_dt)
  bool learn_dt = false;
  double time_step = 1.0;  // physical time between consecutive grid states

  Eigen::VectorXd param_offset;  // F sees (u - offset) / scale
  Eigen::VectorXd param_scale;
  double field_offset = 0.0;  // decoded value = offset + scale * network output
  double field_scale = 1.0;

  double dt() const { return std::exp(log_dt); }
  int coordinate_features() const;
  /// Throws ValidationError on inconsistent shapes or non-finite weights.
  void validate() const;

  /// Flat view of the trainable parameters (field, decoder, log_dt if learnable).
  Eigen::VectorXd parameters() const;
  void set_parameters(const Eigen::Ref<const Eigen::VectorXd>& flat);
};

/// Identity-decoder model with affine latent dynamics ds/dt = A s + C u + b.
/// Used for linear-Gaussian checks.
SurrogateModel make_linear_surrogate(const Eigen::MatrixXd& a, const Eigen::MatrixXd& c, const Eigen::VectorXd& b,
                                     double dt, const Grid& grid);

/// Coordinate features fed to the decoder: normalized coordinates followed by
/// sin/cos(pi 2^j x) for j < frequencies. Throws on coordinates outside the domain.
Eigen::MatrixXd coordinate_features(const Domain& domain, const Eigen::MatrixXd& coords, int frequencies);

// ---------------------------------------------------------------------------
// Taped evaluation.

/// Model weights bound into a tape, either as leaves (training) or constants.
class TapedSurrogate {
 public:
  TapedSurrogate(ad::TapeD& tape, const SurrogateModel& model, bool trainable);

  ad::TapeD& tape() const { return *tape_; }
  const SurrogateModel& model() const { return *model_; }

  ad::VarD vector_field(const ad::VarD& s, const ad::VarD& u) const;
  /// Euler step size as a 1x1 variable (differentiable when learn_dt).
  const ad::VarD& dt() const { return dt_; }
  bool dt_is_variable() const { return dt_variable_; }
  ad::VarD step_param(const ad::VarD& u) const;
  /// Decoded values at coords, coordinate-major (points * channels) x 1.
  ad::VarD decode(const ad::VarD& s, const Eigen::MatrixXd& coords) const;
  /// Same, with precomputed coordinate features.
  ad::VarD decode_features(const ad::VarD& s, const ad::VarD& features, const Eigen::MatrixXd& coords) const;

  /// Gradient with respect to the bound leaves, laid out like SurrogateModel::parameters().
  Eigen::VectorXd flat_gradient(const ad::GradientD& grad) const;

 private:
  struct Layer {
    ad::VarD weight;
    ad::VarD latent_weight;  // decoder first layer only
    ad::VarD bias;
  };
  ad::VarD run_mlp(const std::vector<Layer>& layers, Activation act, ad::VarD x, std::size_t first) const;

  ad::TapeD* tape_;
  const SurrogateModel* model_;
  bool trainable_;
  std::vector<Layer> field_;
  std::vector<Layer> decoder_;
  ad::VarD dt_;
  ad::VarD log_dt_;
  bool dt_variable_ = false;
  ad::VarD param_offset_;
  ad::VarD param_inv_scale_;
};

struct TapedTrajectory {
  double t0 = 0.0;
  double time_step = 1.0;
  std::vector<ad::VarD> s;
  std::vector<ad::VarD> u;
  std::vector<ad::VarD> ds;  // vector field at each state
};

/// Forward Euler for `steps` steps. With `shifted`, (s0, u0) is the s_{-1}
/// state: s0 must be zero and the first recorded state is the post-step
/// state. Throws NumericalError (index = step) on non-finite values.
TapedTrajectory integrate(const TapedSurrogate& model, const ad::VarD& s0, const ad::VarD& u0, int steps,
                          double t0 = 0.0, bool shifted = false);

/// s(t) = s_k + a * dt * ds_k with t = t_k + a * time_step, a in [0, 1).
ad::VarD interpolate(const TapedTrajectory& traj, const TapedSurrogate& model, double t);

// ---------------------------------------------------------------------------
// Value-level API.

struct LatentTrajectory {
  std::vector<AugmentedLatentState> states;
  std::vector<Eigen::VectorXd> derivatives;
  double dt = 1.0;         // Euler step
  double time_step = 1.0;  // physical spacing of the states
  double t0 = 0.0;

  double end_time() const { return t0 + static_cast<double>(states.size() - 1) * time_step; }
};

LatentTrajectory integrate(const SurrogateModel& model, const AugmentedLatentState& z0, int steps,
                           double t0 = 0.0, bool shifted = false);
Eigen::VectorXd interpolate(const LatentTrajectory& traj, double t);
/// Decoded values at coords (dim x points), coordinate-major.
Eigen::VectorXd decode(const SurrogateModel& model, const Eigen::VectorXd& s, const Eigen::MatrixXd& coords);

/// Grid index k and interpolation weight a for time t on a grid starting at
/// t0 with `count` states. Throws ValidationError outside [t0, t_{count-1}].
std::pair<int, double> locate_time(double t0, double time_step, int count, double t);

// ---------------------------------------------------------------------------
// Training.

struct TrainingTrajectory {
  Eigen::VectorXd param;                // u for this trajectory
  std::vector<Eigen::VectorXd> fields;  // per grid time: cells * channels
};

struct TrainingDataset {
  Grid grid;
  int channels = 1;
  double time_step = 1.0;  // spacing of the stored fields
  std::vector<TrainingTrajectory> trajectories;

  void validate() const;
};

struct TrainingConfig {
  int latent_dim = 12;
  std::vector<int> field_hidden{64, 64};
  std::vector<int> decoder_hidden{64, 64, 64};
  Activation decoder_activation = Activation::tanh;
  int embedding_frequencies = 0;
  ParameterRule parameter_rule = ParameterRule::static_params;
  double decay_rate = 0.0;
  bool learn_dt = true;
  int epochs = 2000;
  double learning_rate = 1e-3;
  int points_per_snapshot = 256;
  int batch_trajectories = 0;  // 0 = whole dataset per step
  std::uint64_t seed = 0;
};

struct TrainingResult {
  SurrogateModel model;
  std::vector<double> loss_history;  // entry e: loss after e epochs
};

/// Optional per-epoch hook (epoch, loss).
using TrainingCallback = std::function<void(int, double)>;

/// Builds an untrained model for the dataset with normalization constants set.
SurrogateModel initialize_surrogate(const TrainingDataset& data, const TrainingConfig& config);

/// Mean over trajectories of the sum over times of the mean squared error
/// over `samples[n][k]` (cell indices).
double training_loss(const SurrogateModel& model, const TrainingDataset& data,
                     const std::vector<std::vector<std::vector<int>>>& samples);

/// Adam on the reconstruction loss of shifted-initialization rollouts.
/// Throws NumericalError (index = epoch) if the loss becomes non-finite.
TrainingResult train(const TrainingDataset& data, const TrainingConfig& config,
                     const TrainingCallback& callback = {});

}  // namespace levda
