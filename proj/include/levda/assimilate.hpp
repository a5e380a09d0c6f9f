#pragma once

// Smoothers and filters: LEVDA (ensemble-subspace variational smoothing in
// the surrogate's latent space), latent 4DVar, full-state 4DEnVar, an ETKF
// baseline and the windowed cycling driver.

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "levda/observations.hpp"
#include "levda/optim.hpp"
#include "levda/state_space.hpp"
#include "levda/surrogate.hpp"

namespace levda {

struct LatentEnsemble {
  double time = 0.0;
  std::vector<AugmentedLatentState> members;

  int size() const { return static_cast<int>(members.size()); }
  Eigen::Index latent_dim() const { return members.front().s.size(); }
  Eigen::Index param_dim() const { return members.front().u.size(); }
  /// (D_s + D_u) x K.
  Eigen::MatrixXd stacked() const;
  static LatentEnsemble from_stacked(double time, const Eigen::MatrixXd& z, Eigen::Index latent_dim);
  /// Throws ValidationError unless K >= 2 and all members share dimensions.
  void validate() const;
};

struct InflationRecord {
  double multiplicative = 1.0;
  double additive = 0.0;
  std::uint64_t seed = 0;
};

struct PerturbationMatrix {
  Eigen::MatrixXd columns;  // (D_s + D_u) x K, already divided by sqrt(K - 1)
  InflationRecord inflation;
};

struct EnsemblePerturbations {
  Eigen::VectorXd mean;
  PerturbationMatrix perturbations;
};

/// delta z_k = rho (z_k - mean) + eps_k, eps_k ~ N(0, sigma^2 I), scaled by 1/sqrt(K - 1).
EnsemblePerturbations build_perturbations(const LatentEnsemble& ensemble, double multiplicative, double additive,
                                          std::uint64_t seed);

struct WindowSpec {
  double anchor = 0.0;
  int horizon = 0;  // surrogate steps covered by the observation term
  int span = 0;     // surrogate steps to the next anchor (>= horizon for all but the last window)
  ObservationSeries batches;

  int steps() const { return std::max(horizon, span); }
  std::size_t observation_count() const;
  /// Checks ordering and that every batch lies in [anchor, anchor + horizon * time_step].
  void validate(double time_step) const;
};

/// Splits an observation series into consecutive windows over the surrogate
/// time grid t0 + k * time_step, k = 0..steps. horizon > 0: anchors every
/// `horizon` steps. horizon == 0: one window per observation time, anchored
/// at that time (which must be on the grid), containing only its batch.
std::vector<WindowSpec> build_windows(const ObservationSeries& series, double t0, double time_step, int steps,
                                      int horizon);

// ---------------------------------------------------------------------------
// LEVDA.

/// Taped J(alpha) = 1/2 |alpha|^2 + 1/2 sum_i |y_i - D(s(t_i; alpha))|^2_{R^-1}.
ad::VarD levda_objective(const TapedSurrogate& model, const ad::VarD& alpha, const Eigen::VectorXd& mean,
                         const PerturbationMatrix& perturbations, const WindowSpec& window);

/// Value and gradient of the LEVDA objective at alpha.
double levda_objective(const SurrogateModel& model, const Eigen::VectorXd& alpha, const Eigen::VectorXd& mean,
                       const PerturbationMatrix& perturbations, const WindowSpec& window,
                       Eigen::VectorXd* gradient = nullptr);

struct AnalysisOptions {
  double multiplicative_inflation = 1.05;
  double additive_inflation = 0.0;
  LbfgsOptions lbfgs{};
  std::uint64_t seed = 0;
  int threads = 0;  // 0: LEVDA_THREADS or 1
};

struct MemberDiagnostics {
  double warm_start_objective = 0.0;
  double objective = 0.0;
  std::vector<double> trace;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  bool line_search_failed = false;
};

struct AnalysisResult {
  double time = 0.0;
  LatentEnsemble background;
  LatentEnsemble analysis;
  Eigen::VectorXd mean;
  PerturbationMatrix perturbations;
  Eigen::MatrixXd coefficients;  // K x K, column j = alpha*_j
  std::vector<MemberDiagnostics> members;
  bool skipped = false;
  std::size_t observation_count = 0;
  double wall_seconds = 0.0;

  /// max_j |z^a_j - (mean + P_z alpha*_j)|_inf.
  double reconstruction_residual() const;
};

/// Thread count from LEVDA_THREADS (>= 1), default 1.
int default_thread_count();

/// K independent L-BFGS minimizations from alpha_j = sqrt(K - 1) e_j. An
/// empty window returns the background unchanged.
AnalysisResult levda_analyze(const LatentEnsemble& ensemble, const SurrogateModel& model, const WindowSpec& window,
                             const AnalysisOptions& options = {});

// ---------------------------------------------------------------------------
// Latent 4DVar.

struct FourDVarResult {
  AugmentedLatentState state;
  double objective = 0.0;
  double background_objective = 0.0;
  LbfgsResult optimizer;
};

/// MAP of 1/2 |z - z_b|^2_{B^-1} + observation misfit over the window, for
/// an SPD background covariance B. The search runs in the whitened control
/// v with z = z_b + L v, B = L L^T.
FourDVarResult latent_4dvar(const AugmentedLatentState& background, const Eigen::MatrixXd& covariance,
                            const SurrogateModel& model, const WindowSpec& window, const LbfgsOptions& options = {});

/// Diagonal B = diag(b_s, b_u).
FourDVarResult latent_4dvar(const AugmentedLatentState& background, const Eigen::VectorXd& variance_s,
                            const Eigen::VectorXd& variance_u, const SurrogateModel& model, const WindowSpec& window,
                            const LbfgsOptions& options = {});

/// Diagonal of the ensemble sample covariance plus `ridge`.
Eigen::VectorXd ensemble_variance(const LatentEnsemble& ensemble, double ridge = 1e-6);

// ---------------------------------------------------------------------------
// Full-state baselines.

struct FullStateEnsemble {
  double time = 0.0;
  Eigen::MatrixXd members;  // n x K

  int size() const { return static_cast<int>(members.cols()); }
  Eigen::VectorXd mean() const { return members.rowwise().mean(); }
};

struct FourDEnVarOptions {
  int outer_loops = 1;
};

struct FourDEnVarResult {
  FullStateEnsemble analysis;
  Eigen::VectorXd analysis_mean;
  Eigen::VectorXd alpha;
  bool ridge_added = false;
};

/// Closed-form 4DEnVar: alpha* = (I + sum P_y^T R^-1 P_y)^-1 sum P_y^T R^-1 d,
/// members propagated through the full model. The analysis ensemble is the
/// symmetric square-root transform of the background perturbations.
FourDEnVarResult fourdenvar_solve(const FullStateEnsemble& background, const StateSpaceModel& model,
                                  const WindowSpec& window, const FourDEnVarOptions& options = {});

struct EtkfOptions {
  double inflation = 1.0;
  double localization_radius = 0.0;  // 0: global analysis
};

/// Ensemble transform Kalman filter analysis at one observation time.
Eigen::MatrixXd etkf_update(const Eigen::MatrixXd& members, const StateSpaceModel& model,
                            const ObservationBatch& batch, const EtkfOptions& options = {});

/// Gaspari-Cohn fifth-order taper; support 2c.
double gaspari_cohn(double distance, double c);

// ---------------------------------------------------------------------------
// Cycling.

enum class Method { levda, etkf, fourdenvar_full, free_run };

std::string to_string(Method m);
Method method_from_string(const std::string& name);
bool is_latent(Method m);

/// Decoded ensemble at one output time.
struct CycleSnapshot {
  double time = 0.0;
  std::vector<Eigen::VectorXd> fields;  // per member, cells * channels
  std::vector<Eigen::VectorXd> params;  // per member (empty when unavailable)
};

struct CycleOptions {
  AnalysisOptions analysis{};
  FourDEnVarOptions fourdenvar{};
  EtkfOptions etkf{};
};

struct CycleOutput {
  std::vector<CycleSnapshot> snapshots;
  std::vector<AnalysisResult> analyses;  // LEVDA windows, in order
  LatentEnsemble final_latent;
  FullStateEnsemble final_full;
};

/// Latent methods (levda, free-run). Snapshots are emitted at every grid time
/// covered by the windows, decoded at `output_coords`.
CycleOutput cycle(const LatentEnsemble& initial, const SurrogateModel& model, const std::vector<WindowSpec>& windows,
                  Method method, const Eigen::MatrixXd& output_coords, const CycleOptions& options = {});

/// Full-state methods (etkf, 4denvar-full, free-run), snapshots at every grid
/// time t0 + k * time_step of the windows.
CycleOutput cycle(const FullStateEnsemble& initial, const StateSpaceModel& model,
                  const std::vector<WindowSpec>& windows, double time_step, Method method,
                  const CycleOptions& options = {});

}  // namespace levda
