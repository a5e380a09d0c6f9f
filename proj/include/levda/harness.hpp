#pragma once

// Twin-experiment orchestration: configuration, world construction, the
// generate -> train -> assimilate -> evaluate -> report pipeline and its
// on-disk layout.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "levda/assimilate.hpp"
#include "levda/metrics.hpp"
#include "levda/surrogate.hpp"
#include "levda/worlds.hpp"

namespace levda {

struct WorldSpec {
  std::string kind = "tsunami";  // tsunami | lorenz96
  int n = 32;                    // grid cells per axis (tsunami) or state dimension (lorenz96)
  int steps = 400;
  double dt = 0.005;
  double gravity = 1.0;
  double depth = 0.0625;
  double amplitude = 1.0;
  double width = 0.08;
  // Prior box of the world parameter: bump centre (tsunami) or forcing (lorenz96).
  std::vector<double> prior_lo{0.25, 0.25};
  std::vector<double> prior_hi{0.75, 0.75};
};

struct ObservationSpec {
  std::string mode = "fixed-grid";
  int stride = 4;
  int interval_steps = 20;
  int time_count = 0;
  int point_count = 0;
  double noise_to_signal = 0.1;
};

struct SurrogateSpec {
  int latent_dim = 12;
  int frame_every = 10;  // simulator steps per surrogate step
  int training_trajectories = 40;
  std::vector<int> field_hidden{64, 64};
  std::vector<int> decoder_hidden{64, 64, 64};
  std::string activation = "tanh";
  int embedding_frequencies = 0;
  int epochs = 2000;
  double learning_rate = 1e-3;
  int points_per_snapshot = 256;
  int batch_trajectories = 0;
  bool learn_dt = true;
};

struct AssimilationSpec {
  std::string method = "levda";
  int ensemble_size = 40;
  int tau = 5;  // observation intervals per window
  double inflation = 1.05;
  double additive_inflation = 0.0;
  int max_iterations = 200;
  double gradient_tolerance = 1e-6;
  int outer_loops = 1;
  double etkf_inflation = 1.0;
  double localization_radius = 0.0;
};

struct SeedSpec {
  std::uint64_t data = 1;
  std::uint64_t training = 2;
  std::uint64_t assimilation = 3;
};

struct ExperimentConfig {
  WorldSpec world;
  ObservationSpec observations;
  SurrogateSpec surrogate;
  AssimilationSpec assimilation;
  SeedSpec seeds;
  std::string output = "run";

  /// Throws ValidationError naming the offending config path.
  void validate() const;
  int param_dim() const;
  /// Physical time between surrogate steps.
  double frame_step() const { return world.dt * surrogate.frame_every; }
  int frame_count() const { return world.steps / surrogate.frame_every; }
  /// Window horizon in surrogate steps.
  int horizon_steps() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
/// Strict parse: unknown keys and type mismatches are errors naming the path.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
/// "a.b.c=value" applied to the JSON form; value is parsed as JSON, else taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);
/// Hex FNV-1a hash of the canonical config text.
std::string config_hash(const ExperimentConfig& config);

// ---------------------------------------------------------------------------
// Worlds.

Eigen::VectorXd sample_prior(const WorldSpec& world, Rng& rng);
PhysicalTrajectory simulate_world(const WorldSpec& world, const Eigen::VectorXd& param);
std::unique_ptr<StateSpaceModel> make_world_model(const WorldSpec& world);
Eigen::VectorXd world_initial_state(const WorldSpec& world, const Eigen::VectorXd& param);
ObservationPlan observation_plan(const ExperimentConfig& config);

// ---------------------------------------------------------------------------
// In-memory pipeline.

struct TwinData {
  PhysicalTrajectory truth;
  ObservationSeries observations;
};

TwinData generate_twin(const ExperimentConfig& config);
TrainingConfig training_config(const ExperimentConfig& config);
TrainingDataset build_training_dataset(const ExperimentConfig& config);
TrainingResult train_surrogate(const ExperimentConfig& config, const TrainingCallback& callback = {});

std::vector<WindowSpec> make_windows(const ExperimentConfig& config, const ObservationSeries& observations);
CycleOptions cycle_options(const ExperimentConfig& config);
/// Latent initial ensemble: prior parameter draws pushed through the
/// shifted initialization s_{-1} = 0.
LatentEnsemble initial_latent_ensemble(const ExperimentConfig& config, const SurrogateModel& model);
FullStateEnsemble initial_full_ensemble(const ExperimentConfig& config);

/// Runs one method. Latent methods need `model`; free-run uses the latent
/// surrogate when given one and the full model otherwise.
CycleOutput run_assimilation(const ExperimentConfig& config, const SurrogateModel* model, const TwinData& data,
                             Method method);

/// One metrics row per snapshot. Throws ValidationError listing snapshot
/// times missing from the truth.
std::vector<MetricsRow> evaluate_snapshots(const std::vector<CycleSnapshot>& snapshots,
                                           const PhysicalTrajectory& truth, const std::string& label);

// ---------------------------------------------------------------------------
// On-disk stages. Every stage writes under config.output (or `out`).

struct StageOptions {
  std::filesystem::path out;        // empty: config.output
  std::string label;                // assimilate/evaluate: run label, default = method name
  std::vector<std::string> methods; // evaluate: labels to include (empty = all archives)
  bool quiet = true;
};

void stage_generate(const ExperimentConfig& config, const StageOptions& options);
void stage_train(const ExperimentConfig& config, const StageOptions& options);
void stage_assimilate(const ExperimentConfig& config, Method method, const StageOptions& options);
void stage_evaluate(const ExperimentConfig& config, const StageOptions& options);

/// Markdown table of time-averaged metrics, one row per (file, method).
/// With `group_by`, labels of the form "name[key=value,...]" are split and
/// the value of `group_by` gets its own column.
std::string report(const std::vector<std::filesystem::path>& csvs, const std::string& group_by = "");

std::string tool_version();

}  // namespace levda
