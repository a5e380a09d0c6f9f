#include "levda/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "levda/archive.hpp"
#include "levda/errors.hpp"

namespace levda {

namespace fs = std::filesystem;
using nlohmann::json;

std::string tool_version() { return LEVDA_VERSION; }

// --- configuration --------------------------------------------------------------

namespace {

void require(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw ValidationError("config." + path + ": " + what);
}

}  // namespace

int ExperimentConfig::param_dim() const { return world.kind == "lorenz96" ? 1 : 2; }

int ExperimentConfig::horizon_steps() const {
  return assimilation.tau * observations.interval_steps / surrogate.frame_every;
}

void ExperimentConfig::validate() const {
  require(world.kind == "tsunami" || world.kind == "lorenz96", "world.kind", "expected tsunami or lorenz96");
  require(world.n >= (world.kind == "lorenz96" ? 4 : 2), "world.n", "grid too small");
  require(world.steps >= 1, "world.steps", "must be >= 1");
  require(world.dt > 0.0, "world.dt", "must be > 0");
  require(static_cast<int>(world.prior_lo.size()) == param_dim(), "world.prior_lo",
          "expected " + std::to_string(param_dim()) + " entries");
  require(static_cast<int>(world.prior_hi.size()) == param_dim(), "world.prior_hi",
          "expected " + std::to_string(param_dim()) + " entries");
  for (int i = 0; i < param_dim(); ++i) {
    require(world.prior_lo[i] <= world.prior_hi[i], "world.prior_hi", "must be >= prior_lo");
    if (world.kind == "tsunami") {
      require(world.prior_lo[i] >= 0.0 && world.prior_hi[i] <= 1.0, "world.prior_lo", "must lie in [0, 1]");
    }
  }
  if (world.kind == "tsunami") {
    require(world.gravity > 0.0, "world.gravity", "must be > 0");
    require(world.depth > 0.0, "world.depth", "must be > 0");
    require(world.width > 0.0, "world.width", "must be > 0");
  }
  try {
    observation_mode_from_string(observations.mode);
  } catch (const ValidationError& e) {
    require(false, "observations.mode", e.what());
  }
  const int nx = world.n;
  require(observations.stride >= 1 && observations.stride <= nx, "observations.stride",
          "stride " + std::to_string(observations.stride) + " larger than the " + std::to_string(nx) + "-cell grid");
  require(observations.interval_steps >= 1 && observations.interval_steps <= world.steps,
          "observations.interval_steps", "must be in [1, world.steps]");
  require(observations.time_count >= 0, "observations.time_count", "must be >= 0");
  require(observations.point_count >= 0, "observations.point_count", "must be >= 0");
  require(observations.noise_to_signal >= 0.0, "observations.noise_to_signal", "must be >= 0");

  require(surrogate.latent_dim >= 1, "surrogate.latent_dim", "must be >= 1");
  require(surrogate.frame_every >= 1 && world.steps % surrogate.frame_every == 0, "surrogate.frame_every",
          "must divide world.steps");
  require(surrogate.training_trajectories >= 1, "surrogate.training_trajectories", "must be >= 1");
  for (int h : surrogate.field_hidden) require(h >= 1, "surrogate.field_hidden", "widths must be >= 1");
  for (int h : surrogate.decoder_hidden) require(h >= 1, "surrogate.decoder_hidden", "widths must be >= 1");
  require(surrogate.activation == "tanh" || surrogate.activation == "sine", "surrogate.activation",
          "expected tanh or sine");
  require(surrogate.embedding_frequencies >= 0, "surrogate.embedding_frequencies", "must be >= 0");
  require(surrogate.epochs >= 0, "surrogate.epochs", "must be >= 0");
  require(surrogate.learning_rate > 0.0, "surrogate.learning_rate", "must be > 0");
  require(surrogate.points_per_snapshot >= 0, "surrogate.points_per_snapshot", "must be >= 0");
  require(surrogate.batch_trajectories >= 0, "surrogate.batch_trajectories", "must be >= 0");

  try {
    method_from_string(assimilation.method);
  } catch (const ValidationError& e) {
    require(false, "assimilation.method", e.what());
  }
  require(assimilation.ensemble_size >= 2, "assimilation.ensemble_size", "K must be >= 2");
  require(assimilation.tau >= 0, "assimilation.tau", "must be >= 0");
  require((assimilation.tau * observations.interval_steps) % surrogate.frame_every == 0, "assimilation.tau",
          "tau * observations.interval_steps must be a multiple of surrogate.frame_every");
  require(assimilation.tau * observations.interval_steps <= world.steps, "assimilation.tau",
          "window longer than the simulated horizon");
  require(assimilation.inflation >= 1.0, "assimilation.inflation", "must be >= 1");
  require(assimilation.additive_inflation >= 0.0, "assimilation.additive_inflation", "must be >= 0");
  require(assimilation.max_iterations >= 0, "assimilation.max_iterations", "must be >= 0");
  require(assimilation.gradient_tolerance >= 0.0, "assimilation.gradient_tolerance", "must be >= 0");
  require(assimilation.outer_loops >= 1, "assimilation.outer_loops", "must be >= 1");
  require(assimilation.etkf_inflation >= 1.0, "assimilation.etkf_inflation", "must be >= 1");
  require(assimilation.localization_radius >= 0.0, "assimilation.localization_radius", "must be >= 0");
  require(!output.empty(), "output", "must not be empty");
}

json to_json(const ExperimentConfig& c) {
  return {{"world",
           {{"kind", c.world.kind},
            {"n", c.world.n},
            {"steps", c.world.steps},
            {"dt", c.world.dt},
            {"gravity", c.world.gravity},
            {"depth", c.world.depth},
            {"amplitude", c.world.amplitude},
            {"width", c.world.width},
            {"prior_lo", c.world.prior_lo},
            {"prior_hi", c.world.prior_hi}}},
          {"observations",
           {{"mode", c.observations.mode},
            {"stride", c.observations.stride},
            {"interval_steps", c.observations.interval_steps},
            {"time_count", c.observations.time_count},
            {"point_count", c.observations.point_count},
            {"noise_to_signal", c.observations.noise_to_signal}}},
          {"surrogate",
           {{"latent_dim", c.surrogate.latent_dim},
            {"frame_every", c.surrogate.frame_every},
            {"training_trajectories", c.surrogate.training_trajectories},
            {"field_hidden", c.surrogate.field_hidden},
            {"decoder_hidden", c.surrogate.decoder_hidden},
            {"activation", c.surrogate.activation},
            {"embedding_frequencies", c.surrogate.embedding_frequencies},
            {"epochs", c.surrogate.epochs},
            {"learning_rate", c.surrogate.learning_rate},
            {"points_per_snapshot", c.surrogate.points_per_snapshot},
            {"batch_trajectories", c.surrogate.batch_trajectories},
            {"learn_dt", c.surrogate.learn_dt}}},
          {"assimilation",
           {{"method", c.assimilation.method},
            {"ensemble_size", c.assimilation.ensemble_size},
            {"tau", c.assimilation.tau},
            {"inflation", c.assimilation.inflation},
            {"additive_inflation", c.assimilation.additive_inflation},
            {"max_iterations", c.assimilation.max_iterations},
            {"gradient_tolerance", c.assimilation.gradient_tolerance},
            {"outer_loops", c.assimilation.outer_loops},
            {"etkf_inflation", c.assimilation.etkf_inflation},
            {"localization_radius", c.assimilation.localization_radius}}},
          {"seeds", {{"data", c.seeds.data}, {"training", c.seeds.training}, {"assimilation", c.seeds.assimilation}}},
          {"output", c.output}};
}

namespace {

// Reads optional keys from one config section and rejects unknown ones.
class Section {
 public:
  Section(const json& root, const std::string& name) : name_(name) {
    if (!root.contains(name)) return;
    node_ = &root.at(name);
    if (!node_->is_object()) throw ValidationError("config." + name + ": expected an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (node_ == nullptr || !node_->contains(key)) return;
    const json& v = node_->at(key);
    const std::string path = "config." + name_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ValidationError(path + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ValidationError(path + ": expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned()) throw ValidationError(path + ": must be >= 0");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ValidationError(path + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ValidationError(path + ": expected a string");
    }
    try {
      out = v.get<T>();
    } catch (const json::exception& e) {
      throw ValidationError(path + ": " + e.what());
    }
  }

  void finish() const {
    if (node_ == nullptr) return;
    for (const auto& [k, v] : node_->items()) {
      if (!seen_.count(k)) throw ValidationError("config." + name_ + "." + k + ": unknown key");
    }
  }

 private:
  std::string name_;
  const json* node_ = nullptr;
  std::set<std::string> seen_;
};

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("config: expected a JSON object");
  for (const auto& [k, v] : j.items()) {
    static const std::set<std::string> known{"world", "observations", "surrogate", "assimilation", "seeds", "output"};
    if (!known.count(k)) throw ValidationError("config." + k + ": unknown key");
  }
  ExperimentConfig c;
  {
    Section s(j, "world");
    s.get("kind", c.world.kind);
    s.get("n", c.world.n);
    s.get("steps", c.world.steps);
    s.get("dt", c.world.dt);
    s.get("gravity", c.world.gravity);
    s.get("depth", c.world.depth);
    s.get("amplitude", c.world.amplitude);
    s.get("width", c.world.width);
    if (c.world.kind == "lorenz96") {
      c.world.prior_lo = {7.0};
      c.world.prior_hi = {9.0};
    }
    s.get("prior_lo", c.world.prior_lo);
    s.get("prior_hi", c.world.prior_hi);
    s.finish();
  }
  {
    Section s(j, "observations");
    s.get("mode", c.observations.mode);
    s.get("stride", c.observations.stride);
    s.get("interval_steps", c.observations.interval_steps);
    s.get("time_count", c.observations.time_count);
    s.get("point_count", c.observations.point_count);
    s.get("noise_to_signal", c.observations.noise_to_signal);
    s.finish();
  }
  {
    Section s(j, "surrogate");
    s.get("latent_dim", c.surrogate.latent_dim);
    s.get("frame_every", c.surrogate.frame_every);
    s.get("training_trajectories", c.surrogate.training_trajectories);
    s.get("field_hidden", c.surrogate.field_hidden);
    s.get("decoder_hidden", c.surrogate.decoder_hidden);
    s.get("activation", c.surrogate.activation);
    s.get("embedding_frequencies", c.surrogate.embedding_frequencies);
    s.get("epochs", c.surrogate.epochs);
    s.get("learning_rate", c.surrogate.learning_rate);
    s.get("points_per_snapshot", c.surrogate.points_per_snapshot);
    s.get("batch_trajectories", c.surrogate.batch_trajectories);
    s.get("learn_dt", c.surrogate.learn_dt);
    s.finish();
  }
  {
    Section s(j, "assimilation");
    s.get("method", c.assimilation.method);
    s.get("ensemble_size", c.assimilation.ensemble_size);
    s.get("tau", c.assimilation.tau);
    s.get("inflation", c.assimilation.inflation);
    s.get("additive_inflation", c.assimilation.additive_inflation);
    s.get("max_iterations", c.assimilation.max_iterations);
    s.get("gradient_tolerance", c.assimilation.gradient_tolerance);
    s.get("outer_loops", c.assimilation.outer_loops);
    s.get("etkf_inflation", c.assimilation.etkf_inflation);
    s.get("localization_radius", c.assimilation.localization_radius);
    s.finish();
  }
  {
    Section s(j, "seeds");
    s.get("data", c.seeds.data);
    s.get("training", c.seeds.training);
    s.get("assimilation", c.seeds.assimilation);
    s.finish();
  }
  if (j.contains("output")) {
    if (!j.at("output").is_string()) throw ValidationError("config.output: expected a string");
    c.output = j.at("output").get<std::string>();
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  try {
    return config_from_json(j);
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("override '" + assignment + "': expected key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &j;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) throw ValidationError("override '" + assignment + "': " + parts[i] + " is not a section");
    node = &(*node)[parts[i]];
  }
  if (!node->is_object()) {
    throw ValidationError("override '" + assignment + "': " + parts[parts.size() - 2] + " is not a section");
  }
  (*node)[parts.back()] = value;
}

std::string config_hash(const ExperimentConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(to_json(config).dump())));
  return buf;
}

// --- worlds -----------------------------------------------------------------------

namespace {

ShallowWaterConfig shallow_water_config(const WorldSpec& w, const Eigen::VectorXd& param) {
  ShallowWaterConfig sw;
  sw.n = w.n;
  sw.steps = w.steps;
  sw.dt = w.dt;
  sw.gravity = w.gravity;
  sw.depth = w.depth;
  sw.amplitude = w.amplitude;
  sw.width = w.width;
  if (param.size() == 2) sw.center = param;
  return sw;
}

Lorenz96Config lorenz_config(const WorldSpec& w, const Eigen::VectorXd& param) {
  Lorenz96Config c;
  c.dim = w.n;
  c.steps = w.steps;
  c.dt = w.dt;
  if (param.size() == 1) c.forcing = param[0];
  return c;
}

}  // namespace

Eigen::VectorXd sample_prior(const WorldSpec& world, Rng& rng) {
  Eigen::VectorXd u(static_cast<Eigen::Index>(world.prior_lo.size()));
  for (std::size_t i = 0; i < world.prior_lo.size(); ++i) {
    std::uniform_real_distribution<double> d(world.prior_lo[i], world.prior_hi[i]);
    u[static_cast<Eigen::Index>(i)] = world.prior_lo[i] == world.prior_hi[i] ? world.prior_lo[i] : d(rng);
  }
  return u;
}

PhysicalTrajectory simulate_world(const WorldSpec& world, const Eigen::VectorXd& param) {
  if (world.kind == "lorenz96") {
    PhysicalTrajectory t = simulate_lorenz96(lorenz_config(world, param));
    t.true_param = param;
    return t;
  }
  return simulate_shallow_water(shallow_water_config(world, param));
}

std::unique_ptr<StateSpaceModel> make_world_model(const WorldSpec& world) {
  if (world.kind == "lorenz96") return std::make_unique<Lorenz96Model>(lorenz_config(world, Eigen::VectorXd()));
  return std::make_unique<ShallowWaterModel>(shallow_water_config(world, Eigen::VectorXd()));
}

Eigen::VectorXd world_initial_state(const WorldSpec& world, const Eigen::VectorXd& param) {
  if (world.kind == "lorenz96") {
    const Lorenz96Config c = lorenz_config(world, param);
    Eigen::VectorXd x = Eigen::VectorXd::Constant(c.dim, c.forcing);
    x[0] += 0.01;
    return x;
  }
  ShallowWaterModel m(shallow_water_config(world, param));
  return m.initial_state(param);
}

ObservationPlan observation_plan(const ExperimentConfig& c) {
  ObservationPlan p;
  p.mode = observation_mode_from_string(c.observations.mode);
  p.stride = c.observations.stride;
  p.interval_steps = c.observations.interval_steps;
  p.time_count = c.observations.time_count;
  p.point_count = c.observations.point_count;
  p.seed = derive_seed(c.seeds.data, "observations");
  return p;
}

// --- pipeline ---------------------------------------------------------------------

TwinData generate_twin(const ExperimentConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seeds.data, "truth-param"));
  TwinData d;
  d.truth = simulate_world(config.world, sample_prior(config.world, rng));
  d.observations = observe(d.truth, observation_plan(config), config.observations.noise_to_signal);
  return d;
}

TrainingConfig training_config(const ExperimentConfig& c) {
  TrainingConfig t;
  t.latent_dim = c.surrogate.latent_dim;
  t.field_hidden = c.surrogate.field_hidden;
  t.decoder_hidden = c.surrogate.decoder_hidden;
  t.decoder_activation = activation_from_string(c.surrogate.activation);
  t.embedding_frequencies = c.surrogate.embedding_frequencies;
  t.learn_dt = c.surrogate.learn_dt;
  t.epochs = c.surrogate.epochs;
  t.learning_rate = c.surrogate.learning_rate;
  t.points_per_snapshot = c.surrogate.points_per_snapshot;
  t.batch_trajectories = c.surrogate.batch_trajectories;
  t.seed = derive_seed(c.seeds.training, "optimizer");
  return t;
}

TrainingDataset build_training_dataset(const ExperimentConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seeds.training, "dataset"));
  TrainingDataset data;
  data.time_step = config.frame_step();
  for (int n = 0; n < config.surrogate.training_trajectories; ++n) {
    const Eigen::VectorXd u = sample_prior(config.world, rng);
    const PhysicalTrajectory t = simulate_world(config.world, u);
    data.grid = t.grid;
    data.channels = t.channels;
    TrainingTrajectory tr;
    tr.param = u;
    for (std::size_t k = 0; k < t.frames.size(); k += static_cast<std::size_t>(config.surrogate.frame_every)) {
      tr.fields.push_back(t.frames[k]);
    }
    data.trajectories.push_back(std::move(tr));
  }
  return data;
}

TrainingResult train_surrogate(const ExperimentConfig& config, const TrainingCallback& callback) {
  return train(build_training_dataset(config), training_config(config), callback);
}

std::vector<WindowSpec> make_windows(const ExperimentConfig& config, const ObservationSeries& observations) {
  return build_windows(observations, 0.0, config.frame_step(), config.frame_count(), config.horizon_steps());
}

CycleOptions cycle_options(const ExperimentConfig& c) {
  CycleOptions o;
  o.analysis.multiplicative_inflation = c.assimilation.inflation;
  o.analysis.additive_inflation = c.assimilation.additive_inflation;
  o.analysis.lbfgs.max_iterations = c.assimilation.max_iterations;
  o.analysis.lbfgs.gradient_tolerance = c.assimilation.gradient_tolerance;
  o.analysis.seed = derive_seed(c.seeds.assimilation, "inflation");
  o.fourdenvar.outer_loops = c.assimilation.outer_loops;
  o.etkf.inflation = c.assimilation.etkf_inflation;
  o.etkf.localization_radius = c.assimilation.localization_radius;
  return o;
}

namespace {

std::vector<Eigen::VectorXd> prior_draws(const ExperimentConfig& c) {
  Rng rng(derive_seed(c.seeds.assimilation, "prior"));
  std::vector<Eigen::VectorXd> out;
  for (int k = 0; k < c.assimilation.ensemble_size; ++k) out.push_back(sample_prior(c.world, rng));
  return out;
}

}  // namespace

LatentEnsemble initial_latent_ensemble(const ExperimentConfig& config, const SurrogateModel& model) {
  if (model.param_dim != config.param_dim()) {
    throw ValidationError("surrogate param_dim " + std::to_string(model.param_dim) + " vs config " +
                          std::to_string(config.param_dim()));
  }
  if (model.latent_dim != config.surrogate.latent_dim) {
    throw ValidationError("surrogate latent_dim " + std::to_string(model.latent_dim) + " vs config " +
                          std::to_string(config.surrogate.latent_dim));
  }
  LatentEnsemble e;
  e.time = 0.0;
  for (const auto& u : prior_draws(config)) {
    const AugmentedLatentState z{Eigen::VectorXd::Zero(model.latent_dim), u};
    e.members.push_back(integrate(model, z, 0, 0.0, true).states.front());
  }
  return e;
}

FullStateEnsemble initial_full_ensemble(const ExperimentConfig& config) {
  const auto draws = prior_draws(config);
  FullStateEnsemble e;
  e.time = 0.0;
  const Eigen::VectorXd x0 = world_initial_state(config.world, draws.front());
  e.members.resize(x0.size(), static_cast<Eigen::Index>(draws.size()));
  for (std::size_t k = 0; k < draws.size(); ++k) {
    e.members.col(static_cast<Eigen::Index>(k)) = world_initial_state(config.world, draws[k]);
  }
  return e;
}

CycleOutput run_assimilation(const ExperimentConfig& config, const SurrogateModel* model, const TwinData& data,
                             Method method) {
  const auto windows = make_windows(config, data.observations);
  const CycleOptions options = cycle_options(config);
  if (method == Method::levda || (method == Method::free_run && model != nullptr)) {
    if (model == nullptr) throw ValidationError("levda needs a surrogate checkpoint");
    const LatentEnsemble init = initial_latent_ensemble(config, *model);
    return cycle(init, *model, windows, method, data.truth.grid.centers(), options);
  }
  const auto world = make_world_model(config.world);
  return cycle(initial_full_ensemble(config), *world, windows, config.frame_step(), method, options);
}

std::vector<MetricsRow> evaluate_snapshots(const std::vector<CycleSnapshot>& snapshots,
                                           const PhysicalTrajectory& truth, const std::string& label) {
  std::vector<double> gaps;
  for (const auto& s : snapshots) {
    if (truth.frame_index(s.time) < 0) gaps.push_back(s.time);
  }
  if (!gaps.empty()) {
    std::string msg = "truth has no frames at times:";
    for (std::size_t i = 0; i < gaps.size() && i < 20; ++i) msg += " " + format_double(gaps[i]);
    if (gaps.size() > 20) msg += " ... (" + std::to_string(gaps.size()) + " total)";
    throw ValidationError(msg);
  }
  std::vector<MetricsRow> rows;
  for (const auto& s : snapshots) {
    EnsembleSnapshot snap;
    snap.time = s.time;
    snap.members = s.fields;
    snap.truth = truth.frames[static_cast<std::size_t>(truth.frame_index(s.time))];
    const bool with_params = !s.params.empty() && s.params.front().size() == truth.true_param.size() &&
                             truth.true_param.size() > 0;
    rows.push_back(evaluate_snapshot(snap, label, truth.channels, with_params ? &s.params : nullptr,
                                     with_params ? &truth.true_param : nullptr));
  }
  return rows;
}

// --- on-disk stages -----------------------------------------------------------------

namespace {

fs::path out_dir(const ExperimentConfig& c, const StageOptions& o) { return o.out.empty() ? fs::path(c.output) : o.out; }

// Manifest entries are relative to the output directory; wall-times live in
// timings.json so the manifest itself is reproducible.
class Manifest {
 public:
  explicit Manifest(fs::path dir) : dir_(std::move(dir)) {
    if (fs::exists(dir_ / "manifest.json")) manifest_ = json::parse(read_text(dir_ / "manifest.json"));
    if (fs::exists(dir_ / "timings.json")) timings_ = json::parse(read_text(dir_ / "timings.json"));
  }
  json& data() { return manifest_; }
  void artifact(const std::string& key, const std::string& rel) { manifest_["artifacts"][key] = rel; }
  void timing(const std::string& key, double seconds) { timings_[key] = seconds; }
  void save(const ExperimentConfig& config) {
    manifest_["tool_version"] = tool_version();
    manifest_["config_hash"] = config_hash(config);
    write_text(dir_ / "manifest.json", manifest_.dump(1) + "\n");
    write_text(dir_ / "timings.json", timings_.dump(1) + "\n");
  }

 private:
  fs::path dir_;
  json manifest_ = json::object();
  json timings_ = json::object();
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string safe_label(const std::string& label) {
  std::string s;
  for (char ch : label) s += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_') ? ch : '_';
  return s;
}

TwinData load_twin(const fs::path& dir) {
  if (!fs::exists(dir / "truth.bin")) throw ValidationError((dir / "truth.bin").string() + ": missing (run generate)");
  return {read_truth(dir / "truth.bin"), read_observations(dir / "observations.jsonl")};
}

}  // namespace

void stage_generate(const ExperimentConfig& config, const StageOptions& options) {
  const fs::path dir = out_dir(config, options);
  Stopwatch sw;
  const TwinData d = generate_twin(config);
  write_truth(dir / "truth.bin", d.truth);
  write_observations(dir / "observations.jsonl", d.observations);
  write_text(dir / "config.json", to_json(config).dump(2) + "\n");
  Manifest m(dir);
  m.artifact("config", "config.json");
  m.artifact("truth", "truth.bin");
  m.artifact("observations", "observations.jsonl");
  m.data()["truth_rms"] = d.truth.rms();
  m.data()["noise_std"] = d.observations.empty() ? 0.0 : d.observations.front().noise_std[0];
  m.timing("generate", sw.seconds());
  m.save(config);
  if (!options.quiet) {
    std::cout << "generated " << d.truth.frames.size() << " frames, " << d.observations.size()
              << " observation batches in " << dir.string() << "\n";
  }
}

void stage_train(const ExperimentConfig& config, const StageOptions& options) {
  const fs::path dir = out_dir(config, options);
  if (!fs::exists(dir / "truth.bin")) throw ValidationError((dir / "truth.bin").string() + ": missing (run generate)");
  Stopwatch sw;
  std::vector<double> history;
  std::string csv = "epoch,loss\n";
  TrainingResult r;
  try {
    r = train_surrogate(config, [&](int epoch, double loss) {
      history.push_back(loss);
      csv += std::to_string(epoch) + "," + format_double(loss) + "\n";
      if (!options.quiet && (epoch % 50 == 0)) std::cout << "epoch " << epoch << " loss " << loss << "\n";
    });
  } catch (const NumericalError&) {
    write_text(dir / "loss_history.csv", csv);
    throw;
  }
  save_checkpoint(dir / "surrogate.json", r.model);
  write_text(dir / "loss_history.csv", csv);
  Manifest m(dir);
  m.artifact("checkpoint", "surrogate.json");
  m.artifact("loss_history", "loss_history.csv");
  m.data()["initial_training_loss"] = r.loss_history.front();
  m.data()["final_training_loss"] = r.loss_history.back();
  m.timing("train", sw.seconds());
  m.save(config);
  if (!options.quiet) {
    std::cout << "trained surrogate: loss " << r.loss_history.front() << " -> " << r.loss_history.back() << "\n";
  }
}

void stage_assimilate(const ExperimentConfig& config, Method method, const StageOptions& options) {
  const fs::path dir = out_dir(config, options);
  Stopwatch sw;
  const TwinData d = load_twin(dir);
  std::optional<SurrogateModel> model;
  if (is_latent(method)) {
    if (!fs::exists(dir / "surrogate.json")) {
      throw ValidationError((dir / "surrogate.json").string() + ": missing (run train)");
    }
    model = load_checkpoint(dir / "surrogate.json");
    if (model->latent_dim != config.surrogate.latent_dim || model->param_dim != config.param_dim()) {
      throw ValidationError("checkpoint dims (D_s=" + std::to_string(model->latent_dim) + ", D_u=" +
                            std::to_string(model->param_dim) + ") do not match config (D_s=" +
                            std::to_string(config.surrogate.latent_dim) + ", D_u=" +
                            std::to_string(config.param_dim()) + ")");
    }
  }
  const std::string label = options.label.empty() ? to_string(method) : options.label;
  const CycleOutput out = run_assimilation(config, model ? &*model : nullptr, d, method);

  Manifest m(dir);
  const std::string tag = safe_label(label);
  json analyses = json::array();
  for (std::size_t w = 0; w < out.analyses.size(); ++w) {
    char name[32];
    std::snprintf(name, sizeof(name), "window_%03zu.json", w);
    const std::string rel = "analyses/" + tag + "/" + name;
    write_analysis(dir / rel, out.analyses[w], static_cast<int>(w));
    analyses.push_back(rel);
  }
  const std::string ens = "ensembles/" + tag + ".bin";
  write_ensemble_archive(dir / ens, {label, d.truth.channels, out.snapshots});
  m.data()["artifacts"]["analyses"][label] = analyses;
  m.data()["artifacts"]["ensembles"][label] = ens;
  m.timing("assimilate:" + label, sw.seconds());
  m.save(config);
  if (!options.quiet) {
    std::cout << label << ": " << out.snapshots.size() << " snapshots, " << out.analyses.size()
              << " analysis windows\n";
  }
}

void stage_evaluate(const ExperimentConfig& config, const StageOptions& options) {
  const fs::path dir = out_dir(config, options);
  Stopwatch sw;
  const PhysicalTrajectory truth = read_truth(dir / "truth.bin");
  Manifest m(dir);
  std::vector<std::string> labels = options.methods;
  const json& ens = m.data()["artifacts"]["ensembles"];
  if (labels.empty()) {
    for (const auto& [k, v] : ens.items()) labels.push_back(k);
  }
  if (labels.empty()) throw ValidationError((dir / "manifest.json").string() + ": no ensemble archives (run assimilate)");
  std::vector<MetricsRow> rows;
  for (const auto& label : labels) {
    if (!ens.contains(label)) throw ValidationError((dir / "manifest.json").string() + ": no archive for '" + label + "'");
    const EnsembleArchive a = read_ensemble_archive(dir / ens.at(label).get<std::string>());
    const auto r = evaluate_snapshots(a.snapshots, truth, label);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  std::ostringstream csv;
  write_metrics_csv(csv, rows);
  write_text(dir / "metrics.csv", csv.str());
  json summary = json::object();
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  for (const auto& s : summarize(rows)) {
    summary[s.method] = {{"rows", s.rows},
                         {"relative_rmse", opt(s.relative_rmse)},
                         {"member_err_std", opt(s.member_err_std)},
                         {"ser", opt(s.ser)},
                         {"crps", opt(s.crps)},
                         {"param_rmse", opt(s.param_rmse)},
                         {"final_param_rmse", opt(s.final_param_rmse)}};
  }
  write_text(dir / "summary.json", summary.dump(1) + "\n");
  m.artifact("metrics", "metrics.csv");
  m.artifact("summary", "summary.json");
  m.timing("evaluate", sw.seconds());
  m.save(config);
  if (!options.quiet) std::cout << summary.dump(1) << "\n";
}

std::string report(const std::vector<fs::path>& csvs, const std::string& group_by) {
  if (csvs.empty()) throw ValidationError("report: no CSV files given");
  struct Row {
    std::string method;
    std::string group;
    MethodSummary s;
  };
  std::vector<Row> rows;
  for (const auto& p : csvs) {
    std::ifstream is(p);
    if (!is) throw ValidationError(p.string() + ": cannot open");
    for (const auto& s : summarize(read_metrics_csv(is, p.string()))) {
      Row r{s.method, "", s};
      if (!group_by.empty()) {
        const auto open = s.method.find('[');
        if (open != std::string::npos && s.method.back() == ']') {
          r.method = s.method.substr(0, open);
          std::stringstream ss(s.method.substr(open + 1, s.method.size() - open - 2));
          std::string kv;
          while (std::getline(ss, kv, ',')) {
            const auto eq = kv.find('=');
            if (eq != std::string::npos && kv.substr(0, eq) == group_by) r.group = kv.substr(eq + 1);
          }
        }
      }
      rows.push_back(std::move(r));
    }
  }
  auto f = [](const std::optional<double>& v) {
    if (!v) return std::string("NA");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4g", *v);
    return std::string(buf);
  };
  std::ostringstream os;
  os << "| method |";
  if (!group_by.empty()) os << ' ' << group_by << " |";
  os << " relative_rmse | ser | crps | param_rmse | final_param_rmse |\n|---|";
  if (!group_by.empty()) os << "---|";
  os << "---|---|---|---|---|\n";
  for (const auto& r : rows) {
    os << "| " << r.method << " |";
    if (!group_by.empty()) os << ' ' << (r.group.empty() ? "-" : r.group) << " |";
    os << ' ' << f(r.s.relative_rmse) << " | " << f(r.s.ser) << " | " << f(r.s.crps) << " | " << f(r.s.param_rmse)
       << " | " << f(r.s.final_param_rmse) << " |\n";
  }
  return os.str();
}

}  // namespace levda
