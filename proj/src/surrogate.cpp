#include "levda/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "levda/errors.hpp"
#include "levda/optim.hpp"

namespace levda {

using ad::ArrayD;
using ad::TapeD;
using ad::VarD;

std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "sine"; }
std::string to_string(DecoderKind k) { return k == DecoderKind::mlp ? "mlp" : "nearest-cell"; }
std::string to_string(ParameterRule r) {
  return r == ParameterRule::static_params ? "static" : "linear-decay";
}

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "sine") return Activation::sine;
  throw ValidationError("unknown activation '" + s + "'");
}

DecoderKind decoder_kind_from_string(const std::string& s) {
  if (s == "mlp") return DecoderKind::mlp;
  if (s == "nearest-cell") return DecoderKind::nearest_cell;
  throw ValidationError("unknown decoder kind '" + s + "'");
}

ParameterRule parameter_rule_from_string(const std::string& s) {
  if (s == "static") return ParameterRule::static_params;
  if (s == "linear-decay") return ParameterRule::linear_decay;
  throw ValidationError("unknown parameter rule '" + s + "'");
}

Eigen::Index Mlp::parameter_count() const {
  Eigen::Index n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

Mlp Mlp::glorot(const std::vector<int>& sizes, Activation activation, Rng& rng) {
  Mlp m;
  m.activation = activation;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    const int fan_in = sizes[i];
    const int fan_out = sizes[i + 1];
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    DenseLayer l;
    l.weight.resize(fan_out, fan_in);
    for (Eigen::Index j = 0; j < l.weight.size(); ++j) l.weight.data()[j] = dist(rng);
    l.bias = Eigen::VectorXd::Zero(fan_out);
    m.layers.push_back(std::move(l));
  }
  return m;
}

Eigen::VectorXd AugmentedLatentState::stacked() const {
  Eigen::VectorXd z(size());
  z << s, u;
  return z;
}

AugmentedLatentState AugmentedLatentState::split(const Eigen::Ref<const Eigen::VectorXd>& z,
                                                 Eigen::Index latent_dim) {
  return {z.head(latent_dim), z.tail(z.size() - latent_dim)};
}

int SurrogateModel::coordinate_features() const { return domain.dim * (1 + 2 * embedding_frequencies); }

void SurrogateModel::validate() const {
  if (latent_dim < 1 || param_dim < 0 || channels < 1) throw ValidationError("surrogate: bad dimensions");
  if (field.inputs() != latent_dim + param_dim || field.outputs() != latent_dim) {
    throw ValidationError("surrogate: vector field maps " + std::to_string(field.inputs()) + " -> " +
                          std::to_string(field.outputs()) + ", expected " +
                          std::to_string(latent_dim + param_dim) + " -> " + std::to_string(latent_dim));
  }
  if (decoder_kind == DecoderKind::mlp) {
    if (decoder.inputs() != latent_dim + coordinate_features() || decoder.outputs() != channels) {
      throw ValidationError("surrogate: decoder shape mismatch");
    }
  } else if (identity_grid.cells() != latent_dim || channels != 1) {
    throw ValidationError("surrogate: nearest-cell decoder needs latent_dim == grid cells and one channel");
  }
  if (param_offset.size() != param_dim || param_scale.size() != param_dim ||
      (param_scale.array() <= 0.0).any()) {
    throw ValidationError("surrogate: parameter normalization mismatch");
  }
  if (!std::isfinite(log_dt) || !parameters().allFinite()) throw ValidationError("surrogate: non-finite weights");
}

Eigen::VectorXd SurrogateModel::parameters() const {
  const Eigen::Index n = field.parameter_count() + decoder.parameter_count() + (learn_dt ? 1 : 0);
  Eigen::VectorXd flat(n);
  Eigen::Index o = 0;
  for (const Mlp* m : {&field, &decoder}) {
    for (const auto& l : m->layers) {
      flat.segment(o, l.weight.size()) = l.weight.reshaped();
      o += l.weight.size();
      flat.segment(o, l.bias.size()) = l.bias;
      o += l.bias.size();
    }
  }
  if (learn_dt) flat[o] = log_dt;
  return flat;
}

void SurrogateModel::set_parameters(const Eigen::Ref<const Eigen::VectorXd>& flat) {
  Eigen::Index o = 0;
  for (Mlp* m : {&field, &decoder}) {
    for (auto& l : m->layers) {
      l.weight.reshaped() = flat.segment(o, l.weight.size());
      o += l.weight.size();
      l.bias = flat.segment(o, l.bias.size());
      o += l.bias.size();
    }
  }
  if (learn_dt) log_dt = flat[o];
}

SurrogateModel make_linear_surrogate(const Eigen::MatrixXd& a, const Eigen::MatrixXd& c, const Eigen::VectorXd& b,
                                     double dt, const Grid& grid) {
  SurrogateModel m;
  m.latent_dim = static_cast<int>(a.rows());
  m.param_dim = static_cast<int>(c.cols());
  m.channels = 1;
  m.domain = grid.domain;
  DenseLayer l;
  l.weight.resize(a.rows(), a.cols() + c.cols());
  l.weight << a, c;
  l.bias = b;
  m.field.layers.push_back(std::move(l));
  m.decoder_kind = DecoderKind::nearest_cell;
  m.identity_grid = grid;
  m.log_dt = std::log(dt);
  m.time_step = dt;
  m.param_offset = Eigen::VectorXd::Zero(m.param_dim);
  m.param_scale = Eigen::VectorXd::Ones(m.param_dim);
  m.validate();
  return m;
}

Eigen::MatrixXd coordinate_features(const Domain& domain, const Eigen::MatrixXd& coords, int frequencies) {
  if (coords.rows() != domain.dim) throw ValidationError("coordinates have wrong spatial dimension");
  const Eigen::Index d = domain.dim;
  Eigen::MatrixXd f(d * (1 + 2 * frequencies), coords.cols());
  for (Eigen::Index p = 0; p < coords.cols(); ++p) {
    if (!domain.contains(coords.col(p))) throw ValidationError("decode: coordinate outside domain");
    const Eigen::VectorXd x = domain.normalize(coords.col(p));
    f.col(p).head(d) = x;
    for (int j = 0; j < frequencies; ++j) {
      const double w = std::numbers::pi * std::ldexp(1.0, j);
      f.col(p).segment(d * (1 + 2 * j), d) = (w * x.array()).sin().matrix();
      f.col(p).segment(d * (2 + 2 * j), d) = (w * x.array()).cos().matrix();
    }
  }
  return f;
}

// --- taped model ------------------------------------------------------------

TapedSurrogate::TapedSurrogate(TapeD& tape, const SurrogateModel& model, bool trainable)
    : tape_(&tape), model_(&model), trainable_(trainable) {
  auto bind = [&](const auto& value) { return trainable ? tape.leaf(value) : tape.constant(value); };
  for (const auto& l : model.field.layers) field_.push_back({bind(l.weight), {}, bind(l.bias)});
  if (model.decoder_kind == DecoderKind::mlp) {
    for (std::size_t i = 0; i < model.decoder.layers.size(); ++i) {
      const auto& l = model.decoder.layers[i];
      if (i == 0) {
        const Eigen::Index ds = model.latent_dim;
        decoder_.push_back({bind(l.weight.rightCols(l.weight.cols() - ds)), bind(l.weight.leftCols(ds)),
                            bind(l.bias)});
      } else {
        decoder_.push_back({bind(l.weight), {}, bind(l.bias)});
      }
    }
  }
  if (trainable && model.learn_dt) {
    log_dt_ = tape.leaf(ArrayD::Constant(1, 1, model.log_dt));
    dt_ = ad::exp(log_dt_);
    dt_variable_ = true;
  } else {
    dt_ = tape.scalar_constant(model.dt());
  }
  if (model.param_dim > 0) {
    param_offset_ = tape.constant(model.param_offset);
    param_inv_scale_ = tape.constant(model.param_scale.cwiseInverse());
  }
}

VarD TapedSurrogate::run_mlp(const std::vector<Layer>& layers, Activation act, VarD x, std::size_t first) const {
  for (std::size_t i = first; i < layers.size(); ++i) {
    x = ad::affine(layers[i].weight, x, layers[i].bias);
    if (i + 1 < layers.size()) x = act == Activation::tanh ? ad::tanh(x) : ad::sin(x);
  }
  return x;
}

VarD TapedSurrogate::vector_field(const VarD& s, const VarD& u) const {
  VarD in = s;
  if (model_->param_dim > 0) {
    const VarD un = ad::cwise_product(u - param_offset_, param_inv_scale_);
    in = ad::concat({s, un});
  }
  return run_mlp(field_, model_->field.activation, in, 0);
}

VarD TapedSurrogate::step_param(const VarD& u) const {
  if (model_->param_dim == 0 || model_->parameter_rule == ParameterRule::static_params) return u;
  const VarD rate = (-model_->decay_rate) * u;
  return u + (dt_variable_ ? ad::scale_by(dt_, rate) : model_->dt() * rate);
}

VarD TapedSurrogate::decode(const VarD& s, const Eigen::MatrixXd& coords) const {
  if (model_->decoder_kind == DecoderKind::nearest_cell) return decode_features(s, s, coords);
  const VarD features = tape_->constant(coordinate_features(model_->domain, coords, model_->embedding_frequencies));
  return decode_features(s, features, coords);
}

VarD TapedSurrogate::decode_features(const VarD& s, const VarD& features, const Eigen::MatrixXd& coords) const {
  const SurrogateModel& m = *model_;
  const Eigen::Index points = coords.cols();
  if (m.decoder_kind == DecoderKind::nearest_cell) {
    ArrayD select = ArrayD::Zero(points, m.latent_dim);
    for (Eigen::Index p = 0; p < points; ++p) {
      if (!m.domain.contains(coords.col(p))) throw ValidationError("decode: coordinate outside domain");
      select(p, m.identity_grid.nearest_cell(coords.col(p))) = 1.0;
    }
    return ad::matmul(tape_->constant(std::move(select)), s);
  }
  const Layer& first = decoder_.front();
  const VarD bias = ad::affine(first.latent_weight, s, first.bias);
  VarD h = ad::affine(first.weight, features, bias);
  if (decoder_.size() > 1) h = m.decoder.activation == Activation::tanh ? ad::tanh(h) : ad::sin(h);
  VarD out = run_mlp(decoder_, m.decoder.activation, h, 1);
  if (m.field_scale != 1.0) out = m.field_scale * out;
  if (m.field_offset != 0.0) out = out + tape_->constant(ArrayD::Constant(out.rows(), out.cols(), m.field_offset));
  return ad::reshape(out, points * m.channels, 1);
}

Eigen::VectorXd TapedSurrogate::flat_gradient(const ad::GradientD& grad) const {
  Eigen::VectorXd flat = Eigen::VectorXd::Zero(model_->parameters().size());
  Eigen::Index o = 0;
  auto put = [&](const VarD& v) {
    const ArrayD g = grad.wrt(v);
    flat.segment(o, g.size()) = g.reshaped();
    o += g.size();
  };
  for (const auto& l : field_) {
    put(l.weight);
    put(l.bias);
  }
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const auto& l = decoder_[i];
    if (i == 0) {
      // Stored weight is [latent | coordinate] column blocks.
      const ArrayD gl = grad.wrt(l.latent_weight);
      const ArrayD gc = grad.wrt(l.weight);
      ArrayD full(gl.rows(), gl.cols() + gc.cols());
      full << gl, gc;
      flat.segment(o, full.size()) = full.reshaped();
      o += full.size();
    } else {
      put(l.weight);
    }
    put(l.bias);
  }
  if (dt_variable_) flat[o] = grad.wrt(log_dt_)(0, 0);
  return flat;
}

// --- integration ------------------------------------------------------------

TapedTrajectory integrate(const TapedSurrogate& model, const VarD& s0, const VarD& u0, int steps, double t0,
                          bool shifted) {
  if (steps < 0) throw ValidationError("integrate: steps must be >= 0");
  const SurrogateModel& m = model.model();
  if (s0.rows() != m.latent_dim || s0.cols() != 1 || u0.rows() != m.param_dim) {
    throw ValidationError("integrate: initial state has wrong dimension");
  }
  if (shifted && !s0.value().isZero(0.0)) throw ValidationError("integrate: shifted convention needs s_{-1} = 0");

  auto euler = [&](const VarD& s, const VarD& f) {
    return s + (model.dt_is_variable() ? ad::scale_by(model.dt(), f) : m.dt() * f);
  };
  auto check = [](const VarD& s, int k) {
    if (!s.value().allFinite()) {
      throw NumericalError("integrate: non-finite latent state at step " + std::to_string(k), k);
    }
  };

  TapedTrajectory traj;
  traj.t0 = t0;
  traj.time_step = m.time_step;
  VarD s = s0;
  VarD u = u0;
  if (shifted) {
    const VarD f = model.vector_field(s, u);
    s = euler(s, f);
    u = model.step_param(u);
    check(s, 0);
  }
  traj.s.reserve(steps + 1);
  for (int k = 0;; ++k) {
    const VarD f = model.vector_field(s, u);
    traj.s.push_back(s);
    traj.u.push_back(u);
    traj.ds.push_back(f);
    if (k == steps) break;
    s = euler(s, f);
    u = model.step_param(u);
    check(s, k + 1);
  }
  return traj;
}

std::pair<int, double> locate_time(double t0, double time_step, int count, double t) {
  const double f = (t - t0) / time_step;
  const double last = count - 1;
  const double tol = 1e-9;
  if (count < 1 || f < -tol || f > last + tol) {
    throw ValidationError("time " + std::to_string(t) + " outside trajectory span [" + std::to_string(t0) + ", " +
                          std::to_string(t0 + last * time_step) + "]");
  }
  double k = std::floor(f);
  double a = f - k;
  if (a > 1.0 - tol) {
    k += 1.0;
    a = 0.0;
  } else if (a < tol) {
    a = 0.0;
  }
  if (k > last) k = last;
  if (k < 0) k = 0;
  return {static_cast<int>(k), a};
}

VarD interpolate(const TapedTrajectory& traj, const TapedSurrogate& model, double t) {
  const auto [k, a] = locate_time(traj.t0, traj.time_step, static_cast<int>(traj.s.size()), t);
  if (a == 0.0) return traj.s[k];
  if (model.dt_is_variable()) return traj.s[k] + ad::scale_by(model.dt(), a * traj.ds[k]);
  return traj.s[k] + (a * model.model().dt()) * traj.ds[k];
}

LatentTrajectory integrate(const SurrogateModel& model, const AugmentedLatentState& z0, int steps, double t0,
                           bool shifted) {
  TapeD tape;
  TapedSurrogate tm(tape, model, false);
  const TapedTrajectory tt = integrate(tm, tape.constant(z0.s), tape.constant(z0.u), steps, t0, shifted);
  LatentTrajectory out;
  out.dt = model.dt();
  out.time_step = model.time_step;
  out.t0 = t0;
  for (std::size_t k = 0; k < tt.s.size(); ++k) {
    out.states.push_back({tt.s[k].value(), tt.u[k].value()});
    out.derivatives.push_back(tt.ds[k].value());
  }
  return out;
}

Eigen::VectorXd interpolate(const LatentTrajectory& traj, double t) {
  const auto [k, a] = locate_time(traj.t0, traj.time_step, static_cast<int>(traj.states.size()), t);
  if (a == 0.0) return traj.states[k].s;
  return traj.states[k].s + (a * traj.dt) * traj.derivatives[k];
}

Eigen::VectorXd decode(const SurrogateModel& model, const Eigen::VectorXd& s, const Eigen::MatrixXd& coords) {
  TapeD tape;
  TapedSurrogate tm(tape, model, false);
  return tm.decode(tape.constant(s), coords).value();
}

// --- training ---------------------------------------------------------------

void TrainingDataset::validate() const {
  if (trajectories.empty()) throw ValidationError("training dataset is empty");
  const std::size_t frames = trajectories.front().fields.size();
  const Eigen::Index param_dim = trajectories.front().param.size();
  for (const auto& t : trajectories) {
    if (t.fields.size() != frames || frames == 0) throw ValidationError("training trajectories differ in length");
    if (t.param.size() != param_dim) throw ValidationError("training trajectories differ in parameter size");
    for (const auto& f : t.fields) {
      if (f.size() != static_cast<Eigen::Index>(grid.cells()) * channels) {
        throw ValidationError("training field has wrong size");
      }
    }
  }
  if (!(time_step > 0.0)) throw ValidationError("training time_step must be > 0");
}

SurrogateModel initialize_surrogate(const TrainingDataset& data, const TrainingConfig& config) {
  data.validate();
  if (config.latent_dim < 1) throw ValidationError("training: latent_dim must be >= 1");
  Rng rng(derive_seed(config.seed, "surrogate-init"));
  SurrogateModel m;
  m.latent_dim = config.latent_dim;
  m.param_dim = static_cast<int>(data.trajectories.front().param.size());
  m.channels = data.channels;
  m.domain = data.grid.domain;
  m.embedding_frequencies = config.embedding_frequencies;
  m.parameter_rule = config.parameter_rule;
  m.decay_rate = config.decay_rate;
  m.learn_dt = config.learn_dt;
  m.time_step = data.time_step;
  m.log_dt = std::log(data.time_step);

  std::vector<int> fs{m.latent_dim + m.param_dim};
  fs.insert(fs.end(), config.field_hidden.begin(), config.field_hidden.end());
  fs.push_back(m.latent_dim);
  m.field = Mlp::glorot(fs, Activation::tanh, rng);

  std::vector<int> ds{m.latent_dim + m.coordinate_features()};
  ds.insert(ds.end(), config.decoder_hidden.begin(), config.decoder_hidden.end());
  ds.push_back(m.channels);
  m.decoder = Mlp::glorot(ds, config.decoder_activation, rng);

  // Normalization from the data: parameters to unit scale, fields to unit RMS.
  const std::size_t n = data.trajectories.size();
  m.param_offset = Eigen::VectorXd::Zero(m.param_dim);
  m.param_scale = Eigen::VectorXd::Ones(m.param_dim);
  if (m.param_dim > 0) {
    for (const auto& t : data.trajectories) m.param_offset += t.param;
    m.param_offset /= static_cast<double>(n);
    Eigen::VectorXd var = Eigen::VectorXd::Zero(m.param_dim);
    for (const auto& t : data.trajectories) var += (t.param - m.param_offset).cwiseAbs2();
    var /= static_cast<double>(n);
    for (int i = 0; i < m.param_dim; ++i) m.param_scale[i] = var[i] > 1e-24 ? std::sqrt(var[i]) : 1.0;
  }
  double sum = 0.0;
  double sq = 0.0;
  double count = 0.0;
  for (const auto& t : data.trajectories) {
    for (const auto& f : t.fields) {
      sum += f.sum();
      sq += f.squaredNorm();
      count += static_cast<double>(f.size());
    }
  }
  const double mean = sum / count;
  const double var = std::max(sq / count - mean * mean, 0.0);
  m.field_offset = mean;
  m.field_scale = var > 1e-24 ? std::sqrt(var) : 1.0;
  m.validate();
  return m;
}

namespace {

using SampleSet = std::vector<std::vector<int>>;  // per time: cell indices

std::vector<int> sample_cells(int cells, int count, Rng& rng) {
  std::vector<int> idx(cells);
  std::iota(idx.begin(), idx.end(), 0);
  if (count <= 0 || count >= cells) return idx;
  // Partial Fisher-Yates.
  for (int i = 0; i < count; ++i) {
    std::uniform_int_distribution<int> pick(i, cells - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Loss and (optionally) gradient contribution of one trajectory:
// sum_k mean_{xi in samples[k]} ||xhat - x||^2.
double trajectory_loss(const SurrogateModel& model, const TrainingDataset& data, const TrainingTrajectory& traj,
                       const SampleSet& samples, const Eigen::MatrixXd& centers, Eigen::VectorXd* grad) {
  TapeD tape;
  TapedSurrogate tm(tape, model, grad != nullptr);
  const int steps = static_cast<int>(traj.fields.size()) - 1;
  const TapedTrajectory tt = integrate(tm, tape.constant(Eigen::VectorXd::Zero(model.latent_dim)),
                                       tape.constant(traj.param), steps, 0.0, true);
  std::vector<VarD> terms;
  terms.reserve(traj.fields.size());
  for (int k = 0; k <= steps; ++k) {
    const auto& cells = samples[k];
    Eigen::MatrixXd coords(centers.rows(), static_cast<Eigen::Index>(cells.size()));
    Eigen::VectorXd target(static_cast<Eigen::Index>(cells.size()) * data.channels);
    for (std::size_t p = 0; p < cells.size(); ++p) {
      coords.col(static_cast<Eigen::Index>(p)) = centers.col(cells[p]);
      for (int c = 0; c < data.channels; ++c) {
        target[static_cast<Eigen::Index>(p) * data.channels + c] =
            traj.fields[k][static_cast<Eigen::Index>(cells[p]) * data.channels + c];
      }
    }
    const VarD pred = tm.decode(tt.s[k], coords);
    const VarD err = pred - tape.constant(target);
    terms.push_back((1.0 / static_cast<double>(cells.size())) * ad::squared_norm(err));
  }
  VarD loss = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) loss = loss + terms[i];
  if (grad != nullptr) *grad = tm.flat_gradient(tape.backward(loss));
  return loss.value()(0, 0);
}

}  // namespace

double training_loss(const SurrogateModel& model, const TrainingDataset& data,
                     const std::vector<std::vector<std::vector<int>>>& samples) {
  const Eigen::MatrixXd centers = data.grid.centers();
  double total = 0.0;
  for (std::size_t n = 0; n < data.trajectories.size(); ++n) {
    total += trajectory_loss(model, data, data.trajectories[n], samples[n], centers, nullptr);
  }
  return total / static_cast<double>(data.trajectories.size());
}

TrainingResult train(const TrainingDataset& data, const TrainingConfig& config, const TrainingCallback& callback) {
  if (config.epochs < 0 || config.learning_rate <= 0.0) {
    throw ValidationError("training: epochs >= 0 and learning_rate > 0 required");
  }
  TrainingResult result;
  result.model = initialize_surrogate(data, config);
  SurrogateModel& model = result.model;

  const std::size_t n_traj = data.trajectories.size();
  const std::size_t batch = config.batch_trajectories > 0
                                ? std::min<std::size_t>(static_cast<std::size_t>(config.batch_trajectories), n_traj)
                                : n_traj;
  const int frames = static_cast<int>(data.trajectories.front().fields.size());
  const Eigen::MatrixXd centers = data.grid.centers();
  Rng sample_rng(derive_seed(config.seed, "training-points"));
  Rng order_rng(derive_seed(config.seed, "training-order"));

  auto draw = [&]() {
    std::vector<SampleSet> s(n_traj, SampleSet(frames));
    for (auto& traj : s) {
      for (auto& k : traj) k = sample_cells(data.grid.cells(), config.points_per_snapshot, sample_rng);
    }
    return s;
  };

  Eigen::VectorXd params = model.parameters();
  Adam adam(params.size(), AdamOptions{config.learning_rate});
  std::vector<std::size_t> order(n_traj);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch <= config.epochs; ++epoch) {
    const std::vector<SampleSet> samples = draw();
    if (epoch == config.epochs) {
      const double loss = training_loss(model, data, samples);
      if (!std::isfinite(loss)) throw NumericalError("training: non-finite loss at epoch " + std::to_string(epoch), epoch);
      result.loss_history.push_back(loss);
      if (callback) callback(epoch, loss);
      break;
    }
    if (batch < n_traj) std::shuffle(order.begin(), order.end(), order_rng);
    double epoch_loss = 0.0;
    for (std::size_t b0 = 0; b0 < n_traj; b0 += batch) {
      const std::size_t b1 = std::min(n_traj, b0 + batch);
      Eigen::VectorXd grad = Eigen::VectorXd::Zero(params.size());
      Eigen::VectorXd g;
      double batch_loss = 0.0;
      for (std::size_t i = b0; i < b1; ++i) {
        const std::size_t n = order[i];
        batch_loss += trajectory_loss(model, data, data.trajectories[n], samples[n], centers, &g);
        grad += g;
      }
      const double scale = 1.0 / static_cast<double>(b1 - b0);
      epoch_loss += batch_loss;
      if (!std::isfinite(batch_loss) || !grad.allFinite()) {
        throw NumericalError("training: non-finite loss at epoch " + std::to_string(epoch), epoch);
      }
      adam.step(params, scale * grad);
      model.set_parameters(params);
    }
    epoch_loss /= static_cast<double>(n_traj);
    result.loss_history.push_back(epoch_loss);
    if (callback) callback(epoch, epoch_loss);
  }
  return result;
}

}  // namespace levda
