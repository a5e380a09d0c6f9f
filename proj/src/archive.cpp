#include "levda/archive.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "levda/errors.hpp"

namespace levda {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kTruthMagic[8] = {'L', 'E', 'V', 'D', 'A', 'T', 'R', 'J'};
constexpr char kEnsembleMagic[8] = {'L', 'E', 'V', 'D', 'A', 'E', 'N', 'S'};

class Writer {
 public:
  explicit Writer(const fs::path& path) : path_(path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    os_.open(path, std::ios::binary);
    if (!os_) throw ValidationError(path.string() + ": cannot open for writing");
  }
  template <typename T>
  void put(T v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const char* p, std::size_t n) { os_.write(p, static_cast<std::streamsize>(n)); }
  void vec(const Eigen::VectorXd& v) {
    put<std::int64_t>(v.size());
    bytes(reinterpret_cast<const char*>(v.data()), sizeof(double) * static_cast<std::size_t>(v.size()));
  }
  void str(const std::string& s) {
    put<std::int64_t>(static_cast<std::int64_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void close() {
    os_.close();
    if (!os_) throw ValidationError(path_.string() + ": write failed");
  }

 private:
  fs::path path_;
  std::ofstream os_;
};

class Reader {
 public:
  explicit Reader(const fs::path& path) : path_(path), is_(path, std::ios::binary) {
    if (!is_) throw ValidationError(path.string() + ": cannot open");
  }
  template <typename T>
  T get() {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is_) throw ValidationError(path_.string() + ": truncated file");
    return v;
  }
  void bytes(char* p, std::size_t n) {
    is_.read(p, static_cast<std::streamsize>(n));
    if (!is_) throw ValidationError(path_.string() + ": truncated file");
  }
  Eigen::VectorXd vec() {
    const auto n = get<std::int64_t>();
    if (n < 0 || n > (std::int64_t{1} << 32)) throw ValidationError(path_.string() + ": corrupt vector length");
    Eigen::VectorXd v(n);
    bytes(reinterpret_cast<char*>(v.data()), sizeof(double) * static_cast<std::size_t>(n));
    return v;
  }
  std::string str() {
    const auto n = get<std::int64_t>();
    if (n < 0 || n > 4096) throw ValidationError(path_.string() + ": corrupt string length");
    std::string s(static_cast<std::size_t>(n), '\0');
    bytes(s.data(), s.size());
    return s;
  }
  void magic(const char (&expected)[8], int version) {
    char m[8];
    bytes(m, 8);
    if (std::memcmp(m, expected, 8) != 0) throw ValidationError(path_.string() + ": not a levda archive");
    const auto v = get<std::int32_t>();
    if (v != version) {
      throw ValidationError(path_.string() + ": format version " + std::to_string(v) + ", expected " +
                            std::to_string(version));
    }
  }

 private:
  fs::path path_;
  std::ifstream is_;
};

json to_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd vector_from(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> r(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(j)] = m(i, j);
    rows.push_back(r);
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", rows}};
}

Eigen::MatrixXd matrix_from(const json& j) {
  Eigen::MatrixXd m(j.at("rows").get<Eigen::Index>(), j.at("cols").get<Eigen::Index>());
  const auto& rows = j.at("data");
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const auto r = rows.at(static_cast<std::size_t>(i)).get<std::vector<double>>();
    if (static_cast<Eigen::Index>(r.size()) != m.cols()) throw ValidationError("matrix row has wrong length");
    for (Eigen::Index j2 = 0; j2 < m.cols(); ++j2) m(i, j2) = r[static_cast<std::size_t>(j2)];
  }
  return m;
}

json to_json(const Mlp& m) {
  json layers = json::array();
  for (const auto& l : m.layers) layers.push_back({{"weight", to_json(l.weight)}, {"bias", to_json(l.bias)}});
  return {{"activation", to_string(m.activation)}, {"layers", layers}};
}

Mlp mlp_from(const json& j) {
  Mlp m;
  m.activation = activation_from_string(j.at("activation").get<std::string>());
  for (const auto& l : j.at("layers")) m.layers.push_back({matrix_from(l.at("weight")), vector_from(l.at("bias"))});
  return m;
}

json to_json(const Domain& d) { return {{"dim", d.dim}, {"lo", d.lo}, {"hi", d.hi}}; }

Domain domain_from(const json& j) {
  Domain d;
  d.dim = j.at("dim").get<int>();
  d.lo = j.at("lo").get<std::array<double, 2>>();
  d.hi = j.at("hi").get<std::array<double, 2>>();
  return d;
}

}  // namespace

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError(path.string() + ": cannot open for writing");
  os << text;
  if (!os) throw ValidationError(path.string() + ": write failed");
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError(path.string() + ": cannot open");
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_truth(const fs::path& path, const PhysicalTrajectory& truth) {
  Writer w(path);
  w.bytes(kTruthMagic, 8);
  w.put<std::int32_t>(kTruthFormatVersion);
  const Grid& g = truth.grid;
  w.put<std::int32_t>(g.domain.dim);
  for (int i = 0; i < 2; ++i) w.put<double>(g.domain.lo[i]);
  for (int i = 0; i < 2; ++i) w.put<double>(g.domain.hi[i]);
  w.put<std::int32_t>(g.nx);
  w.put<std::int32_t>(g.ny);
  w.put<std::int32_t>(truth.channels);
  w.put<double>(truth.dt);
  w.put<std::int32_t>(truth.save_every);
  w.put<double>(truth.process_noise_state);
  w.put<double>(truth.process_noise_param);
  w.vec(truth.true_param);
  w.put<std::int64_t>(static_cast<std::int64_t>(truth.frames.size()));
  for (std::size_t k = 0; k < truth.frames.size(); ++k) {
    w.put<double>(truth.times[k]);
    w.vec(truth.frames[k]);
  }
  w.close();
}

PhysicalTrajectory read_truth(const fs::path& path) {
  Reader r(path);
  r.magic(kTruthMagic, kTruthFormatVersion);
  PhysicalTrajectory t;
  t.grid.domain.dim = r.get<std::int32_t>();
  for (int i = 0; i < 2; ++i) t.grid.domain.lo[i] = r.get<double>();
  for (int i = 0; i < 2; ++i) t.grid.domain.hi[i] = r.get<double>();
  t.grid.nx = r.get<std::int32_t>();
  t.grid.ny = r.get<std::int32_t>();
  t.channels = r.get<std::int32_t>();
  t.dt = r.get<double>();
  t.save_every = r.get<std::int32_t>();
  t.process_noise_state = r.get<double>();
  t.process_noise_param = r.get<double>();
  t.true_param = r.vec();
  const auto n = r.get<std::int64_t>();
  if (n < 1) throw ValidationError(path.string() + ": no frames");
  for (std::int64_t k = 0; k < n; ++k) {
    t.times.push_back(r.get<double>());
    t.frames.push_back(r.vec());
    if (t.frames.back().size() != static_cast<Eigen::Index>(t.grid.cells()) * t.channels) {
      throw ValidationError(path.string() + ": frame " + std::to_string(k) + " has wrong size");
    }
  }
  return t;
}

void write_observations(const fs::path& path, const ObservationSeries& series) {
  std::string out;
  for (const auto& b : series) {
    json coords = json::array();
    for (Eigen::Index p = 0; p < b.points(); ++p) coords.push_back(to_json(Eigen::VectorXd(b.coords.col(p))));
    const json j = {{"t", b.time},
                    {"channels", b.channels},
                    {"coords", coords},
                    {"values", to_json(b.values)},
                    {"noise_std", to_json(b.noise_std)}};
    out += j.dump() + "\n";
  }
  write_text(path, out);
}

ObservationSeries read_observations(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError(path.string() + ": cannot open");
  ObservationSeries series;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      ObservationBatch b;
      b.time = j.at("t").get<double>();
      b.channels = j.value("channels", 1);
      const auto& coords = j.at("coords");
      const int dim = coords.empty() ? 2 : static_cast<int>(coords.front().size());
      b.coords.resize(dim, static_cast<Eigen::Index>(coords.size()));
      for (std::size_t p = 0; p < coords.size(); ++p) b.coords.col(static_cast<Eigen::Index>(p)) = vector_from(coords[p]);
      b.values = vector_from(j.at("values"));
      b.noise_std = vector_from(j.at("noise_std"));
      b.validate();
      series.push_back(std::move(b));
    } catch (const json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return series;
}

void save_checkpoint(const fs::path& path, const SurrogateModel& m) {
  json j = {{"format", "levda-surrogate"},
            {"version", kCheckpointFormatVersion},
            {"latent_dim", m.latent_dim},
            {"param_dim", m.param_dim},
            {"channels", m.channels},
            {"domain", to_json(m.domain)},
            {"field", to_json(m.field)},
            {"decoder_kind", to_string(m.decoder_kind)},
            {"decoder", to_json(m.decoder)},
            {"embedding_frequencies", m.embedding_frequencies},
            {"identity_grid", {{"domain", to_json(m.identity_grid.domain)},
                               {"nx", m.identity_grid.nx},
                               {"ny", m.identity_grid.ny}}},
            {"parameter_rule", to_string(m.parameter_rule)},
            {"decay_rate", m.decay_rate},
            {"log_dt", m.log_dt},
            {"learn_dt", m.learn_dt},
            {"time_step", m.time_step},
            {"param_offset", to_json(m.param_offset)},
            {"param_scale", to_json(m.param_scale)},
            {"field_offset", m.field_offset},
            {"field_scale", m.field_scale}};
  write_text(path, j.dump(1) + "\n");
}

SurrogateModel load_checkpoint(const fs::path& path) {
  try {
    const json j = json::parse(read_text(path));
    if (j.at("format") != "levda-surrogate") throw ValidationError(path.string() + ": not a surrogate checkpoint");
    if (j.at("version").get<int>() != kCheckpointFormatVersion) {
      throw ValidationError(path.string() + ": checkpoint version " + j.at("version").dump() + ", expected " +
                            std::to_string(kCheckpointFormatVersion));
    }
    SurrogateModel m;
    m.latent_dim = j.at("latent_dim");
    m.param_dim = j.at("param_dim");
    m.channels = j.at("channels");
    m.domain = domain_from(j.at("domain"));
    m.field = mlp_from(j.at("field"));
    m.decoder_kind = decoder_kind_from_string(j.at("decoder_kind"));
    m.decoder = mlp_from(j.at("decoder"));
    m.embedding_frequencies = j.at("embedding_frequencies");
    m.identity_grid.domain = domain_from(j.at("identity_grid").at("domain"));
    m.identity_grid.nx = j.at("identity_grid").at("nx");
    m.identity_grid.ny = j.at("identity_grid").at("ny");
    m.parameter_rule = parameter_rule_from_string(j.at("parameter_rule"));
    m.decay_rate = j.at("decay_rate");
    m.log_dt = j.at("log_dt");
    m.learn_dt = j.at("learn_dt");
    m.time_step = j.at("time_step");
    m.param_offset = vector_from(j.at("param_offset"));
    m.param_scale = vector_from(j.at("param_scale"));
    m.field_offset = j.at("field_offset");
    m.field_scale = j.at("field_scale");
    m.validate();
    return m;
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void write_analysis(const fs::path& path, const AnalysisResult& r, int window) {
  json members = json::array();
  for (std::size_t k = 0; k < r.members.size(); ++k) {
    const auto& d = r.members[k];
    members.push_back({{"background", to_json(r.background.members[k].stacked())},
                       {"analysis", to_json(r.analysis.members[k].stacked())},
                       {"coefficients", to_json(Eigen::VectorXd(r.coefficients.col(static_cast<Eigen::Index>(k))))},
                       {"warm_start_objective", d.warm_start_objective},
                       {"objective", d.objective},
                       {"trace", d.trace},
                       {"iterations", d.iterations},
                       {"evaluations", d.evaluations},
                       {"converged", d.converged},
                       {"line_search_failed", d.line_search_failed}});
  }
  const json j = {{"window", window},
                  {"time", r.time},
                  {"skipped", r.skipped},
                  {"observation_count", r.observation_count},
                  {"latent_dim", r.analysis.latent_dim()},
                  {"inflation",
                   {{"multiplicative", r.perturbations.inflation.multiplicative},
                    {"additive", r.perturbations.inflation.additive},
                    {"seed", r.perturbations.inflation.seed}}},
                  {"mean", to_json(r.mean)},
                  {"reconstruction_residual", r.reconstruction_residual()},
                  {"members", members}};
  write_text(path, j.dump(1) + "\n");
}

void write_ensemble_archive(const fs::path& path, const EnsembleArchive& a) {
  Writer w(path);
  w.bytes(kEnsembleMagic, 8);
  w.put<std::int32_t>(kEnsembleFormatVersion);
  w.str(a.method);
  w.put<std::int32_t>(a.channels);
  w.put<std::int64_t>(static_cast<std::int64_t>(a.snapshots.size()));
  for (const auto& s : a.snapshots) {
    w.put<double>(s.time);
    w.put<std::int64_t>(static_cast<std::int64_t>(s.fields.size()));
    for (const auto& f : s.fields) w.vec(f);
    w.put<std::int64_t>(static_cast<std::int64_t>(s.params.size()));
    for (const auto& p : s.params) w.vec(p);
  }
  w.close();
}

EnsembleArchive read_ensemble_archive(const fs::path& path) {
  Reader r(path);
  r.magic(kEnsembleMagic, kEnsembleFormatVersion);
  EnsembleArchive a;
  a.method = r.str();
  a.channels = r.get<std::int32_t>();
  const auto n = r.get<std::int64_t>();
  for (std::int64_t i = 0; i < n; ++i) {
    CycleSnapshot s;
    s.time = r.get<double>();
    const auto k = r.get<std::int64_t>();
    for (std::int64_t j = 0; j < k; ++j) s.fields.push_back(r.vec());
    const auto kp = r.get<std::int64_t>();
    for (std::int64_t j = 0; j < kp; ++j) s.params.push_back(r.vec());
    a.snapshots.push_back(std::move(s));
  }
  return a;
}

}  // namespace levda
