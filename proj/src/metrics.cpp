#include "levda/metrics.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include "levda/errors.hpp"

namespace levda {

const char* const kMetricsHeader = "time,method,relative_rmse,member_err_std,ser,crps,param_rmse";

Eigen::VectorXd EnsembleSnapshot::mean() const {
  Eigen::VectorXd m = Eigen::VectorXd::Zero(truth.size());
  for (const auto& x : members) m += x;
  return m / static_cast<double>(members.size());
}

void EnsembleSnapshot::validate() const {
  if (members.empty()) throw ValidationError("snapshot has no members");
  for (const auto& x : members) {
    if (x.size() != truth.size()) {
      throw ValidationError("snapshot member size " + std::to_string(x.size()) + " != truth size " +
                            std::to_string(truth.size()));
    }
  }
}

std::optional<double> relative_rmse(const EnsembleSnapshot& snap, double floor) {
  snap.validate();
  const double tn = snap.truth.norm();
  if (!(tn > floor)) return std::nullopt;
  return (snap.mean() - snap.truth).norm() / tn;
}

std::optional<std::vector<double>> member_relative_errors(const EnsembleSnapshot& snap, double floor) {
  snap.validate();
  const double tn = snap.truth.norm();
  if (!(tn > floor)) return std::nullopt;
  std::vector<double> e;
  for (const auto& x : snap.members) e.push_back((x - snap.truth).norm() / tn);
  return e;
}

std::optional<double> member_error_std(const EnsembleSnapshot& snap, double floor) {
  const auto e = member_relative_errors(snap, floor);
  if (!e || e->size() < 2) return std::nullopt;
  const Eigen::Map<const Eigen::VectorXd> v(e->data(), static_cast<Eigen::Index>(e->size()));
  const double m = v.mean();
  return std::sqrt((v.array() - m).square().sum() / static_cast<double>(v.size() - 1));
}

std::optional<double> spread_error_ratio(const EnsembleSnapshot& snap, double floor) {
  snap.validate();
  if (snap.size() < 2) throw ValidationError("spread-error ratio needs at least 2 members");
  const Eigen::VectorXd m = snap.mean();
  const double err = (m - snap.truth).norm();
  if (!(err > floor)) return std::nullopt;
  double spread = 0.0;
  for (const auto& x : snap.members) spread += (x - m).squaredNorm();
  return std::sqrt(spread / snap.size()) / err;
}

double crps_energy(const EnsembleSnapshot& snap, int channels) {
  snap.validate();
  if (channels < 1 || snap.truth.size() % channels != 0) throw ValidationError("crps: bad channel count");
  const Eigen::Index locations = snap.truth.size() / channels;
  const int k = snap.size();
  if (locations == 0) return 0.0;
  double total = 0.0;
  std::vector<double> buf(static_cast<std::size_t>(k) * channels);
  for (Eigen::Index p = 0; p < locations; ++p) {
    for (int j = 0; j < k; ++j) {
      for (int c = 0; c < channels; ++c) buf[j * channels + c] = snap.members[j][p * channels + c];
    }
    double skill = 0.0;
    for (int j = 0; j < k; ++j) {
      double s = 0.0;
      for (int c = 0; c < channels; ++c) s += std::pow(buf[j * channels + c] - snap.truth[p * channels + c], 2);
      skill += std::sqrt(s);
    }
    double spread = 0.0;
    for (int j = 0; j < k; ++j) {
      for (int l = j + 1; l < k; ++l) {
        double s = 0.0;
        for (int c = 0; c < channels; ++c) s += std::pow(buf[j * channels + c] - buf[l * channels + c], 2);
        spread += 2.0 * std::sqrt(s);
      }
    }
    total += skill / k - spread / (2.0 * k * k);
  }
  return total / static_cast<double>(locations);
}

double parameter_rmse(const std::vector<Eigen::VectorXd>& members, const Eigen::VectorXd& truth) {
  if (members.empty()) throw ValidationError("parameter rmse: no members");
  Eigen::VectorXd m = Eigen::VectorXd::Zero(truth.size());
  for (const auto& u : members) {
    if (u.size() != truth.size()) throw ValidationError("parameter rmse: dimension mismatch");
    m += u;
  }
  m /= static_cast<double>(members.size());
  return (m - truth).norm();
}

MetricsRow evaluate_snapshot(const EnsembleSnapshot& snap, const std::string& method, int channels,
                             const std::vector<Eigen::VectorXd>* params, const Eigen::VectorXd* true_param) {
  MetricsRow row;
  row.time = snap.time;
  row.method = method;
  row.relative_rmse = relative_rmse(snap);
  row.member_err_std = member_error_std(snap);
  if (snap.size() >= 2) row.ser = spread_error_ratio(snap);
  row.crps = crps_energy(snap, channels);
  if (params != nullptr && true_param != nullptr && !params->empty() && true_param->size() > 0) {
    row.param_rmse = parameter_rmse(*params, *true_param);
  }
  return row;
}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

namespace {

std::string cell(const std::optional<double>& v) { return v ? format_double(*v) : "NA"; }

std::optional<double> parse_cell(const std::string& s, const std::string& source, std::size_t line) {
  if (s == "NA") return std::nullopt;
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw ValidationError(source + ":" + std::to_string(line) + ": cannot parse '" + s + "'");
  }
  return v;
}

}  // namespace

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
  os << "# member_err_std: sample standard deviation (K-1)\n" << kMetricsHeader << "\n";
  for (const auto& r : rows) {
    os << format_double(r.time) << ',' << r.method << ',' << cell(r.relative_rmse) << ',' << cell(r.member_err_std)
       << ',' << cell(r.ser) << ',' << cell(r.crps) << ',' << cell(r.param_rmse) << '\n';
  }
}

std::vector<MetricsRow> read_metrics_csv(std::istream& is, const std::string& source) {
  std::vector<MetricsRow> rows;
  std::string line;
  std::size_t n = 0;
  bool header = false;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != kMetricsHeader) {
        throw ValidationError(source + ": unexpected columns '" + line + "' (expected '" + kMetricsHeader + "')");
      }
      header = true;
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    if (f.size() != 7) throw ValidationError(source + ":" + std::to_string(n) + ": expected 7 columns");
    MetricsRow r;
    r.time = *parse_cell(f[0], source, n);
    r.method = f[1];
    r.relative_rmse = parse_cell(f[2], source, n);
    r.member_err_std = parse_cell(f[3], source, n);
    r.ser = parse_cell(f[4], source, n);
    r.crps = parse_cell(f[5], source, n);
    r.param_rmse = parse_cell(f[6], source, n);
    rows.push_back(std::move(r));
  }
  if (!header) throw ValidationError(source + ": missing header");
  return rows;
}

std::vector<MethodSummary> summarize(const std::vector<MetricsRow>& rows) {
  std::vector<MethodSummary> out;
  struct Acc {
    double sum = 0.0;
    std::size_t n = 0;
    void add(const std::optional<double>& v) {
      if (v) {
        sum += *v;
        ++n;
      }
    }
    std::optional<double> mean() const {
      if (n == 0) return std::nullopt;
      return sum / static_cast<double>(n);
    }
  };
  std::vector<std::array<Acc, 5>> acc;
  for (const auto& r : rows) {
    std::size_t i = 0;
    while (i < out.size() && out[i].method != r.method) ++i;
    if (i == out.size()) {
      out.push_back({});
      out.back().method = r.method;
      acc.emplace_back();
    }
    ++out[i].rows;
    acc[i][0].add(r.relative_rmse);
    acc[i][1].add(r.member_err_std);
    acc[i][2].add(r.ser);
    acc[i][3].add(r.crps);
    acc[i][4].add(r.param_rmse);
    if (r.param_rmse) out[i].final_param_rmse = r.param_rmse;
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].relative_rmse = acc[i][0].mean();
    out[i].member_err_std = acc[i][1].mean();
    out[i].ser = acc[i][2].mean();
    out[i].crps = acc[i][3].mean();
    out[i].param_rmse = acc[i][4].mean();
  }
  return out;
}

}  // namespace levda
