#pragma once

// Ensemble verification metrics. Values that are undefined for a snapshot
// (zero-norm truth, zero error) are returned as empty optionals.

#include <Eigen/Dense>

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace levda {

struct EnsembleSnapshot {
  double time = 0.0;
  std::vector<Eigen::VectorXd> members;
  Eigen::VectorXd truth;

  int size() const { return static_cast<int>(members.size()); }
  Eigen::VectorXd mean() const;
  /// Throws ValidationError on K < 1 or a shape mismatch.
  void validate() const;
};

inline constexpr double kMetricFloor = 1e-12;

/// |mean - truth| / |truth|.
std::optional<double> relative_rmse(const EnsembleSnapshot& snap, double floor = kMetricFloor);

/// |x_k - truth| / |truth| for every member.
std::optional<std::vector<double>> member_relative_errors(const EnsembleSnapshot& snap, double floor = kMetricFloor);

/// Sample (K - 1) standard deviation of the member-wise relative errors.
std::optional<double> member_error_std(const EnsembleSnapshot& snap, double floor = kMetricFloor);

/// sqrt(1/K sum |x_k - mean|^2) / |mean - truth|. Requires K >= 2.
std::optional<double> spread_error_ratio(const EnsembleSnapshot& snap, double floor = kMetricFloor);

/// Energy score per location over `channels` consecutive values, averaged
/// over locations.
double crps_energy(const EnsembleSnapshot& snap, int channels = 1);

/// |mean(u) - u*|.
double parameter_rmse(const std::vector<Eigen::VectorXd>& members, const Eigen::VectorXd& truth);

struct MetricsRow {
  double time = 0.0;
  std::string method;
  std::optional<double> relative_rmse;
  std::optional<double> member_err_std;
  std::optional<double> ser;
  std::optional<double> crps;
  std::optional<double> param_rmse;
};

/// All metrics of one snapshot; param_rmse only when parameters are given.
MetricsRow evaluate_snapshot(const EnsembleSnapshot& snap, const std::string& method, int channels = 1,
                             const std::vector<Eigen::VectorXd>* params = nullptr,
                             const Eigen::VectorXd* true_param = nullptr);

extern const char* const kMetricsHeader;

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows);
/// Throws ValidationError when the header differs from kMetricsHeader.
std::vector<MetricsRow> read_metrics_csv(std::istream& is, const std::string& source = "<stream>");

struct MethodSummary {
  std::string method;
  std::size_t rows = 0;
  std::optional<double> relative_rmse;
  std::optional<double> member_err_std;
  std::optional<double> ser;
  std::optional<double> crps;
  std::optional<double> param_rmse;        // time average
  std::optional<double> final_param_rmse;  // last defined value
};

/// Arithmetic mean of each column over its defined values, per method in
/// order of first appearance.
std::vector<MethodSummary> summarize(const std::vector<MetricsRow>& rows);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

}  // namespace levda
