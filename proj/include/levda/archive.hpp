#pragma once

// On-disk formats: truth trajectories (binary), observation series (JSON
// lines), surrogate checkpoints and analysis records (JSON), and decoded
// ensemble archives (binary).

#include <filesystem>
#include <string>
#include <vector>

#include "levda/assimilate.hpp"
#include "levda/surrogate.hpp"
#include "levda/worlds.hpp"

namespace levda {

inline constexpr int kTruthFormatVersion = 1;
inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr int kEnsembleFormatVersion = 1;

void write_truth(const std::filesystem::path& path, const PhysicalTrajectory& truth);
PhysicalTrajectory read_truth(const std::filesystem::path& path);

void write_observations(const std::filesystem::path& path, const ObservationSeries& series);
ObservationSeries read_observations(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const SurrogateModel& model);
SurrogateModel load_checkpoint(const std::filesystem::path& path);

/// Per-window analysis record: coefficients, members, objective traces.
void write_analysis(const std::filesystem::path& path, const AnalysisResult& result, int window);

struct EnsembleArchive {
  std::string method;
  int channels = 1;
  std::vector<CycleSnapshot> snapshots;
};

void write_ensemble_archive(const std::filesystem::path& path, const EnsembleArchive& archive);
EnsembleArchive read_ensemble_archive(const std::filesystem::path& path);

/// Writes `text` to `path`, creating parent directories.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace levda
