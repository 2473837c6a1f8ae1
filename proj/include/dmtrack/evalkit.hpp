#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dmtrack/ekf.hpp"
#include "dmtrack/statespace.hpp"

namespace dmt {

/// Per-step Cartesian positions of one filter run on one tracklet.
struct RunRecord {
  std::vector<Vec2> predicted;
  std::vector<Vec2> posterior;
  std::vector<Vec2> truth;
  std::vector<Vec2> measured;  // measurements converted to Cartesian
  std::size_t first_step = kFirstFilteredStep;

  std::size_t size() const { return truth.size(); }
  void validate() const;
};

RunRecord make_record(const Tracklet& tr, const FilterTrace& trace, const SensorConfig& sensor);

enum class Phase { kPredicted, kPosterior, kMeasured };
const char* phase_name(Phase p);

struct SeriesPoint {
  long t = 0;        // step index
  double rmse = 0.0;
  double lo = 0.0;   // rmse - 2 sd of the per-tracklet error norms, floored at 0
  double hi = 0.0;   // rmse + 2 sd
  std::size_t count = 0;
};

/// Per-step RMSE across tracklets for one phase.
std::vector<SeriesPoint> rmse_series(const std::vector<RunRecord>& records, Phase phase);

/// Root of the mean squared position error pooled over every step and tracklet.
double average_rmse(const std::vector<RunRecord>& records, Phase phase);

/// Pooled RMSE of the converted measurements against truth.
double noise_level(const std::vector<RunRecord>& records);

/// avg_rmse / noise_level(records). Throws std::domain_error when the noise level is 0.
double relative_score(double avg_rmse, const std::vector<RunRecord>& records);

struct MethodScore {
  std::string method;
  double avg_pred = 0.0;
  double rel_pred = 0.0;
  double avg_upd = 0.0;
  double rel_upd = 0.0;
};

struct ScoreTable {
  std::vector<MethodScore> rows;
  double noise_level = 0.0;

  const MethodScore& at(const std::string& method) const;
};

/// Records of several methods over the same test tracklets. The noise level
/// comes from the first method's measurement columns.
using MethodRecords = std::vector<std::pair<std::string, std::vector<RunRecord>>>;

ScoreTable score_methods(const MethodRecords& runs);

/// Writes scores.csv, series_<method>_<pred|upd>.csv, noise_level.csv and
/// summary.txt into `dir`. Throws std::invalid_argument for an empty method set.
void make_report(const std::filesystem::path& dir, const MethodRecords& runs);

/// Reads a scores.csv back into a table (noise level left at 0).
ScoreTable read_scores(const std::filesystem::path& path);

}  // namespace dmt
