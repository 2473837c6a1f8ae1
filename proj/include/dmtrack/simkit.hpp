#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dmtrack/statespace.hpp"

namespace dmt {

using Rng = std::mt19937_64;

/// Alternating left/right coordinated-turn trajectory generator settings.
struct GctConfig {
  std::size_t n_steps = 100;
  double dt = 1.0;                          // s
  std::size_t half_period = 10;             // steps per turn direction
  std::pair<double, double> turn_rate_deg = {10.0, 15.0};  // deg/s
  Vec2 start_lo = {2000.0, 2000.0};         // m
  Vec2 start_hi = {2100.0, 2100.0};         // m
  double speed = 10.0;                      // m/s
  std::uint64_t seed = 0;

  void validate() const;
};

enum class DatasetRole { kTrain, kTest };

struct Dataset {
  std::vector<Tracklet> tracklets;
  SensorConfig sensor;
  DatasetRole role = DatasetRole::kTrain;

  bool empty() const { return tracklets.empty(); }
  std::size_t size() const { return tracklets.size(); }
};

/// Independent RNG stream for tracklet `index` of an experiment seeded with `seed`.
Rng stream_rng(std::uint64_t seed, std::uint64_t index);

/// Ground truth only (`meas` left empty). The turn rate is drawn once per
/// trajectory; heading changes by +rate*dt for `half_period` steps, then by
/// -rate*dt, repeating. Positions follow the exact arc between steps.
Tracklet generate_gct(const GctConfig& cfg, Rng& rng);

/// Variant with a fixed turn rate (deg/s) and starting state; `alternate`
/// false keeps turning in one direction. Used for closed-form checks.
Tracklet generate_gct_fixed(const GctConfig& cfg, double turn_rate_deg, const Vec2& start,
                            double heading, bool alternate = true);

/// Adds independent Gaussian range/bearing noise to the noiseless measurement
/// of each truth state. Bearings are re-wrapped into (-pi, pi].
Tracklet simulate_measurements(const Tracklet& truth, const SensorConfig& sensor, Rng& rng);

/// `n_tracklets` independent trajectories with measurements. Tracklet i uses
/// stream_rng(seed, i), so the result does not depend on generation order.
Dataset make_dataset(std::size_t n_tracklets, const GctConfig& cfg,
                     const SensorConfig& sensor, std::uint64_t seed,
                     DatasetRole role = DatasetRole::kTrain);

/// Splits a trajectory CSV (`t,x,y,vx,vy`) into consecutive non-overlapping
/// tracklets of `tracklet_len` rows, dropping the remainder, and synthesizes
/// measurements. dt is taken from the `t` column spacing.
Dataset ingest_csv(const std::filesystem::path& traj_path, const SensorConfig& sensor,
                   std::size_t tracklet_len, Rng& rng);

/// Dataset directory layout: truth_####.csv and meas_####.csv per tracklet.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir, const SensorConfig& sensor,
                     DatasetRole role);

// Interchange CSV formats.
struct TrajectoryRow {
  double t;
  Vec4 state;
};
std::vector<TrajectoryRow> read_trajectory_csv(const std::filesystem::path& path);
void write_trajectory_csv(const std::filesystem::path& path, const Tracklet& tr);
std::vector<Measurement> read_measurement_csv(const std::filesystem::path& path);
void write_measurement_csv(const std::filesystem::path& path,
                           const std::vector<Measurement>& meas);

}  // namespace dmt
