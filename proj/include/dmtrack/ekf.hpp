#pragma once

#include <vector>

#include "dmtrack/autodiff.hpp"
#include "dmtrack/simkit.hpp"
#include "dmtrack/statespace.hpp"

namespace dmt {

/// Constant-velocity model driven by continuous white-noise acceleration.
struct CwnaModel {
  double dt = 1.0;  // s
  double q = 1.0;   // m^2/s^3

  void validate() const;
  Mat4 transition() const;
  Mat4 process_noise() const;
};

/// Process noise of a CWNA model with intensity q over dt.
Mat4 cwna_noise(double q, double dt);

/// Linear prediction mean <- F mean, cov <- F P F^T + Q. Advances t by one.
StateEstimate predict_linear(const StateEstimate& prior, const Mat4& F, const Mat4& Q);
StateEstimate predict_cwna(const StateEstimate& prior, const CwnaModel& model);

struct UpdateResult {
  StateEstimate posterior;
  Vec2 innovation;  // bearing component wrapped into (-pi, pi]
  Mat2 S;           // innovation covariance
};

/// Extended Kalman update with the range-bearing model and Joseph-form covariance.
/// Throws NumericalError if S is not positive definite.
UpdateResult ekf_update(const StateEstimate& pred, const Measurement& z,
                        const SensorConfig& sensor);
/// Same with an explicit measurement noise covariance.
UpdateResult ekf_update(const StateEstimate& pred, const Measurement& z,
                        const SensorConfig& sensor, const Mat2& R);

/// Taped counterpart of ekf_update for gradient-based training. `x` is 4x1, `P`
/// 4x4 and `R` 2x2 tape values.
struct TapeUpdate {
  ad::Var x;          // posterior mean
  ad::Var P;          // posterior covariance (Joseph form)
  ad::Var z_pred;     // h(x_pred), 2x1
  ad::Var S;          // innovation covariance
  ad::Var nll;        // nll_term(innovation, S)
};
TapeUpdate ekf_update_tape(ad::Tape& tape, const ad::Var& x, const ad::Var& P,
                           const ad::Var& R, const Measurement& z, const SensorConfig& sensor);

/// Negative log density of a bivariate Gaussian innovation.
double nll_term(const Vec2& innovation, const Mat2& S);

/// Track initialization from the first two measurements: position from the
/// second, velocity by finite difference, covariance by first-order
/// propagation of the measurement noise R. The estimate carries t = z1.t.
StateEstimate init_track(const Measurement& z0, const Measurement& z1, double dt,
                         const SensorConfig& sensor, const Mat2& R);
StateEstimate init_track(const Measurement& z0, const Measurement& z1, double dt,
                         const SensorConfig& sensor);

/// Index of the first step that has a genuine prediction (steps 0 and 1 feed the
/// initializer).
inline constexpr std::size_t kFirstFilteredStep = 2;

/// Estimates of one filter over one tracklet. Entries before kFirstFilteredStep
/// hold the initialization estimate in both sequences.
struct FilterTrace {
  std::vector<StateEstimate> predicted;
  std::vector<StateEstimate> posterior;
  double nll = 0.0;  // summed over filtered steps
};

FilterTrace run_ekf(const Tracklet& tr, const SensorConfig& sensor, const CwnaModel& model);

/// Summed measurement NLL of the EKF over a dataset.
double ekf_dataset_nll(const Dataset& ds, const CwnaModel& model);

/// Chooses q from a log-spaced grid (inclusive bounds) by minimum training NLL.
double tune_cwna_q(const Dataset& ds, double dt, double q_lo = 1e-4, double q_hi = 1e3,
                   int points = 29);

}  // namespace dmt
