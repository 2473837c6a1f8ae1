#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <vector>

#include "dmtrack/autodiff.hpp"
#include "dmtrack/ekf.hpp"
#include "dmtrack/simkit.hpp"
#include "dmtrack/statespace.hpp"

namespace dmt {

enum class ModeKind { kCv, kCt };

/// One motion mode. CT uses a known-rate coordinated turn with CWNA-shaped noise.
struct ImmMode {
  ModeKind kind = ModeKind::kCv;
  double log_q = 0.0;
  double omega = 0.0;  // rad/s, CT only
};

/// Unconstrained IMM parameters: softmax logits for the transition matrix,
/// log process-noise intensities, CT turn rates and log measurement stds.
struct ImmParams {
  Eigen::MatrixXd trans_logits;  // m x m
  std::vector<ImmMode> modes;
  double log_sigma_r = 0.0;
  double log_sigma_a = 0.0;

  std::size_t n_modes() const { return modes.size(); }
  Eigen::MatrixXd transition() const;
  Mat2 R() const;

  /// Flat layout: logits (row-major), then per mode log_q [, omega], then log_sigma_r, log_sigma_a.
  Eigen::VectorXd flatten() const;
  void unflatten(const Eigen::VectorXd& theta);
  std::size_t size() const;
  void validate() const;

  /// Default two-mode set: CV with intensity q0 and CT with intensity q0 and rate omega0.
  /// Transition matrix diagonal p_stay; R from the sensor.
  static ImmParams defaults(double q0, const SensorConfig& sensor, double omega0 = 0.1,
                            double p_stay = 0.95);
  /// Single CV mode, which makes the IMM an EKF.
  static ImmParams single_cv(double q, const SensorConfig& sensor);
};

/// Transition matrix F of a coordinated turn with rate omega (rad/s) over dt.
/// The omega -> 0 limit is the CV transition.
Mat4 ct_transition(double omega, double dt);
Mat4 mode_transition(const ImmMode& mode, double dt);

struct ImmState {
  std::vector<StateEstimate> modes;
  Eigen::VectorXd mu;
};

inline constexpr double kModeProbFloor = 1e-12;

struct MixResult {
  std::vector<StateEstimate> mixed;  // x^{0j}, P^{0j}
  Eigen::VectorXd mu_pred;           // predicted mode probabilities
};

/// Mixing step. Throws NumericalError if a predicted mode probability is zero.
MixResult imm_mix(const ImmState& s, const Eigen::MatrixXd& p);

struct ModeFilterResult {
  StateEstimate predicted;
  StateEstimate posterior;
  Vec2 innovation;
  Mat2 S;
  Vec2 z_pred;
  double log_likelihood = 0.0;  // log N(z; h(x_pred), S)
};

ModeFilterResult imm_mode_filter(const StateEstimate& mixed, const Measurement& z,
                                 const ImmMode& mode, double dt, const Mat2& R,
                                 const SensorConfig& sensor);

/// Moment-matched combination of per-mode estimates with the given weights.
StateEstimate combine_estimates(const std::vector<StateEstimate>& xs, const Eigen::VectorXd& w);

struct CombineResult {
  ImmState state;
  StateEstimate combined;
};

/// Mode-probability update from log likelihoods and combination of posteriors.
/// Probabilities are floored at kModeProbFloor and stay normalized.
CombineResult imm_combine(const std::vector<StateEstimate>& posteriors,
                          const Eigen::VectorXd& log_likelihoods,
                          const Eigen::VectorXd& mu_pred);

struct ImmOptions {
  /// Evaluate the predictive likelihood as a single moment-matched Gaussian
  /// instead of the exact mixture.
  bool moment_matched = false;
};

struct ImmTrace {
  FilterTrace trace;                 // combined estimates
  std::vector<Eigen::VectorXd> mu;   // posterior mode probabilities per step
};

/// Double-precision IMM over one tracklet. The NLL accumulated in trace.nll
/// equals imm_nll for the same inputs.
ImmTrace run_imm(const Tracklet& tr, const SensorConfig& sensor, const ImmParams& params,
                 const ImmOptions& opt = {});

/// Summed negative log predictive likelihood of the measurements, recorded on
/// `tape`. `theta` must be a 1-column tape variable holding params.flatten();
/// `params` supplies the mode structure.
ad::Var imm_nll(ad::Tape& tape, const ad::Var& theta, const ImmParams& params,
                const Tracklet& tr, const SensorConfig& sensor, const ImmOptions& opt = {});

/// Value and gradient of the summed NLL over `batch` tracklets of `ds`.
double imm_nll_grad(const ImmParams& params, const Dataset& ds,
                    const std::vector<std::size_t>& batch, Eigen::VectorXd* grad,
                    const ImmOptions& opt = {});

struct ImmTrainConfig {
  std::size_t steps = 10000;
  std::size_t batch_size = 4;
  double lr = 5e-4;
  bool train_R = true;
  bool plain_gd = false;
  std::uint64_t seed = 0;
  ImmOptions options;
};

struct ImmTrainResult {
  ImmParams params;
  std::vector<double> loss;  // per step, mean NLL per tracklet of the minibatch
  bool aborted = false;      // loss became non-finite; params are the last good ones
};

ImmTrainResult train_imm(const ImmParams& params0, const Dataset& ds,
                         const ImmTrainConfig& cfg);

void save_imm(const std::filesystem::path& path, const ImmParams& params);
ImmParams load_imm(const std::filesystem::path& path);

}  // namespace dmt
