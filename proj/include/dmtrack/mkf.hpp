#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <vector>

#include "dmtrack/autodiff.hpp"
#include "dmtrack/ekf.hpp"
#include "dmtrack/simkit.hpp"
#include "dmtrack/statespace.hpp"

namespace dmt {

inline constexpr int kVelDim = 2;
inline constexpr int kMkfOutDim = kVelDim * (kVelDim + 3) / 2;  // 5

/// LSTM cell, tanh dense layer and linear output layer. Gate blocks in the
/// stacked matrices are ordered input, forget, cell candidate, output.
/// Inputs are divided by `vel_scale`; the velocity mean and Cholesky factor
/// are multiplied by it.
struct LstmWeights {
  Eigen::MatrixXd Wx;   // 4H x d_in
  Eigen::MatrixXd Wh;   // 4H x H
  Eigen::VectorXd b;    // 4H
  Eigen::MatrixXd Wd;   // D x H
  Eigen::VectorXd bd;   // D
  Eigen::MatrixXd Wo;   // 5 x D
  Eigen::VectorXd bo;   // 5
  double vel_scale = 10.0;  // m/s

  int hidden() const { return static_cast<int>(Wh.cols()); }
  int dense() const { return static_cast<int>(Wd.rows()); }
  int input_dim() const { return static_cast<int>(Wx.cols()); }

  /// Uniform(+-1/sqrt(fan_in)) init, forget-gate bias 1, other biases 0.
  static LstmWeights init(int hidden, int dense, Rng& rng, double vel_scale = 10.0);
  static LstmWeights zeros(int hidden, int dense, double vel_scale = 10.0);

  std::size_t size() const;
  Eigen::VectorXd flatten() const;
  void unflatten(const Eigen::VectorXd& theta);
  void validate() const;
};

struct LstmState {
  Eigen::VectorXd h;
  Eigen::VectorXd c;

  static LstmState zeros(int hidden) {
    return {Eigen::VectorXd::Zero(hidden), Eigen::VectorXd::Zero(hidden)};
  }
};

struct NnPrediction {
  Vec2 v;  // velocity mean, m/s
  Mat2 C;  // lower-triangular Cholesky factor, positive diagonal
};

/// One network step on a velocity input (m/s).
std::pair<LstmState, NnPrediction> lstm_step(const LstmWeights& w, const LstmState& s,
                                             const Vec2& input);

/// Prediction step: position advanced by dt * v_nn, velocity replaced by v_nn,
/// covariance P + V^T C C^T V + Q_reg with V = [dt I, I].
std::pair<StateEstimate, LstmState> mkf_predict(const StateEstimate& prior, const LstmState& s,
                                                const LstmWeights& w, double dt,
                                                const Mat4& Q_reg);

/// Velocity projection V (2x4) used in the prediction covariance.
Eigen::Matrix<double, 2, 4> mkf_projection(double dt);

inline Mat4 default_q_reg() { return 1e-2 * Mat4::Identity(); }

/// EKF correction (identical to ekf_update).
StateEstimate mkf_update(const StateEstimate& pred, const Measurement& z,
                         const SensorConfig& sensor);

FilterTrace run_mkf(const Tracklet& tr, const SensorConfig& sensor, const LstmWeights& w,
                    const Mat4& Q_reg = default_q_reg());

// --- taped forms ------------------------------------------------------------------

/// Tape views of the weight blocks, all slices of one flat parameter vector.
struct TapeLstm {
  ad::Var Wx, Wh, b, Wd, bd, Wo, bo;
  double vel_scale = 10.0;
  int hidden = 0;

  static TapeLstm bind(ad::Tape& tape, const ad::Var& theta, const LstmWeights& shape);
};

struct TapeNnPrediction {
  ad::Var v;  // 2x1
  ad::Var C;  // 2x2 lower triangular
};

struct TapeLstmState {
  ad::Var h, c;
};

std::pair<TapeLstmState, TapeNnPrediction> lstm_step(ad::Tape& tape, const TapeLstm& w,
                                                     const TapeLstmState& s, const ad::Var& input);

enum class MkfLossKind {
  kGaussianNll,  // sum of -log N(y; v, C C^T)
  kLiteralL1,    // || 0.5 C (v - y) - diag(C) ||_1 per step
};

/// Loss between a sequence of network predictions and velocity labels.
ad::Var mkf_loss(ad::Tape& tape, const std::vector<TapeNnPrediction>& preds,
                 const std::vector<Vec2>& labels, MkfLossKind kind = MkfLossKind::kGaussianNll);

/// Velocity-label training sequence of a tracklet: finite differences of the
/// Cartesian-converted measurements. inputs[k] predicts labels[k].
struct VelocitySequence {
  std::vector<Vec2> inputs;
  std::vector<Vec2> labels;
};
VelocitySequence velocity_sequence(const Tracklet& tr, const SensorConfig& sensor);

/// Label-mode objective of one tracklet on the tape.
ad::Var mkf_label_objective(ad::Tape& tape, const ad::Var& theta, const LstmWeights& shape,
                            const Tracklet& tr, const SensorConfig& sensor, MkfLossKind kind);

/// Filter-mode objective: summed measurement NLL of the full MKF recursion on the tape.
ad::Var mkf_filter_objective(ad::Tape& tape, const ad::Var& theta, const LstmWeights& shape,
                             const Tracklet& tr, const SensorConfig& sensor, const Mat4& Q_reg);

enum class MkfTrainMode {
  kFilterNll,      // backpropagate the measurement NLL through the EKF correction
  kVelocityLabels  // fit measurement-derived velocity labels with mkf_loss
};

struct MkfTrainConfig {
  std::size_t iterations = 10000;
  std::size_t batch_size = 1;
  double lr = 5e-4;
  double clip_norm = 10.0;
  MkfTrainMode mode = MkfTrainMode::kFilterNll;
  MkfLossKind loss = MkfLossKind::kGaussianNll;
  Mat4 Q_reg = default_q_reg();
  std::uint64_t seed = 0;
};

struct MkfTrainResult {
  LstmWeights weights;
  std::vector<double> loss;  // mean per-tracklet objective of each iteration
  bool aborted = false;      // non-finite loss; weights are the last good ones
};

MkfTrainResult train_mkf(const LstmWeights& w0, const Dataset& ds, const MkfTrainConfig& cfg);

/// Flat tensor container: "MKF1" header, vel_scale, then named tensors with shapes.
void save_mkf(const std::filesystem::path& path, const LstmWeights& w);
LstmWeights load_mkf(const std::filesystem::path& path);

}  // namespace dmt
