#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <vector>

#include "dmtrack/ekf.hpp"
#include "dmtrack/simkit.hpp"
#include "dmtrack/statespace.hpp"

namespace dmt {

/// Squared-exponential kernel hyperparameters.
struct GpHyper {
  double sigma0_sq = 1.0;  // (m/s)^2
  double length_sq = 1.0;  // (m/s)^2
  double noise_sq = 0.01;  // (m/s)^2

  void validate() const;
};

/// sigma0^2 exp(-|x - x'|^2 / (2 l^2)).
double kernel(const Vec2& a, const Vec2& b, const GpHyper& h);

/// Zero-mean GP regression for one output axis with a cached Cholesky
/// factorization of K + sigma_v^2 I.
class GpModel {
 public:
  GpModel() = default;
  /// Inputs are the columns of `U` (2 x N). Throws NumericalError when the
  /// kernel matrix cannot be factorized.
  GpModel(Eigen::Matrix2Xd U, Eigen::VectorXd y, const GpHyper& hyper);

  struct Prediction {
    double mean = 0.0;
    double var = 0.0;
  };
  Prediction predict(const Vec2& u) const;
  /// Predictions for the columns of `Q`. Kernel entries below 1e-18 sigma0^2
  /// are treated as zero, so work scales with the inputs near the queries.
  void predict_batch(const Eigen::Matrix2Xd& Q, Eigen::VectorXd& mean,
                     Eigen::VectorXd& var) const;

  const GpHyper& hyper() const { return hyper_; }
  const Eigen::Matrix2Xd& inputs() const { return U_; }
  const Eigen::VectorXd& outputs() const { return y_; }
  const Eigen::VectorXd& alpha() const { return alpha_; }
  Eigen::Index size() const { return y_.size(); }
  bool fitted() const { return y_.size() > 0; }

 private:
  Eigen::Matrix2Xd U_;
  Eigen::VectorXd y_;
  GpHyper hyper_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::VectorXd alpha_;     // (K + sigma_v^2 I)^{-1} y
  Eigen::MatrixXd inverse_;   // (K + sigma_v^2 I)^{-1}
};

/// Independent per-axis models mapping previous velocity to next velocity (m/s).
struct GpPair {
  GpModel x;
  GpModel y;
};

struct GpPrediction {
  Vec2 mean;
  Vec2 var;
};
GpPrediction gp_predict(const GpPair& m, const Vec2& u);

/// Negative log marginal likelihood of y under (U, h).
double gp_nlml(const Eigen::Matrix2Xd& U, const Eigen::VectorXd& y, const GpHyper& h);

struct GpFitConfig {
  GpHyper hyper0;
  std::size_t max_points = 2000;  // factorization size used for prediction
  std::size_t lml_points = 500;   // subsample for hyperparameter ascent
  std::size_t lml_steps = 200;
  double lr = 1e-2;
  std::uint64_t seed = 0;
};

/// Velocity training pairs (v_{k-1}, v_k) from truth position differences.
struct GpTrainingSet {
  Eigen::Matrix2Xd U;
  Eigen::Matrix2Xd Y;
};
GpTrainingSet gp_training_pairs(const Dataset& ds);

/// Refines hyperparameters by marginal-likelihood ascent in log space from
/// `h0`. Returns `h0` if the ascent fails or does not improve the objective.
/// `history`, when given, receives the objective before each step.
GpHyper fit_hyper(const Eigen::Matrix2Xd& U, const Eigen::VectorXd& y, const GpHyper& h0,
                  std::size_t steps, double lr, std::vector<double>* history = nullptr);

/// Per-axis objective histories of the hyperparameter ascent.
struct GpFitHistory {
  std::vector<double> nlml_x;
  std::vector<double> nlml_y;
};
GpPair gp_fit(const Dataset& ds, const GpFitConfig& cfg, GpFitHistory* history = nullptr);

// --- particle filter ---------------------------------------------------------------

struct ParticleSet {
  Eigen::Matrix2Xd pos;  // m
  Eigen::Matrix2Xd vel;  // m/s
  Eigen::VectorXd w;

  Eigen::Index size() const { return w.size(); }
  void validate() const;
  /// Weighted mean and covariance of [pos; vel].
  StateEstimate estimate(long t) const;
};

/// Systematic resampling driven by one uniform draw in [0, 1/M).
ParticleSet systematic_resample(const ParticleSet& ps, double u0);
ParticleSet systematic_resample(const ParticleSet& ps, Rng& rng);

double effective_sample_size(const Eigen::VectorXd& w);

struct PfConfig {
  std::size_t particles = 1000;
  double sigma_p = 0.5;     // m, position process noise
  double ess_threshold = 0.0;  // fraction of M; 0 resamples every step
};

struct PfStepResult {
  ParticleSet particles;
  StateEstimate predicted;
  StateEstimate posterior;
  bool collapsed = false;  // all likelihoods underflowed; re-seeded from the measurement
  double log_evidence = 0.0;  // log sum_i w_i p(z | particle i), the predictive density of z
};

/// Draws each particle's velocity from the GP conditioned on its previous
/// velocity, moves positions by dt v plus noise, weights by the range-bearing
/// likelihood of z, then resamples.
PfStepResult pf_step(const ParticleSet& ps, const Measurement& z, const GpPair& models,
                     const SensorConfig& sensor, double dt, const PfConfig& cfg, Rng& rng);

/// M particles drawn from N(est.mean, est.cov) with uniform weights.
ParticleSet sample_particles(const StateEstimate& est, std::size_t m, Rng& rng);

struct PfTrace {
  FilterTrace trace;  // trace.nll is the negated summed log evidence
  std::size_t collapses = 0;
};
PfTrace run_gp_pf(const Tracklet& tr, const SensorConfig& sensor, const GpPair& models,
                  const PfConfig& cfg, Rng& rng);

/// Candidate grid for choosing hyperparameters by particle-filter evidence.
struct GpEvidenceGrid {
  std::vector<double> sigma0_sq{50.0, 200.0};
  std::vector<double> length_sq{1.0, 3.0, 10.0, 30.0, 100.0};
  std::vector<double> noise_sq{0.1, 1.0, 10.0};
};

struct GpEvidenceResult {
  GpHyper best;
  std::vector<std::pair<GpHyper, double>> table;  // candidate, summed -log evidence
};

/// Fits a model for every grid candidate (no marginal-likelihood ascent) and
/// keeps the one whose particle filter assigns the highest evidence to the
/// measurements of `validation`. Tracklet i is filtered with stream_rng(seed, i)
/// for every candidate. Shared across both axes.
GpEvidenceResult select_hyper_by_evidence(const Dataset& train, const Dataset& validation,
                                          const GpEvidenceGrid& grid, const GpFitConfig& fit,
                                          const PfConfig& pf, std::uint64_t seed);

/// Text container: "GPM1", per-axis hyperparameters, inputs, outputs and solve vectors.
void save_gp(const std::filesystem::path& path, const GpPair& m);
GpPair load_gp(const std::filesystem::path& path);

}  // namespace dmt
