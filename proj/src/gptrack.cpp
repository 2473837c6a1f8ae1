#include "dmtrack/gptrack.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>

#include "dmtrack/autodiff.hpp"
#include "dmtrack/errors.hpp"

namespace dmt {

namespace {

constexpr double kActiveKernelFloor = 1e-18;
// exp() of anything below this is not a normal double.
constexpr double kLogLikFloor = -708.0;

Eigen::MatrixXd squared_distances(const Eigen::Matrix2Xd& A, const Eigen::Matrix2Xd& B) {
  Eigen::MatrixXd D = (-2.0 * A.transpose() * B).colwise() + A.colwise().squaredNorm().transpose();
  D.rowwise() += B.colwise().squaredNorm();
  return D.cwiseMax(0.0);
}

Eigen::MatrixXd kernel_matrix(const Eigen::Matrix2Xd& A, const Eigen::Matrix2Xd& B,
                              const GpHyper& h) {
  return h.sigma0_sq * (squared_distances(A, B) * (-0.5 / h.length_sq)).array().exp().matrix();
}

}  // namespace

void GpHyper::validate() const {
  if (!(sigma0_sq > 0.0) || !(length_sq > 0.0) || !(noise_sq > 0.0)) {
    throw ConfigError("gp hyperparameters must all be > 0");
  }
}

double kernel(const Vec2& a, const Vec2& b, const GpHyper& h) {
  return h.sigma0_sq * std::exp(-(a - b).squaredNorm() / (2.0 * h.length_sq));
}

GpModel::GpModel(Eigen::Matrix2Xd U, Eigen::VectorXd y, const GpHyper& hyper)
    : U_(std::move(U)), y_(std::move(y)), hyper_(hyper) {
  hyper_.validate();
  if (U_.cols() != y_.size() || y_.size() == 0) {
    throw std::invalid_argument("GpModel: inputs and outputs must be non-empty and match");
  }
  Eigen::MatrixXd A = kernel_matrix(U_, U_, hyper_);
  A.diagonal().array() += hyper_.noise_sq;
  const auto fail = [&](const char* what) {
    char jitter[32];
    std::snprintf(jitter, sizeof jitter, "%g", std::max(10.0 * hyper_.noise_sq, 1e-8 * hyper_.sigma0_sq));
    throw NumericalError(std::string("GP kernel matrix is ") + what +
                         "; add jitter by raising noise_sq to at least " + jitter);
  };
  llt_.compute(A);
  if (llt_.info() != Eigen::Success) fail("not positive definite");
  alpha_ = llt_.solve(y_);
  inverse_ = llt_.solve(Eigen::MatrixXd::Identity(A.rows(), A.cols()));
  if (!alpha_.allFinite() || !inverse_.allFinite()) fail("ill-conditioned");
}

GpModel::Prediction GpModel::predict(const Vec2& u) const {
  const Eigen::Matrix2Xd q = u;
  const Eigen::VectorXd k = kernel_matrix(U_, q, hyper_);
  const Eigen::VectorXd v = llt_.matrixL().solve(k);
  Prediction p;
  p.mean = k.dot(alpha_);
  p.var = std::clamp(hyper_.sigma0_sq - v.squaredNorm(), 0.0, hyper_.sigma0_sq);
  return p;
}

void GpModel::predict_batch(const Eigen::Matrix2Xd& Q, Eigen::VectorXd& mean,
                            Eigen::VectorXd& var) const {
  const Eigen::MatrixXd K = kernel_matrix(U_, Q, hyper_);  // N x M
  mean = K.transpose() * alpha_;
  std::vector<Eigen::Index> active;
  const double floor = kActiveKernelFloor * hyper_.sigma0_sq;
  for (Eigen::Index i = 0; i < K.rows(); ++i) {
    if (K.row(i).maxCoeff() > floor) active.push_back(i);
  }
  var = Eigen::VectorXd::Constant(Q.cols(), hyper_.sigma0_sq);
  if (active.empty()) return;
  const auto n = static_cast<Eigen::Index>(active.size());
  Eigen::MatrixXd Ks(n, K.cols());
  Eigen::MatrixXd Ainv(n, n);
  for (Eigen::Index a = 0; a < n; ++a) {
    Ks.row(a) = K.row(active[a]);
    for (Eigen::Index b = 0; b < n; ++b) Ainv(a, b) = inverse_(active[a], active[b]);
  }
  const Eigen::MatrixXd B = Ainv * Ks;
  var -= Ks.cwiseProduct(B).colwise().sum().transpose();
  var = var.cwiseMax(0.0).cwiseMin(hyper_.sigma0_sq);
}

GpPrediction gp_predict(const GpPair& m, const Vec2& u) {
  const auto px = m.x.predict(u);
  const auto py = m.y.predict(u);
  return {{px.mean, py.mean}, {px.var, py.var}};
}

double gp_nlml(const Eigen::Matrix2Xd& U, const Eigen::VectorXd& y, const GpHyper& h) {
  Eigen::MatrixXd A = kernel_matrix(U, U, h);
  A.diagonal().array() += h.noise_sq;
  Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() != Eigen::Success) return std::numeric_limits<double>::infinity();
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return 0.5 * (y.dot(llt.solve(y)) + logdet) +
         0.5 * static_cast<double>(y.size()) * std::log(2.0 * std::numbers::pi);
}

GpTrainingSet gp_training_pairs(const Dataset& ds) {
  std::vector<std::pair<Vec2, Vec2>> pairs;
  for (const Tracklet& tr : ds.tracklets) {
    for (std::size_t k = 2; k < tr.truth.size(); ++k) {
      const Vec2 v0 = (tr.truth[k - 1].head<2>() - tr.truth[k - 2].head<2>()) / tr.dt;
      const Vec2 v1 = (tr.truth[k].head<2>() - tr.truth[k - 1].head<2>()) / tr.dt;
      pairs.emplace_back(v0, v1);
    }
  }
  GpTrainingSet s;
  s.U.resize(2, static_cast<Eigen::Index>(pairs.size()));
  s.Y.resize(2, static_cast<Eigen::Index>(pairs.size()));
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    s.U.col(static_cast<Eigen::Index>(i)) = pairs[i].first;
    s.Y.col(static_cast<Eigen::Index>(i)) = pairs[i].second;
  }
  return s;
}

GpHyper fit_hyper(const Eigen::Matrix2Xd& U, const Eigen::VectorXd& y, const GpHyper& h0,
                  std::size_t steps, double lr, std::vector<double>* history) {
  h0.validate();
  if (steps == 0) return h0;
  const double start = gp_nlml(U, y, h0);
  const Eigen::MatrixXd D = squared_distances(U, U);
  const auto n = static_cast<Eigen::Index>(y.size());
  Eigen::VectorXd theta(3);
  theta << std::log(h0.sigma0_sq), std::log(h0.length_sq), std::log(h0.noise_sq);
  ad::AdamConfig acfg;
  acfg.lr = lr;
  ad::AdamState astate;
  ad::Tape tape;
  try {
    for (std::size_t it = 0; it < steps; ++it) {
      tape.clear();
      const ad::Var th = tape.variable(ad::Matrix(theta));
      const ad::Var s0 = ad::exp(ad::element(th, 0));
      const ad::Var inv_l = ad::exp(-ad::element(th, 1));
      const ad::Var sv = ad::exp(ad::element(th, 2));
      const ad::Var A = s0 * ad::exp(tape.constant(-0.5 * D) * inv_l) +
                        sv * tape.constant(Eigen::MatrixXd::Identity(n, n));
      const ad::Var yv = tape.constant(ad::Matrix(y));
      const ad::Var nlml = 0.5 * (ad::dot(yv, ad::spd_solve(A, yv)) + ad::spd_logdet(A));
      tape.backward(nlml);
      const Eigen::VectorXd g = tape.grad(th);
      if (!g.allFinite() || !std::isfinite(nlml.scalar())) return h0;
      if (history) {
        history->push_back(nlml.scalar() +
                           0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi));
      }
      ad::adam_step(theta, g, astate, acfg);
    }
  } catch (const NumericalError&) {
    return h0;
  }
  GpHyper h{std::exp(theta[0]), std::exp(theta[1]), std::exp(theta[2])};
  if (!(gp_nlml(U, y, h) < start)) return h0;
  return h;
}

GpPair gp_fit(const Dataset& ds, const GpFitConfig& cfg, GpFitHistory* history) {
  cfg.hyper0.validate();
  const GpTrainingSet all = gp_training_pairs(ds);
  const auto n = static_cast<std::size_t>(all.U.cols());
  if (n < 2) throw DataError("gp_fit: need at least 2 training pairs");
  if (cfg.max_points < 1 || cfg.lml_points < 1) throw ConfigError("gp point limits must be > 0");

  std::vector<Eigen::Index> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(cfg.seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  auto take = [&](std::size_t m) {
    m = std::min(m, n);
    std::vector<Eigen::Index> sel(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m));
    std::sort(sel.begin(), sel.end());
    GpTrainingSet s;
    s.U.resize(2, static_cast<Eigen::Index>(m));
    s.Y.resize(2, static_cast<Eigen::Index>(m));
    for (std::size_t i = 0; i < m; ++i) {
      s.U.col(static_cast<Eigen::Index>(i)) = all.U.col(sel[i]);
      s.Y.col(static_cast<Eigen::Index>(i)) = all.Y.col(sel[i]);
    }
    return s;
  };
  const GpTrainingSet lml = take(cfg.lml_points);
  const GpTrainingSet fit = take(cfg.max_points);

  const GpHyper hx = fit_hyper(lml.U, lml.Y.row(0).transpose(), cfg.hyper0, cfg.lml_steps, cfg.lr,
                               history ? &history->nlml_x : nullptr);
  const GpHyper hy = fit_hyper(lml.U, lml.Y.row(1).transpose(), cfg.hyper0, cfg.lml_steps, cfg.lr,
                               history ? &history->nlml_y : nullptr);
  return {GpModel(fit.U, fit.Y.row(0).transpose(), hx),
          GpModel(fit.U, fit.Y.row(1).transpose(), hy)};
}

// --- particle filter ---------------------------------------------------------------

void ParticleSet::validate() const {
  if (w.size() < 1 || pos.cols() != w.size() || vel.cols() != w.size()) {
    throw std::invalid_argument("ParticleSet: inconsistent sizes");
  }
  if ((w.array() < 0.0).any() || std::abs(w.sum() - 1.0) > 1e-12) {
    throw std::invalid_argument("ParticleSet: weights must be >= 0 and sum to 1");
  }
}

StateEstimate ParticleSet::estimate(long t) const {
  Eigen::Matrix<double, 4, Eigen::Dynamic> X(4, w.size());
  X << pos, vel;
  StateEstimate e;
  e.t = t;
  e.mean = X * w;
  const Eigen::Matrix<double, 4, Eigen::Dynamic> C = X.colwise() - e.mean;
  e.cov = C * w.asDiagonal() * C.transpose();
  e.cov = 0.5 * (e.cov + e.cov.transpose());
  return e;
}

double effective_sample_size(const Eigen::VectorXd& w) { return 1.0 / w.squaredNorm(); }

ParticleSet systematic_resample(const ParticleSet& ps, double u0) {
  const Eigen::Index m = ps.size();
  ParticleSet out;
  out.pos.resize(2, m);
  out.vel.resize(2, m);
  out.w = Eigen::VectorXd::Constant(m, 1.0 / static_cast<double>(m));
  // Work in units of 1/M so equal weights give exact integer boundaries.
  const double scale = static_cast<double>(m);
  double cum = ps.w[0] * scale;
  Eigen::Index j = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const double u = u0 * scale + static_cast<double>(i);
    while (u >= cum && j + 1 < m) cum += ps.w[++j] * scale;
    out.pos.col(i) = ps.pos.col(j);
    out.vel.col(i) = ps.vel.col(j);
  }
  return out;
}

ParticleSet systematic_resample(const ParticleSet& ps, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0 / static_cast<double>(ps.size()));
  return systematic_resample(ps, u(rng));
}

namespace {

Eigen::Matrix4d sqrt_psd(const Mat4& cov) {
  Eigen::SelfAdjointEigenSolver<Mat4> es(0.5 * (cov + cov.transpose()));
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

}  // namespace

ParticleSet sample_particles(const StateEstimate& est, std::size_t m, Rng& rng) {
  if (m == 0) throw ConfigError("gp.particles must be > 0");
  const Eigen::Matrix4d A = sqrt_psd(est.cov);
  std::normal_distribution<double> n01;
  ParticleSet ps;
  const auto M = static_cast<Eigen::Index>(m);
  ps.pos.resize(2, M);
  ps.vel.resize(2, M);
  ps.w = Eigen::VectorXd::Constant(M, 1.0 / static_cast<double>(m));
  for (Eigen::Index i = 0; i < M; ++i) {
    Vec4 e;
    for (int k = 0; k < 4; ++k) e[k] = n01(rng);
    const Vec4 x = est.mean + A * e;
    ps.pos.col(i) = x.head<2>();
    ps.vel.col(i) = x.tail<2>();
  }
  return ps;
}

PfStepResult pf_step(const ParticleSet& ps, const Measurement& z, const GpPair& models,
                     const SensorConfig& sensor, double dt, const PfConfig& cfg, Rng& rng) {
  const Eigen::Index m = ps.size();
  std::normal_distribution<double> n01;
  PfStepResult r;
  ParticleSet& p = r.particles;
  p.w = ps.w;
  p.vel.resize(2, m);
  p.pos.resize(2, m);

  Eigen::VectorXd mx, vx, my, vy;
  models.x.predict_batch(ps.vel, mx, vx);
  models.y.predict_batch(ps.vel, my, vy);
  for (Eigen::Index i = 0; i < m; ++i) {
    p.vel(0, i) = mx[i] + std::sqrt(vx[i]) * n01(rng);
    p.vel(1, i) = my[i] + std::sqrt(vy[i]) * n01(rng);
  }
  for (Eigen::Index i = 0; i < m; ++i) {
    p.pos(0, i) = ps.pos(0, i) + dt * p.vel(0, i) + cfg.sigma_p * n01(rng);
    p.pos(1, i) = ps.pos(1, i) + dt * p.vel(1, i) + cfg.sigma_p * n01(rng);
  }
  r.predicted = p.estimate(z.t);

  const double sr2 = sensor.sigma_r * sensor.sigma_r;
  const double sa2 = sensor.sigma_a * sensor.sigma_a;
  const double log_norm = -std::log(2.0 * std::numbers::pi * sensor.sigma_r * sensor.sigma_a);
  Eigen::VectorXd ll(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const Vec2 d = p.pos.col(i) - sensor.origin;
    const double dr = z.range - d.norm();
    const double db = wrap_angle(z.bearing - std::atan2(d.y(), d.x()));
    ll[i] = log_norm - 0.5 * (dr * dr / sr2 + db * db / sa2);
  }
  {
    const double top = ll.maxCoeff();
    r.log_evidence = top + std::log(p.w.dot((ll.array() - top).exp().matrix()));
  }
  if (ll.maxCoeff() < kLogLikFloor) {
    r.collapsed = true;
    // Re-seed positions around the measurement, keep the propagated velocities.
    const Vec2 c = polar_to_cartesian(z, sensor);
    const Mat2 J = polar_to_cartesian_jacobian(z.range, z.bearing);
    const Eigen::LLT<Mat2> llt(J * sensor.noise_cov() * J.transpose());
    const Mat2 L = llt.matrixL();
    for (Eigen::Index i = 0; i < m; ++i) p.pos.col(i) = c + L * Vec2(n01(rng), n01(rng));
    p.w.setConstant(1.0 / static_cast<double>(m));
  } else {
    Eigen::VectorXd lw = p.w.array().log().matrix() + ll;
    lw.array() -= lw.maxCoeff();
    p.w = lw.array().exp().matrix();
    p.w /= p.w.sum();
  }
  r.posterior = p.estimate(z.t);

  const bool resample = cfg.ess_threshold <= 0.0 ||
                        effective_sample_size(p.w) < cfg.ess_threshold * static_cast<double>(m);
  if (resample) p = systematic_resample(p, rng);
  return r;
}

PfTrace run_gp_pf(const Tracklet& tr, const SensorConfig& sensor, const GpPair& models,
                  const PfConfig& cfg, Rng& rng) {
  if (!models.x.fitted() || !models.y.fitted()) throw std::logic_error("run_gp_pf: model not fitted");
  if (tr.meas.size() < kFirstFilteredStep) throw DataError("tracklet shorter than 2 steps");
  if (!(cfg.sigma_p >= 0.0)) throw ConfigError("gp.sigma_p must be >= 0");
  PfTrace out;
  const StateEstimate x0 = init_track(tr.meas[0], tr.meas[1], tr.dt, sensor);
  for (std::size_t k = 0; k < kFirstFilteredStep; ++k) {
    out.trace.predicted.push_back(x0);
    out.trace.posterior.push_back(x0);
  }
  ParticleSet ps = sample_particles(x0, cfg.particles, rng);
  for (std::size_t k = kFirstFilteredStep; k < tr.meas.size(); ++k) {
    PfStepResult r = pf_step(ps, tr.meas[k], models, sensor, tr.dt, cfg, rng);
    out.trace.predicted.push_back(r.predicted);
    out.trace.posterior.push_back(r.posterior);
    out.collapses += r.collapsed ? 1 : 0;
    out.trace.nll -= r.log_evidence;
    ps = std::move(r.particles);
  }
  return out;
}

GpEvidenceResult select_hyper_by_evidence(const Dataset& train, const Dataset& validation,
                                          const GpEvidenceGrid& grid, const GpFitConfig& fit,
                                          const PfConfig& pf, std::uint64_t seed) {
  if (validation.empty()) throw DataError("select_hyper_by_evidence: empty validation set");
  if (grid.sigma0_sq.empty() || grid.length_sq.empty() || grid.noise_sq.empty()) {
    throw ConfigError("gp evidence grid must have at least one value per hyperparameter");
  }
  GpEvidenceResult res;
  double best = std::numeric_limits<double>::infinity();
  for (double s0 : grid.sigma0_sq) {
    for (double l2 : grid.length_sq) {
      for (double nv : grid.noise_sq) {
        GpFitConfig cfg = fit;
        cfg.hyper0 = {s0, l2, nv};
        cfg.lml_steps = 0;
        double nll = std::numeric_limits<double>::infinity();
        try {
          const GpPair m = gp_fit(train, cfg);
          nll = 0.0;
          for (std::size_t i = 0; i < validation.size(); ++i) {
            Rng rng = stream_rng(seed, i);
            nll += run_gp_pf(validation.tracklets[i], validation.sensor, m, pf, rng).trace.nll;
          }
        } catch (const NumericalError&) {
        }
        res.table.emplace_back(cfg.hyper0, nll);
        if (nll < best) {
          best = nll;
          res.best = cfg.hyper0;
        }
      }
    }
  }
  if (!std::isfinite(best)) throw NumericalError("no evidence-grid candidate could be fitted");
  return res;
}

// --- serialization -----------------------------------------------------------------

void save_gp(const std::filesystem::path& path, const GpPair& m) {
  if (!m.x.fitted() || !m.y.fitted() || m.x.size() != m.y.size()) {
    throw std::logic_error("save_gp: model not fitted");
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(17) << "GPM1\n";
  out << "points " << m.x.size() << '\n';
  for (const auto* g : {&m.x, &m.y}) {
    const GpHyper& h = g->hyper();
    out << "hyper " << h.sigma0_sq << ' ' << h.length_sq << ' ' << h.noise_sq << '\n';
  }
  out << "# u1 u2 y1 y2 alpha1 alpha2\n";
  for (Eigen::Index i = 0; i < m.x.size(); ++i) {
    out << m.x.inputs()(0, i) << ' ' << m.x.inputs()(1, i) << ' ' << m.x.outputs()[i] << ' '
        << m.y.outputs()[i] << ' ' << m.x.alpha()[i] << ' ' << m.y.alpha()[i] << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

GpPair load_gp(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string(), 0, "cannot open file");
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line) || line != "GPM1") throw ParseError(path.string(), 1, "missing GPM1 header");
  auto next = [&]() {
    ++lineno;
    if (!std::getline(in, line)) throw ParseError(path.string(), lineno, "truncated file");
    return std::istringstream(line);
  };
  std::string key;
  Eigen::Index n = 0;
  if (auto s = next(); !(s >> key >> n) || key != "points" || n < 1) {
    throw ParseError(path.string(), lineno, "expected 'points <n>'");
  }
  GpHyper h[2];
  for (auto& hh : h) {
    auto s = next();
    if (!(s >> key >> hh.sigma0_sq >> hh.length_sq >> hh.noise_sq) || key != "hyper") {
      throw ParseError(path.string(), lineno, "expected 'hyper <s0> <l2> <noise>'");
    }
  }
  next();  // column comment
  Eigen::Matrix2Xd U(2, n);
  Eigen::VectorXd yx(n), yy(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    auto s = next();
    double ax = 0.0, ay = 0.0;
    if (!(s >> U(0, i) >> U(1, i) >> yx[i] >> yy[i] >> ax >> ay)) {
      throw ParseError(path.string(), lineno, "expected 6 numbers");
    }
  }
  try {
    return {GpModel(U, yx, h[0]), GpModel(U, yy, h[1])};
  } catch (const ConfigError& e) {
    throw ParseError(path.string(), 3, e.what());
  }
}

}  // namespace dmt
