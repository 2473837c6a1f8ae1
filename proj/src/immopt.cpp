#include "dmtrack/immopt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>
#include <string>

#include "dmtrack/errors.hpp"

namespace dmt {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2 pi)

// sin(w dt)/w and (1 - cos(w dt))/w with their derivatives, series near w = 0.
struct TurnTerms {
  double dt;
  static constexpr double kSmall = 1e-5;

  double f1(double w) const {
    const double a = w * dt;
    if (std::abs(a) < kSmall) return dt * (1.0 - a * a / 6.0);
    return std::sin(a) / w;
  }
  double df1(double w) const {
    const double a = w * dt;
    if (std::abs(a) < kSmall) return -w * dt * dt * dt / 3.0;
    return (a * std::cos(a) - std::sin(a)) / (w * w);
  }
  double f2(double w) const {
    const double a = w * dt;
    if (std::abs(a) < kSmall) return dt * a / 2.0 * (1.0 - a * a / 12.0);
    return (1.0 - std::cos(a)) / w;
  }
  double df2(double w) const {
    const double a = w * dt;
    if (std::abs(a) < kSmall) return dt * dt / 2.0 * (1.0 - a * a / 4.0);
    return (a * std::sin(a) - (1.0 - std::cos(a))) / (w * w);
  }
};

}  // namespace

// --- parameters ------------------------------------------------------------------

Eigen::MatrixXd ImmParams::transition() const {
  Eigen::MatrixXd p(trans_logits.rows(), trans_logits.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const Eigen::RowVectorXd row = trans_logits.row(i);
    const Eigen::RowVectorXd e = (row.array() - row.maxCoeff()).exp();
    p.row(i) = e / e.sum();
  }
  return p;
}

Mat2 ImmParams::R() const {
  const double sr = std::exp(log_sigma_r);
  const double sa = std::exp(log_sigma_a);
  return Vec2(sr * sr, sa * sa).asDiagonal();
}

std::size_t ImmParams::size() const {
  std::size_t n = trans_logits.size() + 2;
  for (const auto& m : modes) n += m.kind == ModeKind::kCt ? 2 : 1;
  return n;
}

Eigen::VectorXd ImmParams::flatten() const {
  Eigen::VectorXd theta(size());
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < trans_logits.rows(); ++i) {
    for (Eigen::Index j = 0; j < trans_logits.cols(); ++j) theta[k++] = trans_logits(i, j);
  }
  for (const auto& m : modes) {
    theta[k++] = m.log_q;
    if (m.kind == ModeKind::kCt) theta[k++] = m.omega;
  }
  theta[k++] = log_sigma_r;
  theta[k++] = log_sigma_a;
  return theta;
}

void ImmParams::unflatten(const Eigen::VectorXd& theta) {
  if (static_cast<std::size_t>(theta.size()) != size()) {
    throw std::invalid_argument("ImmParams::unflatten: expected " + std::to_string(size()) +
                                " values, got " + std::to_string(theta.size()));
  }
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < trans_logits.rows(); ++i) {
    for (Eigen::Index j = 0; j < trans_logits.cols(); ++j) trans_logits(i, j) = theta[k++];
  }
  for (auto& m : modes) {
    m.log_q = theta[k++];
    if (m.kind == ModeKind::kCt) m.omega = theta[k++];
  }
  log_sigma_r = theta[k++];
  log_sigma_a = theta[k++];
}

void ImmParams::validate() const {
  const auto m = static_cast<Eigen::Index>(modes.size());
  if (m == 0) throw ConfigError("imm: at least one mode required");
  if (trans_logits.rows() != m || trans_logits.cols() != m) {
    throw ConfigError("imm: transition logits must be " + std::to_string(m) + "x" +
                      std::to_string(m));
  }
  if (!flatten().allFinite()) throw ConfigError("imm: non-finite parameter");
}

ImmParams ImmParams::defaults(double q0, const SensorConfig& sensor, double omega0,
                              double p_stay) {
  if (!(q0 > 0.0)) throw ConfigError("imm: q0 must be > 0");
  if (!(p_stay > 0.0 && p_stay < 1.0)) throw ConfigError("imm: p_stay must be in (0,1)");
  ImmParams p;
  p.modes = {{ModeKind::kCv, std::log(q0), 0.0}, {ModeKind::kCt, std::log(q0), omega0}};
  p.trans_logits.resize(2, 2);
  p.trans_logits << std::log(p_stay), std::log(1.0 - p_stay),
                    std::log(1.0 - p_stay), std::log(p_stay);
  p.log_sigma_r = std::log(sensor.sigma_r);
  p.log_sigma_a = std::log(sensor.sigma_a);
  return p;
}

ImmParams ImmParams::single_cv(double q, const SensorConfig& sensor) {
  ImmParams p;
  p.modes = {{ModeKind::kCv, std::log(q), 0.0}};
  p.trans_logits = Eigen::MatrixXd::Zero(1, 1);
  p.log_sigma_r = std::log(sensor.sigma_r);
  p.log_sigma_a = std::log(sensor.sigma_a);
  return p;
}

// --- double-precision filter ----------------------------------------------------

Mat4 ct_transition(double omega, double dt) {
  const TurnTerms tt{dt};
  const double s = std::sin(omega * dt);
  const double c = std::cos(omega * dt);
  const double f1 = tt.f1(omega);
  const double f2 = tt.f2(omega);
  Mat4 F;
  F << 1, 0, f1, -f2,
       0, 1, f2, f1,
       0, 0, c, -s,
       0, 0, s, c;
  return F;
}

Mat4 mode_transition(const ImmMode& mode, double dt) {
  if (mode.kind == ModeKind::kCt) return ct_transition(mode.omega, dt);
  return CwnaModel{dt, 0.0}.transition();
}

MixResult imm_mix(const ImmState& s, const Eigen::MatrixXd& p) {
  const auto m = static_cast<Eigen::Index>(s.modes.size());
  MixResult r;
  r.mu_pred = p.transpose() * s.mu;
  r.mixed.resize(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    if (!(r.mu_pred[j] > 0.0)) {
      throw NumericalError("imm_mix: predicted probability of mode " + std::to_string(j) +
                           " is zero");
    }
    Vec4 x = Vec4::Zero();
    Eigen::VectorXd w(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      w[i] = p(i, j) * s.mu[i] / r.mu_pred[j];
      x += w[i] * s.modes[i].mean;
    }
    Mat4 P = Mat4::Zero();
    for (Eigen::Index i = 0; i < m; ++i) {
      const Vec4 d = s.modes[i].mean - x;
      P += w[i] * (s.modes[i].cov + d * d.transpose());
    }
    r.mixed[j].mean = x;
    r.mixed[j].cov = P;
    r.mixed[j].t = s.modes[j].t;
  }
  return r;
}

ModeFilterResult imm_mode_filter(const StateEstimate& mixed, const Measurement& z,
                                 const ImmMode& mode, double dt, const Mat2& R,
                                 const SensorConfig& sensor) {
  ModeFilterResult r;
  r.predicted = predict_linear(mixed, mode_transition(mode, dt), cwna_noise(std::exp(mode.log_q), dt));
  r.z_pred = measure(r.predicted.mean.head<2>(), sensor);
  const UpdateResult u = ekf_update(r.predicted, z, sensor, R);
  r.posterior = u.posterior;
  r.innovation = u.innovation;
  r.S = u.S;
  r.log_likelihood = -nll_term(u.innovation, u.S);
  return r;
}

StateEstimate combine_estimates(const std::vector<StateEstimate>& xs, const Eigen::VectorXd& w) {
  StateEstimate out;
  out.t = xs.front().t;
  for (std::size_t j = 0; j < xs.size(); ++j) out.mean += w[j] * xs[j].mean;
  for (std::size_t j = 0; j < xs.size(); ++j) {
    const Vec4 d = xs[j].mean - out.mean;
    out.cov += w[j] * (xs[j].cov + d * d.transpose());
  }
  return out;
}

namespace {

double log_sum_exp(const Eigen::VectorXd& a) {
  const double m = a.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((a.array() - m).exp().sum());
}

Eigen::VectorXd floor_probs(const Eigen::VectorXd& mu) {
  const double m = static_cast<double>(mu.size());
  return ((1.0 - m * kModeProbFloor) * mu.array() + kModeProbFloor).matrix();
}

}  // namespace

CombineResult imm_combine(const std::vector<StateEstimate>& posteriors,
                          const Eigen::VectorXd& log_likelihoods,
                          const Eigen::VectorXd& mu_pred) {
  const Eigen::VectorXd a = mu_pred.array().log().matrix() + log_likelihoods;
  const double lse = log_sum_exp(a);
  Eigen::VectorXd mu = std::isfinite(lse) ? Eigen::VectorXd((a.array() - lse).exp()) : mu_pred;
  CombineResult r;
  r.state.mu = floor_probs(mu);
  r.state.modes = posteriors;
  r.combined = combine_estimates(posteriors, r.state.mu);
  return r;
}

namespace {

double moment_matched_nll(const std::vector<ModeFilterResult>& f, const Eigen::VectorXd& w,
                          const Measurement& z) {
  const double ref = f[0].z_pred.y();
  Vec2 zhat = Vec2::Zero();
  for (std::size_t j = 0; j < f.size(); ++j) {
    zhat.x() += w[j] * f[j].z_pred.x();
    zhat.y() += w[j] * wrap_angle(f[j].z_pred.y() - ref);
  }
  zhat.y() += ref;
  Mat2 S = Mat2::Zero();
  for (std::size_t j = 0; j < f.size(); ++j) {
    const Vec2 d(f[j].z_pred.x() - zhat.x(), wrap_angle(f[j].z_pred.y() - zhat.y()));
    S += w[j] * (f[j].S + d * d.transpose());
  }
  const Vec2 nu(z.range - zhat.x(), wrap_angle(z.bearing - zhat.y()));
  return nll_term(nu, S);
}

}  // namespace

ImmTrace run_imm(const Tracklet& tr, const SensorConfig& sensor, const ImmParams& params,
                 const ImmOptions& opt) {
  params.validate();
  if (tr.meas.size() < kFirstFilteredStep) throw DataError("tracklet shorter than 2 steps");
  const auto m = static_cast<Eigen::Index>(params.n_modes());
  const Eigen::MatrixXd p = params.transition();
  const Mat2 R = params.R();

  ImmTrace out;
  const StateEstimate x0 = init_track(tr.meas[0], tr.meas[1], tr.dt, sensor);
  ImmState s;
  s.modes.assign(m, x0);
  s.mu = Eigen::VectorXd::Constant(m, 1.0 / static_cast<double>(m));
  for (std::size_t k = 0; k < kFirstFilteredStep; ++k) {
    out.trace.predicted.push_back(x0);
    out.trace.posterior.push_back(x0);
    out.mu.push_back(s.mu);
  }
  std::vector<ModeFilterResult> f(m);
  std::vector<StateEstimate> preds(m), posts(m);
  Eigen::VectorXd ll(m);
  for (std::size_t k = kFirstFilteredStep; k < tr.meas.size(); ++k) {
    try {
      const MixResult mix = imm_mix(s, p);
      for (Eigen::Index j = 0; j < m; ++j) {
        f[j] = imm_mode_filter(mix.mixed[j], tr.meas[k], params.modes[j], tr.dt, R, sensor);
        preds[j] = f[j].predicted;
        posts[j] = f[j].posterior;
        ll[j] = f[j].log_likelihood;
      }
      if (opt.moment_matched) {
        out.trace.nll += moment_matched_nll(f, mix.mu_pred, tr.meas[k]);
      } else {
        out.trace.nll -= log_sum_exp(mix.mu_pred.array().log().matrix() + ll);
      }
      out.trace.predicted.push_back(combine_estimates(preds, mix.mu_pred));
      CombineResult c = imm_combine(posts, ll, mix.mu_pred);
      out.trace.posterior.push_back(c.combined);
      out.mu.push_back(c.state.mu);
      s = std::move(c.state);
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + " (IMM step " + std::to_string(k) + ")");
    }
  }
  return out;
}

// --- taped NLL -----------------------------------------------------------------

namespace {

using ad::Var;

struct TapeEstimate {
  Var x;
  Var P;
};

Var sym(const Var& a) { return 0.5 * (a + ad::transpose(a)); }

struct ModeVars {
  Var F;
  Var Q;
};

// Builds per-mode F and Q from theta; returns the index just past the mode block.
std::vector<ModeVars> mode_vars(ad::Tape& t, const Var& theta, const ImmParams& params,
                                Eigen::Index k, double dt) {
  std::vector<ModeVars> out;
  const Var one = t.constant(1.0);
  const Var zero = t.constant(0.0);
  const Var qbase = t.constant(cwna_noise(1.0, dt));
  const TurnTerms tt{dt};
  for (const auto& mode : params.modes) {
    ModeVars mv;
    mv.Q = ad::exp(ad::element(theta, k++)) * qbase;
    if (mode.kind == ModeKind::kCt) {
      const Var w = ad::element(theta, k++);
      const Var f1 = ad::unary(w, [tt](double x) { return tt.f1(x); },
                               [tt](double x) { return tt.df1(x); });
      const Var f2 = ad::unary(w, [tt](double x) { return tt.f2(x); },
                               [tt](double x) { return tt.df2(x); });
      const Var c = ad::cos(dt * w);
      const Var s = ad::sin(dt * w);
      mv.F = ad::assemble(4, 4, {one, zero, f1, -f2,
                                 zero, one, f2, f1,
                                 zero, zero, c, -s,
                                 zero, zero, s, c});
    } else {
      mv.F = t.constant(CwnaModel{dt, 0.0}.transition());
    }
    out.push_back(mv);
  }
  return out;
}

struct TapeModeResult {
  TapeEstimate post;
  Var log_lik;
  Var z_pred;
  Var S;
};

TapeModeResult tape_mode_filter(ad::Tape& t, const TapeEstimate& mixed, const ModeVars& mv,
                                const Var& R, const Measurement& z, const SensorConfig& sensor) {
  const Var xp = mv.F * mixed.x;
  const Var Pp = sym(mv.F * mixed.P * ad::transpose(mv.F) + mv.Q);
  const TapeUpdate u = ekf_update_tape(t, xp, Pp, R, z, sensor);
  return {{u.x, u.P}, -u.nll, u.z_pred, u.S};
}

Var tape_moment_matched_nll(ad::Tape& t, const std::vector<TapeModeResult>& f,
                            const std::vector<Var>& w, const Measurement& z) {
  const double ref = f[0].z_pred(1, 0);
  auto rel = [&](const Var& zp, double center) {
    const Var br = ad::element(zp, 1);
    const double raw = br.scalar() - center;
    return (br + (wrap_angle(raw) - raw)) - center;
  };
  Var zr = w[0] * ad::element(f[0].z_pred, 0);
  Var zb = w[0] * rel(f[0].z_pred, ref);
  for (std::size_t j = 1; j < f.size(); ++j) {
    zr = zr + w[j] * ad::element(f[j].z_pred, 0);
    zb = zb + w[j] * rel(f[j].z_pred, ref);
  }
  zb = zb + ref;
  Var S;
  for (std::size_t j = 0; j < f.size(); ++j) {
    const Var d = ad::assemble(2, 1, {ad::element(f[j].z_pred, 0) - zr, rel(f[j].z_pred, zb.scalar())});
    const Var term = w[j] * (f[j].S + d * ad::transpose(d));
    S = j == 0 ? term : S + term;
  }
  const double raw = z.bearing - zb.scalar();
  const Var nu = ad::assemble(2, 1, {z.range - zr, (z.bearing + (wrap_angle(raw) - raw)) - zb});
  (void)t;
  return 0.5 * (ad::dot(nu, ad::spd_solve(S, nu)) + ad::spd_logdet(S)) + kLog2Pi;
}

}  // namespace

ad::Var imm_nll(ad::Tape& t, const ad::Var& theta, const ImmParams& params, const Tracklet& tr,
                const SensorConfig& sensor, const ImmOptions& opt) {
  params.validate();
  if (static_cast<std::size_t>(theta.rows()) != params.size() || theta.cols() != 1) {
    throw std::invalid_argument("imm_nll: theta has the wrong shape");
  }
  if (tr.meas.size() < kFirstFilteredStep + 1) {
    throw DataError("imm_nll: need at least 3 measurements");
  }
  const auto m = static_cast<Eigen::Index>(params.n_modes());
  const double dt = tr.dt;

  std::vector<Var> logits;
  for (Eigen::Index k = 0; k < m * m; ++k) logits.push_back(ad::element(theta, k));
  const Var p = ad::softmax_rows(ad::assemble(m, m, std::span<const Var>(logits)));
  const std::vector<ModeVars> mvs = mode_vars(t, theta, params, m * m, dt);
  const Eigen::Index ir = static_cast<Eigen::Index>(params.size()) - 2;
  const Var var_r = ad::exp(2.0 * ad::element(theta, ir));
  const Var var_a = ad::exp(2.0 * ad::element(theta, ir + 1));
  const Var zero = t.constant(0.0);
  const Var R = ad::assemble(2, 2, {var_r, zero, zero, var_a});

  const StateEstimate x0 = init_track(tr.meas[0], tr.meas[1], dt, sensor);
  std::vector<TapeEstimate> est(m, {t.constant(ad::Matrix(x0.mean)), t.constant(ad::Matrix(x0.cov))});
  Var mu = t.constant(Eigen::VectorXd::Constant(m, 1.0 / static_cast<double>(m)));
  Var nll = t.constant(0.0);
  const double md = static_cast<double>(m);

  for (std::size_t k = kFirstFilteredStep; k < tr.meas.size(); ++k) {
    try {
      const Var mu_pred = ad::transpose(p) * mu;
      std::vector<TapeModeResult> f;
      std::vector<Var> a(m), wpred(m);
      for (Eigen::Index j = 0; j < m; ++j) {
        const Var mpj = ad::element(mu_pred, j);
        if (!(mpj.scalar() > 0.0)) throw NumericalError("predicted mode probability is zero");
        std::vector<Var> w(m);
        Var x;
        for (Eigen::Index i = 0; i < m; ++i) {
          w[i] = ad::element(p, i, j) * ad::element(mu, i) / mpj;
          x = i == 0 ? w[i] * est[i].x : x + w[i] * est[i].x;
        }
        Var P;
        for (Eigen::Index i = 0; i < m; ++i) {
          const Var d = est[i].x - x;
          const Var term = w[i] * (est[i].P + d * ad::transpose(d));
          P = i == 0 ? term : P + term;
        }
        f.push_back(tape_mode_filter(t, {x, P}, mvs[j], R, tr.meas[k], sensor));
        wpred[j] = mpj;
        a[j] = ad::log(mpj) + f.back().log_lik;
      }
      const Var av = ad::assemble(m, 1, std::span<const Var>(a));
      const Var lse = ad::log_sum_exp(av);
      if (opt.moment_matched) {
        nll = nll + tape_moment_matched_nll(t, f, wpred, tr.meas[k]);
      } else {
        nll = nll - lse;
      }
      mu = (1.0 - md * kModeProbFloor) * ad::exp(av - lse) + kModeProbFloor;
      for (Eigen::Index j = 0; j < m; ++j) est[j] = f[j].post;
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + " (IMM step " + std::to_string(k) + ")");
    }
  }
  return nll;
}

double imm_nll_grad(const ImmParams& params, const Dataset& ds,
                    const std::vector<std::size_t>& batch, Eigen::VectorXd* grad,
                    const ImmOptions& opt) {
  const Eigen::VectorXd theta0 = params.flatten();
  if (grad) *grad = Eigen::VectorXd::Zero(theta0.size());
  double total = 0.0;
  ad::Tape tape;
  for (std::size_t idx : batch) {
    tape.clear();
    const ad::Var theta = tape.variable(ad::Matrix(theta0));
    const ad::Var nll = imm_nll(tape, theta, params, ds.tracklets.at(idx), ds.sensor, opt);
    total += nll.scalar();
    if (grad) {
      tape.backward(nll);
      *grad += tape.grad(theta);
    }
  }
  return total;
}

ImmTrainResult train_imm(const ImmParams& params0, const Dataset& ds,
                         const ImmTrainConfig& cfg) {
  if (ds.empty()) throw DataError("train_imm: empty training dataset");
  if (cfg.batch_size == 0) throw ConfigError("imm.batch_size must be > 0");
  params0.validate();
  ImmTrainResult res;
  res.params = params0;
  if (cfg.steps == 0) return res;

  ad::AdamConfig acfg;
  acfg.lr = cfg.lr;
  acfg.plain = cfg.plain_gd;
  ad::AdamState astate;
  Eigen::VectorXd theta = params0.flatten();
  const Eigen::Index ir = theta.size() - 2;

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  ImmParams work = params0;
  std::vector<std::size_t> batch;
  Eigen::VectorXd g;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    batch.clear();
    while (batch.size() < std::min(cfg.batch_size, ds.size())) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    work.unflatten(theta);
    double loss = 0.0;
    try {
      loss = imm_nll_grad(work, ds, batch, &g) / static_cast<double>(batch.size());
    } catch (const NumericalError&) {
      loss = std::numeric_limits<double>::quiet_NaN();
    }
    if (!std::isfinite(loss) || !g.allFinite()) {
      res.aborted = true;
      break;
    }
    res.loss.push_back(loss);
    res.params = work;
    g /= static_cast<double>(batch.size());
    if (!cfg.train_R) g.segment(ir, 2).setZero();
    ad::adam_step(theta, g, astate, acfg);
  }
  if (!res.aborted) res.params.unflatten(theta);
  return res;
}

// --- serialization ----------------------------------------------------------------

void save_imm(const std::filesystem::path& path, const ImmParams& params) {
  params.validate();
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(17);
  out << "IMM1\n";
  out << "n_modes = " << params.n_modes() << '\n';
  const Eigen::MatrixXd p = params.transition();
  for (std::size_t j = 0; j < params.n_modes(); ++j) {
    const auto& m = params.modes[j];
    out << "mode." << j << ".kind = " << (m.kind == ModeKind::kCt ? "ct" : "cv") << '\n';
    out << "mode." << j << ".q = " << std::exp(m.log_q) << '\n';
    if (m.kind == ModeKind::kCt) out << "mode." << j << ".omega = " << m.omega << '\n';
  }
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    out << "transition." << i << " =";
    for (Eigen::Index j = 0; j < p.cols(); ++j) out << ' ' << p(i, j);
    out << '\n';
    out << "logits." << i << " =";
    for (Eigen::Index j = 0; j < p.cols(); ++j) out << ' ' << params.trans_logits(i, j);
    out << '\n';
  }
  out << "sigma_r = " << std::exp(params.log_sigma_r) << '\n';
  out << "sigma_a = " << std::exp(params.log_sigma_a) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

ImmParams load_imm(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string(), 0, "cannot open file");
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line) || line != "IMM1") {
    throw ParseError(path.string(), 1, "missing IMM1 header");
  }
  std::map<std::string, std::string> kv;
  std::map<std::string, std::size_t> where;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(path.string(), lineno, "expected key = value");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    kv[key] = trim(line.substr(eq + 1));
    where[key] = lineno;
  }
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw ParseError(path.string(), lineno, "missing key '" + key + "'");
    return it->second;
  };
  auto num = [&](const std::string& key) {
    std::istringstream ss(get(key));
    double v;
    if (!(ss >> v)) throw ParseError(path.string(), where[key], "bad number for '" + key + "'");
    return v;
  };
  ImmParams p;
  const auto m = static_cast<std::size_t>(num("n_modes"));
  if (m == 0) throw ParseError(path.string(), where["n_modes"], "n_modes must be > 0");
  p.trans_logits.resize(m, m);
  for (std::size_t j = 0; j < m; ++j) {
    const std::string pre = "mode." + std::to_string(j);
    ImmMode mode;
    const std::string kind = get(pre + ".kind");
    if (kind == "ct") {
      mode.kind = ModeKind::kCt;
      mode.omega = num(pre + ".omega");
    } else if (kind != "cv") {
      throw ParseError(path.string(), where[pre + ".kind"], "unknown mode kind '" + kind + "'");
    }
    mode.log_q = std::log(num(pre + ".q"));
    p.modes.push_back(mode);
    std::istringstream ss(get("logits." + std::to_string(j)));
    for (std::size_t i = 0; i < m; ++i) {
      if (!(ss >> p.trans_logits(j, i))) {
        throw ParseError(path.string(), where["logits." + std::to_string(j)], "short logits row");
      }
    }
  }
  p.log_sigma_r = std::log(num("sigma_r"));
  p.log_sigma_a = std::log(num("sigma_a"));
  p.validate();
  return p;
}

}  // namespace dmt
