#include "dmtrack/ekf.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "dmtrack/errors.hpp"

namespace dmt {

void CwnaModel::validate() const {
  if (!(dt > 0.0)) throw ConfigError("ekf.dt must be > 0");
  if (!(q >= 0.0)) throw ConfigError("ekf.q must be >= 0");
}

Mat4 CwnaModel::transition() const {
  Mat4 F = Mat4::Identity();
  F(0, 2) = F(1, 3) = dt;
  return F;
}

Mat4 cwna_noise(double q, double dt) {
  const double a = q * dt * dt * dt / 3.0;
  const double b = q * dt * dt / 2.0;
  const double c = q * dt;
  Mat4 Q;
  Q << a, 0, b, 0,
       0, a, 0, b,
       b, 0, c, 0,
       0, b, 0, c;
  return Q;
}

Mat4 CwnaModel::process_noise() const { return cwna_noise(q, dt); }

StateEstimate predict_linear(const StateEstimate& prior, const Mat4& F, const Mat4& Q) {
  StateEstimate out;
  out.mean = F * prior.mean;
  out.cov = F * prior.cov * F.transpose() + Q;
  out.cov = 0.5 * (out.cov + out.cov.transpose());
  out.t = prior.t + 1;
  return out;
}

StateEstimate predict_cwna(const StateEstimate& prior, const CwnaModel& model) {
  return predict_linear(prior, model.transition(), model.process_noise());
}

UpdateResult ekf_update(const StateEstimate& pred, const Measurement& z,
                        const SensorConfig& sensor, const Mat2& R) {
  const Mat24 H = measure_jacobian(pred.mean, sensor);
  const Vec2 h = measure(pred.mean.head<2>(), sensor);
  Vec2 nu = z.as_vector() - h;
  nu.y() = wrap_angle(nu.y());

  const Mat42 PHt = pred.cov * H.transpose();
  Mat2 S = H * PHt + R;
  S = 0.5 * (S + S.transpose());
  Eigen::LLT<Mat2> llt(S);
  if (llt.info() != Eigen::Success || !S.allFinite()) {
    throw NumericalError("innovation covariance is not positive definite at t=" +
                         std::to_string(z.t));
  }
  const Mat42 K = llt.solve(PHt.transpose()).transpose();

  UpdateResult r;
  r.innovation = nu;
  r.S = S;
  r.posterior.t = pred.t;
  r.posterior.mean = pred.mean + K * nu;
  const Mat4 A = Mat4::Identity() - K * H;
  Mat4 P = A * pred.cov * A.transpose() + K * R * K.transpose();
  r.posterior.cov = 0.5 * (P + P.transpose());
  return r;
}

UpdateResult ekf_update(const StateEstimate& pred, const Measurement& z,
                        const SensorConfig& sensor) {
  return ekf_update(pred, z, sensor, sensor.noise_cov());
}

TapeUpdate ekf_update_tape(ad::Tape& t, const ad::Var& xp, const ad::Var& Pp,
                           const ad::Var& R, const Measurement& z, const SensorConfig& sensor) {
  using ad::Var;
  const Var px = ad::element(xp, 0) - sensor.origin.x();
  const Var py = ad::element(xp, 1) - sensor.origin.y();
  const Var r2 = ad::square(px) + ad::square(py);
  if (!(r2.scalar() > 0.0)) throw DegenerateGeometry("predicted position at sensor origin");
  const Var r = ad::sqrt(r2);
  const Var b = ad::atan2(py, px);
  // Bearing residual wrapped by a constant multiple of 2 pi.
  const double raw = z.bearing - b.scalar();
  const double offset = wrap_angle(raw) - raw;
  const Var nu = ad::assemble(2, 1, {z.range - r, (z.bearing + offset) - b});
  const Var zero = t.constant(0.0);
  const Var H = ad::assemble(2, 4, {px / r, py / r, zero, zero, -py / r2, px / r2, zero, zero});
  const Var HP = H * Pp;
  Var S = HP * ad::transpose(H) + R;
  S = 0.5 * (S + ad::transpose(S));
  const Var K = ad::transpose(ad::spd_solve(S, HP));
  TapeUpdate out;
  out.x = xp + K * nu;
  const Var A = t.constant(Mat4::Identity()) - K * H;
  const Var P = A * Pp * ad::transpose(A) + K * R * ad::transpose(K);
  out.P = 0.5 * (P + ad::transpose(P));
  out.nll = 0.5 * (ad::dot(nu, ad::spd_solve(S, nu)) + ad::spd_logdet(S)) +
            std::log(2.0 * std::numbers::pi);
  out.z_pred = ad::assemble(2, 1, {r, b});
  out.S = S;
  return out;
}

double nll_term(const Vec2& innovation, const Mat2& S) {
  Eigen::LLT<Mat2> llt(S);
  if (llt.info() != Eigen::Success) throw NumericalError("nll_term: S is not SPD");
  const Mat2 L = llt.matrixL();
  const double logdet = 2.0 * (std::log(L(0, 0)) + std::log(L(1, 1)));
  const double maha = innovation.dot(llt.solve(innovation));
  return 0.5 * (maha + logdet) + std::log(2.0 * std::numbers::pi);
}

StateEstimate init_track(const Measurement& z0, const Measurement& z1, double dt,
                         const SensorConfig& sensor, const Mat2& R) {
  if (!(dt > 0.0)) throw ConfigError("init_track: dt must be > 0");
  const Vec2 p0 = polar_to_cartesian(z0, sensor);
  const Vec2 p1 = polar_to_cartesian(z1, sensor);
  const Mat2 J0 = polar_to_cartesian_jacobian(z0.range, z0.bearing);
  const Mat2 J1 = polar_to_cartesian_jacobian(z1.range, z1.bearing);
  const Mat2 C0 = J0 * R * J0.transpose();
  const Mat2 C1 = J1 * R * J1.transpose();

  StateEstimate s;
  s.t = z1.t;
  s.mean << p1, (p1 - p0) / dt;
  s.cov.topLeftCorner<2, 2>() = C1;
  s.cov.topRightCorner<2, 2>() = C1 / dt;
  s.cov.bottomLeftCorner<2, 2>() = C1 / dt;
  s.cov.bottomRightCorner<2, 2>() = (C0 + C1) / (dt * dt);
  return s;
}

StateEstimate init_track(const Measurement& z0, const Measurement& z1, double dt,
                         const SensorConfig& sensor) {
  return init_track(z0, z1, dt, sensor, sensor.noise_cov());
}

FilterTrace run_ekf(const Tracklet& tr, const SensorConfig& sensor, const CwnaModel& model) {
  model.validate();
  if (tr.meas.size() < kFirstFilteredStep) throw DataError("tracklet shorter than 2 steps");
  FilterTrace out;
  const std::size_t n = tr.meas.size();
  out.predicted.reserve(n);
  out.posterior.reserve(n);
  StateEstimate x = init_track(tr.meas[0], tr.meas[1], model.dt, sensor);
  for (std::size_t k = 0; k < kFirstFilteredStep; ++k) {
    out.predicted.push_back(x);
    out.posterior.push_back(x);
  }
  const Mat4 F = model.transition();
  const Mat4 Q = model.process_noise();
  for (std::size_t k = kFirstFilteredStep; k < n; ++k) {
    const StateEstimate pred = predict_linear(x, F, Q);
    const UpdateResult u = ekf_update(pred, tr.meas[k], sensor);
    out.nll += nll_term(u.innovation, u.S);
    out.predicted.push_back(pred);
    out.posterior.push_back(u.posterior);
    x = u.posterior;
  }
  return out;
}

double ekf_dataset_nll(const Dataset& ds, const CwnaModel& model) {
  double total = 0.0;
  for (const auto& tr : ds.tracklets) total += run_ekf(tr, ds.sensor, model).nll;
  return total;
}

double tune_cwna_q(const Dataset& ds, double dt, double q_lo, double q_hi, int points) {
  if (ds.empty()) throw DataError("tune_cwna_q: empty dataset");
  if (!(q_lo > 0.0 && q_hi > q_lo) || points < 2) {
    throw ConfigError("tune_cwna_q: need 0 < q_lo < q_hi and at least 2 grid points");
  }
  double best_q = q_lo;
  double best = std::numeric_limits<double>::infinity();
  const double step = std::log(q_hi / q_lo) / (points - 1);
  for (int i = 0; i < points; ++i) {
    const double q = q_lo * std::exp(step * i);
    double nll = std::numeric_limits<double>::infinity();
    try {
      nll = ekf_dataset_nll(ds, {dt, q});
    } catch (const NumericalError&) {
    }
    if (nll < best) {
      best = nll;
      best_q = q;
    }
  }
  return best_q;
}

}  // namespace dmt
