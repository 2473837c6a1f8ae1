#include <cmath>
#include <numbers>

#include "doctest.h"
#include "dmtrack/ekf.hpp"
#include "dmtrack/errors.hpp"

using namespace dmt;

namespace {

StateEstimate make_est(const Vec4& m, const Mat4& P) {
  StateEstimate e;
  e.mean = m;
  e.cov = P;
  return e;
}

Measurement meas_of(const Vec2& pos, const SensorConfig& s, long t = 0) {
  const Vec2 z = measure(pos, s);
  return {t, z[0], z[1]};
}

}  // namespace

TEST_CASE("zero-noise prediction is a deterministic drift") {
  Mat4 P = Mat4::Identity();
  P(0, 2) = P(2, 0) = 0.3;
  const auto pred = predict_cwna(make_est({0, 0, 1, 2}, P), {1.0, 0.0});
  CHECK(pred.mean.isApprox(Vec4(1, 2, 1, 2)));
  const Mat4 F = CwnaModel{1.0, 0.0}.transition();
  CHECK((pred.cov - F * P * F.transpose()).norm() < 1e-14);
  const auto z = predict_cwna(make_est({0, 0, 1, 2}, Mat4::Zero()), {1.0, 0.0});
  CHECK(z.cov.isZero(0.0));
}

TEST_CASE("cwna noise has the continuous white-noise form") {
  const double q = 2.0, dt = 1.5;
  const Mat4 Q = cwna_noise(q, dt);
  CHECK(Q(0, 0) == doctest::Approx(q * dt * dt * dt / 3));
  CHECK(Q(0, 2) == doctest::Approx(q * dt * dt / 2));
  CHECK(Q(2, 2) == doctest::Approx(q * dt));
  CHECK(Q(0, 1) == 0.0);
  CHECK(Q.isApprox(Q.transpose()));
  CHECK(min_eigenvalue(Q) > 0.0);
  CHECK_THROWS_AS((CwnaModel{0.0, 1.0}.validate()), ConfigError);
  CHECK_THROWS_AS((CwnaModel{1.0, -1.0}.validate()), ConfigError);
}

TEST_CASE("uninformative measurement leaves the prediction unchanged") {
  SensorConfig s;
  Mat4 P = Mat4::Identity() * 100;
  const auto pred = make_est({1000, 500, 3, -2}, P);
  const Measurement z{0, 1200, 0.3};
  const auto r = ekf_update(pred, z, s, Mat2::Identity() * 1e12);
  CHECK((r.posterior.mean - pred.mean).norm() < 1e-6);
  CHECK((r.posterior.cov - pred.cov).norm() < 1e-6);
}

TEST_CASE("zero prior covariance ignores the measurement") {
  SensorConfig s;
  const auto pred = make_est({1000, 500, 3, -2}, Mat4::Zero());
  const auto r = ekf_update(pred, Measurement{0, 900, 0.7}, s);
  CHECK(r.posterior.mean == pred.mean);
  CHECK(r.posterior.cov.norm() < 1e-12);
}

TEST_CASE("update on the x axis matches a hand-computed block Kalman update") {
  // At (x, 0) the range is x and the bearing is y/x, so H = [[1,0,0,0],[0,1/x,0,0]].
  SensorConfig s;
  s.sigma_r = 5;
  s.sigma_a = 0.02;
  const double x = 100;
  Mat4 P = Mat4::Zero();
  P(0, 0) = 16;
  P(1, 1) = 9;
  P(2, 2) = 4;
  P(3, 3) = 1;
  P(0, 2) = P(2, 0) = 2;
  P(1, 3) = P(3, 1) = 1.5;
  const auto pred = make_est({x, 0, 1, 1}, P);
  const Measurement z{0, 103, 0.01};
  const auto r = ekf_update(pred, z, s);

  // Range: scalar update on the (x, vx) block.
  const double Sr = 16 + 25;
  CHECK(r.S(0, 0) == doctest::Approx(Sr));
  CHECK(r.posterior.mean[0] == doctest::Approx(x + 16 / Sr * 3));
  CHECK(r.posterior.mean[2] == doctest::Approx(1 + 2 / Sr * 3));
  CHECK(r.posterior.cov(0, 0) == doctest::Approx(16 - 16 * 16 / Sr));
  // Bearing: y/x observed with variance sigma_a^2.
  const double h = 1 / x;
  const double Sa = h * h * 9 + 0.02 * 0.02;
  CHECK(r.S(1, 1) == doctest::Approx(Sa));
  CHECK(r.posterior.mean[1] == doctest::Approx(9 * h / Sa * 0.01));
  CHECK(r.posterior.mean[3] == doctest::Approx(1 + 1.5 * h / Sa * 0.01));
  CHECK(r.posterior.cov(1, 1) == doctest::Approx(9 - 81 * h * h / Sa));
  CHECK(r.posterior.cov(0, 1) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(is_valid_covariance(r.posterior.cov));
}

TEST_CASE("innovation bearing wraps across the branch cut") {
  SensorConfig s;
  const auto pred = make_est({-1000, 1, 0, 0}, Mat4::Identity());
  const Measurement z{0, 1000, -std::numbers::pi + 0.001};
  const auto r = ekf_update(pred, z, s);
  CHECK(std::abs(r.innovation[1]) < 0.01);
}

TEST_CASE("singular innovation covariance raises") {
  SensorConfig s;
  s.sigma_r = 0;
  s.sigma_a = 0;
  const auto pred = make_est({100, 100, 0, 0}, Mat4::Zero());
  CHECK_THROWS_AS(ekf_update(pred, Measurement{0, 140, 0.8}, s), NumericalError);
}

TEST_CASE("gaussian nll values") {
  CHECK(nll_term(Vec2::Zero(), Mat2::Identity()) == doctest::Approx(std::log(2 * std::numbers::pi)));
  CHECK(nll_term(Vec2(1, 0), Mat2::Identity()) == doctest::Approx(0.5 + std::log(2 * std::numbers::pi)));
  Mat2 S;
  S << 4, 1, 1, 2;
  const Vec2 v(1, -2);
  const double expect = 0.5 * v.dot(S.inverse() * v) + 0.5 * std::log(S.determinant()) +
                        std::log(2 * std::numbers::pi);
  CHECK(nll_term(v, S) == doctest::Approx(expect));
  Mat2 bad;
  bad << 1, 0, 0, -1;
  CHECK_THROWS_AS(nll_term(v, bad), NumericalError);
}

TEST_CASE("taped update equals the double update") {
  SensorConfig s;
  Mat4 P = Mat4::Identity() * 50;
  P(0, 2) = P(2, 0) = 10;
  const auto pred = make_est({1500, 900, -4, 7}, P);
  const Measurement z{0, 1760, 0.55};
  const auto ref = ekf_update(pred, z, s);
  ad::Tape tape;
  const auto tu = ekf_update_tape(tape, tape.constant(ad::Matrix(pred.mean)),
                                  tape.constant(ad::Matrix(pred.cov)),
                                  tape.constant(ad::Matrix(s.noise_cov())), z, s);
  CHECK((tu.x.value() - ref.posterior.mean).norm() < 1e-9);
  CHECK((tu.P.value() - ref.posterior.cov).norm() < 1e-9);
  CHECK((tu.S.value() - ref.S).norm() < 1e-9);
  CHECK(tu.nll.scalar() == doctest::Approx(nll_term(ref.innovation, ref.S)));
}

TEST_CASE("track initialization from two measurements") {
  SensorConfig s;
  const double dt = 2.0;
  const auto z0 = meas_of({1000, 1000}, s, 0);
  const auto z1 = meas_of({1010, 1020}, s, 1);
  const auto e = init_track(z0, z1, dt, s);
  CHECK(e.mean[0] == doctest::Approx(1010));
  CHECK(e.mean[1] == doctest::Approx(1020));
  CHECK(e.mean[2] == doctest::Approx(5));
  CHECK(e.mean[3] == doctest::Approx(10));
  CHECK(e.t == 1);
  CHECK(is_valid_covariance(e.cov));
  // Velocity variance is twice the position variance over dt^2 when both conversions match.
  CHECK(e.cov(2, 2) == doctest::Approx(2 * e.cov(0, 0) / (dt * dt)).epsilon(0.05));
}

TEST_CASE("joseph form keeps covariances PSD over a long run") {
  GctConfig g;
  g.dt = 1.9;
  SensorConfig s;
  const Dataset ds = make_dataset(5, g, s, 3);
  for (const auto& tr : ds.tracklets) {
    const auto trace = run_ekf(tr, s, {g.dt, 0.05});
    REQUIRE(trace.posterior.size() == tr.size());
    CHECK(std::isfinite(trace.nll));
    for (std::size_t k = 0; k < tr.size(); ++k) {
      CHECK(is_valid_covariance(trace.predicted[k].cov));
      CHECK(is_valid_covariance(trace.posterior[k].cov));
    }
  }
}

TEST_CASE("tuned q is on the grid and minimizes the training NLL") {
  GctConfig g;
  SensorConfig s;
  const Dataset ds = make_dataset(20, g, s, 4);
  const double q = tune_cwna_q(ds, g.dt, 1e-3, 1e1, 9);
  const double best = ekf_dataset_nll(ds, {g.dt, q});
  for (int i = 0; i < 9; ++i) {
    const double qi = 1e-3 * std::pow(10.0, i * 0.5);
    CHECK(best <= ekf_dataset_nll(ds, {g.dt, qi}) + 1e-9);
  }
}
