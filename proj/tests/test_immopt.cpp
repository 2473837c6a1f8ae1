#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "dmtrack/errors.hpp"
#include "dmtrack/immopt.hpp"

using namespace dmt;

namespace {

StateEstimate est(const Vec4& m, double var) {
  StateEstimate e;
  e.mean = m;
  e.cov = Mat4::Identity() * var;
  return e;
}

Dataset small_set(std::size_t n, std::size_t steps, std::uint64_t seed) {
  GctConfig g;
  g.dt = 1.9;
  g.n_steps = steps;
  return make_dataset(n, g, SensorConfig{}, seed);
}

}  // namespace

TEST_CASE("single-mode IMM reproduces the EKF") {
  const Dataset ds = small_set(3, 100, 21);
  const double q = 0.07;
  for (const auto& tr : ds.tracklets) {
    const auto ekf = run_ekf(tr, ds.sensor, {tr.dt, q});
    const auto imm = run_imm(tr, ds.sensor, ImmParams::single_cv(q, ds.sensor));
    CHECK(std::abs(imm.trace.nll - ekf.nll) <= 1e-12 * std::abs(ekf.nll));
    double worst = 0.0;
    for (std::size_t k = 0; k < tr.size(); ++k) {
      worst = std::max(worst, (imm.trace.posterior[k].mean - ekf.posterior[k].mean).cwiseAbs().maxCoeff());
      worst = std::max(worst, (imm.trace.posterior[k].cov - ekf.posterior[k].cov).cwiseAbs().maxCoeff());
      worst = std::max(worst, (imm.trace.predicted[k].mean - ekf.predicted[k].mean).cwiseAbs().maxCoeff());
    }
    CHECK(worst <= 1e-12 * 1e4);
  }
}

TEST_CASE("taped NLL equals the double-precision NLL") {
  const Dataset ds = small_set(2, 30, 22);
  const ImmParams p = ImmParams::defaults(0.1, ds.sensor);
  for (const auto& tr : ds.tracklets) {
    ad::Tape tape;
    const auto v = imm_nll(tape, tape.variable(ad::Matrix(p.flatten())), p, tr, ds.sensor);
    CHECK(v.scalar() == doctest::Approx(run_imm(tr, ds.sensor, p).trace.nll).epsilon(1e-10));
    ad::Tape t2;
    ImmOptions mm{true};
    const auto w = imm_nll(t2, t2.variable(ad::Matrix(p.flatten())), p, tr, ds.sensor, mm);
    CHECK(w.scalar() == doctest::Approx(run_imm(tr, ds.sensor, p, mm).trace.nll).epsilon(1e-10));
  }
}

TEST_CASE("NLL gradient agrees with finite differences") {
  const Dataset ds = small_set(1, 12, 23);
  ImmParams p = ImmParams::defaults(0.2, ds.sensor, 0.15, 0.9);
  Eigen::VectorXd g;
  imm_nll_grad(p, ds, {0}, &g);
  const Eigen::VectorXd theta = p.flatten();
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    const double h = 1e-6 * std::max(1.0, std::abs(theta[i]));
    ImmParams a = p, b = p;
    Eigen::VectorXd tp = theta, tm = theta;
    tp[i] += h;
    tm[i] -= h;
    a.unflatten(tp);
    b.unflatten(tm);
    const double fd = (imm_nll_grad(a, ds, {0}, nullptr) - imm_nll_grad(b, ds, {0}, nullptr)) / (2 * h);
    CHECK(std::abs(fd - g[i]) <= 1e-5 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("identity transition performs no mixing") {
  ImmState s;
  s.modes = {est({1, 2, 3, 4}, 2.0), est({5, 6, 7, 8}, 3.0)};
  s.mu = Eigen::Vector2d(0.3, 0.7);
  const auto r = imm_mix(s, Eigen::Matrix2d::Identity());
  CHECK(r.mu_pred.isApprox(s.mu));
  for (int j = 0; j < 2; ++j) {
    CHECK(r.mixed[j].mean.isApprox(s.modes[j].mean));
    CHECK(r.mixed[j].cov.isApprox(s.modes[j].cov));
  }
}

TEST_CASE("identical mode states mix to themselves") {
  ImmState s;
  s.modes = {est({1, 2, 3, 4}, 2.0), est({1, 2, 3, 4}, 2.0)};
  s.mu = Eigen::Vector2d(0.2, 0.8);
  Eigen::Matrix2d p;
  p << 0.6, 0.4, 0.3, 0.7;
  const auto r = imm_mix(s, p);
  for (int j = 0; j < 2; ++j) {
    CHECK((r.mixed[j].mean - s.modes[0].mean).norm() < 1e-14);
    CHECK((r.mixed[j].cov - s.modes[0].cov).norm() < 1e-14);
  }
  CHECK(r.mu_pred.sum() == doctest::Approx(1.0));
}

TEST_CASE("zero predicted mode probability raises") {
  ImmState s;
  s.modes = {est({1, 2, 3, 4}, 2.0), est({1, 2, 3, 4}, 2.0)};
  s.mu = Eigen::Vector2d(1.0, 0.0);
  CHECK_THROWS_AS(imm_mix(s, Eigen::Matrix2d::Identity()), NumericalError);
}

TEST_CASE("duplicate modes give identical outputs") {
  SensorConfig sensor;
  const StateEstimate x = est({1500, 1500, 5, -5}, 40.0);
  const Measurement z{3, 2130, 0.79};
  const ImmMode m{ModeKind::kCv, std::log(0.3), 0.0};
  const auto a = imm_mode_filter(x, z, m, 1.9, sensor.noise_cov(), sensor);
  const auto b = imm_mode_filter(x, z, m, 1.9, sensor.noise_cov(), sensor);
  CHECK(a.posterior.mean == b.posterior.mean);
  CHECK(a.log_likelihood == b.log_likelihood);
  const auto c = imm_combine({a.posterior, b.posterior},
                             Eigen::Vector2d(a.log_likelihood, b.log_likelihood),
                             Eigen::Vector2d(0.25, 0.75));
  CHECK(c.state.mu[0] == doctest::Approx(0.25));
  CHECK((c.combined.mean - a.posterior.mean).norm() < 1e-9);
}

TEST_CASE("equal likelihoods keep the predicted probabilities") {
  const std::vector<StateEstimate> posts = {est({0, 0, 0, 0}, 1), est({10, 0, 0, 0}, 1)};
  const auto c = imm_combine(posts, Eigen::Vector2d(-3.0, -3.0), Eigen::Vector2d(0.4, 0.6));
  CHECK(c.state.mu[0] == doctest::Approx(0.4));
  CHECK(c.state.mu[1] == doctest::Approx(0.6));
  CHECK(c.combined.mean[0] == doctest::Approx(6.0));
  // Spread of means enters the combined covariance.
  CHECK(c.combined.cov(0, 0) == doctest::Approx(1.0 + 0.4 * 36 + 0.6 * 16));
}

TEST_CASE("one-hot weights return that mode exactly") {
  const std::vector<StateEstimate> posts = {est({1, 2, 3, 4}, 1), est({10, 0, 0, 0}, 5)};
  const auto c = combine_estimates(posts, Eigen::Vector2d(0.0, 1.0));
  CHECK(c.mean == posts[1].mean);
  CHECK(c.cov == posts[1].cov);
}

TEST_CASE("vanishing likelihoods fall back and stay floored and normalized") {
  const std::vector<StateEstimate> posts = {est({0, 0, 0, 0}, 1), est({1, 0, 0, 0}, 1)};
  const double inf = std::numeric_limits<double>::infinity();
  auto c = imm_combine(posts, Eigen::Vector2d(-inf, -inf), Eigen::Vector2d(0.5, 0.5));
  CHECK(c.state.mu.sum() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(c.state.mu.minCoeff() > 0.0);
  c = imm_combine(posts, Eigen::Vector2d(0.0, -5000.0), Eigen::Vector2d(0.5, 0.5));
  CHECK(c.state.mu[1] >= kModeProbFloor * 0.999);
  CHECK(std::abs(c.state.mu.sum() - 1.0) < 1e-12);
}

TEST_CASE("coordinated-turn transition") {
  const Mat4 F0 = ct_transition(0.0, 1.5);
  CHECK((F0 - CwnaModel{1.5, 0}.transition()).norm() < 1e-12);
  const Mat4 Fs = ct_transition(1e-9, 1.5);
  CHECK((Fs - F0).norm() < 1e-8);
  // Quarter turn: velocity (10, 0) becomes (0, 10).
  const double w = std::numbers::pi / 2;
  const Vec4 x = ct_transition(w, 1.0) * Vec4(0, 0, 10, 0);
  CHECK(x[2] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(x[3] == doctest::Approx(10.0));
  CHECK(x[0] == doctest::Approx(10.0 / w));
  CHECK(x[1] == doctest::Approx(10.0 / w));
}

TEST_CASE("mode probabilities stay normalized over a run") {
  const Dataset ds = small_set(2, 100, 24);
  const ImmParams p = ImmParams::defaults(0.05, ds.sensor);
  for (const auto& tr : ds.tracklets) {
    const auto r = run_imm(tr, ds.sensor, p);
    for (const auto& mu : r.mu) {
      CHECK(std::abs(mu.sum() - 1.0) < 1e-12);
      CHECK(mu.minCoeff() >= 0.0);
    }
    for (const auto& e : r.trace.posterior) CHECK(is_valid_covariance(e.cov));
  }
}

TEST_CASE("training edge cases") {
  const Dataset ds = small_set(4, 20, 25);
  const ImmParams p0 = ImmParams::defaults(0.1, ds.sensor);
  ImmTrainConfig cfg;
  cfg.steps = 0;
  auto r = train_imm(p0, ds, cfg);
  CHECK(r.params.flatten() == p0.flatten());
  CHECK(r.loss.empty());

  cfg.steps = 3;
  cfg.lr = 0.0;
  r = train_imm(p0, ds, cfg);
  CHECK(r.params.flatten() == p0.flatten());
  CHECK(r.loss.size() == 3);

  cfg.lr = 1e-2;
  cfg.steps = 30;
  cfg.train_R = false;
  r = train_imm(p0, ds, cfg);
  CHECK(r.params.log_sigma_r == p0.log_sigma_r);
  CHECK(r.params.flatten() != p0.flatten());
}

TEST_CASE("parameters round-trip through a file") {
  ImmParams p = ImmParams::defaults(0.3, SensorConfig{}, 0.12, 0.9);
  p.modes[1].omega = -0.0871234567890123;
  const auto path = std::filesystem::temp_directory_path() / "dmt_imm_params.txt";
  save_imm(path, p);
  const ImmParams q = load_imm(path);
  CHECK(q.flatten() == p.flatten());
  CHECK(q.modes[1].kind == ModeKind::kCt);
}

TEST_CASE("invalid parameters are rejected") {
  ImmParams p = ImmParams::defaults(0.3, SensorConfig{});
  p.trans_logits.resize(1, 2);
  CHECK_THROWS_AS(p.validate(), ConfigError);
  CHECK_THROWS_AS(ImmParams::defaults(0.3, SensorConfig{}, 0.1, 1.0), ConfigError);
  CHECK_THROWS_AS(ImmParams::defaults(-1.0, SensorConfig{}), ConfigError);
}
