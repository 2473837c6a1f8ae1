// Acceptance suite: prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dmtrack/evalkit.hpp"
#include "dmtrack/experiment.hpp"

using namespace dmt;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void log(const std::string& s) {
  std::fprintf(stderr, "  %s\n", s.c_str());
  std::fflush(stderr);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// scores.csv plus the sibling noise_level.csv
ScoreTable read_report(const fs::path& dir) {
  ScoreTable t = read_scores(dir / "scores.csv");
  std::ifstream in(dir / "noise_level.csv");
  std::string header;
  if (std::getline(in, header)) in >> t.noise_level;
  return t;
}

Tracklet gct_tracklet(std::size_t steps, std::uint64_t seed, const SensorConfig& s) {
  GctConfig g;
  g.dt = 1.9;
  g.n_steps = steps;
  Rng rng(seed);
  return simulate_measurements(generate_gct(g, rng), s, rng);
}

double rel_diff(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

double max_rel_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) worst = std::max(worst, rel_diff(a(i), b(i)));
  return worst;
}

// --- 1: one-mode IMM equals the EKF ------------------------------------------------

Outcome criterion1() {
  GctConfig g;
  g.dt = 1.9;
  const Dataset ds = make_dataset(50, g, SensorConfig{}, 101);
  double worst = 0.0;
  for (double q : {0.01, 1.0, 10.0}) {
    for (const auto& tr : ds.tracklets) {
      const FilterTrace e = run_ekf(tr, ds.sensor, {tr.dt, q});
      const ImmTrace m = run_imm(tr, ds.sensor, ImmParams::single_cv(q, ds.sensor));
      worst = std::max(worst, rel_diff(m.trace.nll, e.nll));
      for (std::size_t k = 0; k < tr.size(); ++k) {
        worst = std::max(worst, max_rel_diff(m.trace.predicted[k].mean, e.predicted[k].mean));
        worst = std::max(worst, max_rel_diff(m.trace.predicted[k].cov, e.predicted[k].cov));
        worst = std::max(worst, max_rel_diff(m.trace.posterior[k].mean, e.posterior[k].mean));
        worst = std::max(worst, max_rel_diff(m.trace.posterior[k].cov, e.posterior[k].cov));
      }
    }
  }
  return {worst <= 1e-12, fmt("150 runs, max relative difference %.3g (tol 1e-12)", worst)};
}

// --- 2: finite-difference gradients --------------------------------------------------

struct GradStats {
  std::size_t n = 0;
  std::size_t within_1e5 = 0;
  double worst = 0.0;
};

void accumulate(GradStats& st, const Eigen::VectorXd& g, const Eigen::VectorXd& fd) {
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const double rel = std::abs(g[i] - fd[i]) / std::max({std::abs(g[i]), std::abs(fd[i]), 1e-10});
    ++st.n;
    if (rel <= 1e-5) ++st.within_1e5;
    st.worst = std::max(st.worst, rel);
  }
}

// Fourth-order central difference. Truncation error O(h^4) permits a step of
// 1e-3, which keeps cancellation error near 1e-13 of the loss.
Eigen::VectorXd central_fd(const Eigen::VectorXd& theta,
                           const std::function<double(const Eigen::VectorXd&)>& f) {
  Eigen::VectorXd fd(theta.size());
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    const double h = 1e-3 * std::max(1.0, std::abs(theta[i]));
    auto at = [&](double d) {
      Eigen::VectorXd x = theta;
      x[i] += d;
      return f(x);
    };
    fd[i] = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
  }
  return fd;
}

bool grad_ok(const GradStats& st) {
  return static_cast<double>(st.within_1e5) >= 0.95 * static_cast<double>(st.n) && st.worst <= 1e-3;
}

std::string grad_text(const char* name, const GradStats& st) {
  return fmt("%s %zu/%zu within 1e-5, worst %.2g", name, st.within_1e5, st.n, st.worst);
}

Outcome criterion2() {
  const SensorConfig s;
  GradStats imm;
  for (std::uint64_t seed : {1, 2, 3}) {
    GctConfig g;
    g.dt = 1.9;
    g.n_steps = 12;  // 10 filtered steps after the two-measurement initialization
    Dataset ds = make_dataset(1, g, s, 200 + seed);
    ImmParams p = ImmParams::defaults(0.5 * static_cast<double>(seed), s, 0.1 * static_cast<double>(seed), 0.9);
    Eigen::VectorXd grad;
    imm_nll_grad(p, ds, {0}, &grad);
    const Eigen::VectorXd fd = central_fd(p.flatten(), [&](const Eigen::VectorXd& th) {
      ImmParams q = p;
      q.unflatten(th);
      return imm_nll_grad(q, ds, {0}, nullptr);
    });
    accumulate(imm, grad, fd);
  }

  GradStats label, filter;
  for (std::uint64_t seed : {4, 5}) {
    Rng rng(seed);
    const LstmWeights w = LstmWeights::init(8, 8, rng);
    const Eigen::VectorXd theta = w.flatten();
    {
      const Tracklet tr = gct_tracklet(22, 300 + seed, s);  // 20 labelled steps
      ad::Tape t;
      const auto th = t.variable(ad::Matrix(theta));
      const auto y = mkf_label_objective(t, th, w, tr, s, MkfLossKind::kGaussianNll);
      t.backward(y);
      accumulate(label, t.grad(th), central_fd(theta, [&](const Eigen::VectorXd& x) {
                   ad::Tape u;
                   return mkf_label_objective(u, u.constant(ad::Matrix(x)), w, tr, s,
                                              MkfLossKind::kGaussianNll).scalar();
                 }));
    }
    {
      const Tracklet tr = gct_tracklet(22, 400 + seed, s);  // 20 filtered steps
      ad::Tape t;
      const auto th = t.variable(ad::Matrix(theta));
      const auto y = mkf_filter_objective(t, th, w, tr, s, default_q_reg());
      t.backward(y);
      accumulate(filter, t.grad(th), central_fd(theta, [&](const Eigen::VectorXd& x) {
                   ad::Tape u;
                   return mkf_filter_objective(u, u.constant(ad::Matrix(x)), w, tr, s,
                                               default_q_reg()).scalar();
                 }));
    }
  }
  const bool pass = grad_ok(imm) && grad_ok(label) && grad_ok(filter);
  return {pass, grad_text("imm", imm) + "; " + grad_text("mkf-label", label) + "; " +
                    grad_text("mkf-filter", filter)};
}

// --- 3: GP prediction against a dense oracle ------------------------------------------------

Outcome criterion3() {
  Rng rng(3);
  std::normal_distribution<double> n(0.0, 4.0);
  std::uniform_real_distribution<double> u(0.2, 5.0);
  double worst_mean = 0.0, worst_var = 0.0, min_var = 1e300;
  double over = 0.0;
  std::size_t queries = 0;
  for (int model = 0; model < 20; ++model) {
    const GpHyper h{u(rng) * 10.0, u(rng) * 5.0, u(rng) * 0.05};
    Eigen::Matrix2Xd U(2, 50);
    Eigen::VectorXd yx(50), yy(50);
    for (int i = 0; i < 50; ++i) {
      U.col(i) << n(rng), n(rng);
      yx[i] = std::cos(U(0, i) / 3.0) * 5.0 + 0.2 * n(rng);
      yy[i] = U(1, i) + 0.2 * n(rng);
    }
    const GpPair pair{GpModel(U, yx, h), GpModel(U, yy, h)};
    Eigen::MatrixXd K(50, 50);
    for (int i = 0; i < 50; ++i)
      for (int j = 0; j < 50; ++j) K(i, j) = kernel(U.col(i), U.col(j), h);
    const Eigen::MatrixXd Kinv = (K + h.noise_sq * Eigen::MatrixXd::Identity(50, 50)).inverse();
    for (int q = 0; q < 500; ++q) {
      const Vec2 x(n(rng) * 1.5, n(rng) * 1.5);
      Eigen::VectorXd k(50);
      for (int i = 0; i < 50; ++i) k[i] = kernel(x, U.col(i), h);
      const double mx = k.dot(Kinv * yx), my = k.dot(Kinv * yy);
      const double var = h.sigma0_sq - k.dot(Kinv * k);
      const GpPrediction p = gp_predict(pair, x);
      worst_mean = std::max({worst_mean, rel_diff(p.mean.x(), mx), rel_diff(p.mean.y(), my)});
      worst_var = std::max({worst_var, std::abs(p.var.x() - var) / h.sigma0_sq,
                            std::abs(p.var.y() - var) / h.sigma0_sq});
      min_var = std::min(min_var, p.var.minCoeff());
      over = std::max(over, p.var.maxCoeff() - h.sigma0_sq);
      ++queries;
    }
  }
  const bool pass = worst_mean <= 1e-8 && worst_var <= 1e-8 && min_var >= 0.0 && over <= 0.0;
  return {pass, fmt("%zu queries on 20 models: mean err %.2g, var err %.2g (tol 1e-8), var range "
                    "[%.3g, k** %+.2g]",
                    queries, worst_mean, worst_var, min_var, over)};
}

// --- 4: long-run numerical health of every filter --------------------------------------------

Outcome criterion4() {
  const SensorConfig s;
  const Tracklet tr = gct_tracklet(102, 404, s);  // 100 chained steps
  std::size_t checked = 0, bad_cov = 0;
  double worst_mu = 0.0, worst_w = 0.0;
  auto check = [&](const Mat4& P) {
    ++checked;
    if (!is_valid_covariance(P, 1e-9, 1e-9)) ++bad_cov;
  };

  const FilterTrace e = run_ekf(tr, s, {tr.dt, 1.0});
  for (std::size_t k = 0; k < tr.size(); ++k) {
    check(e.predicted[k].cov);
    check(e.posterior[k].cov);
  }

  const ImmTrace m = run_imm(tr, s, ImmParams::defaults(1.0, s, 0.2, 0.9));
  for (std::size_t k = 0; k < tr.size(); ++k) {
    check(m.trace.predicted[k].cov);
    check(m.trace.posterior[k].cov);
    worst_mu = std::max(worst_mu, std::abs(m.mu[k].sum() - 1.0));
  }

  Rng rng(4);
  const LstmWeights w = LstmWeights::init(32, 32, rng);
  const FilterTrace f = run_mkf(tr, s, w);
  for (std::size_t k = 0; k < tr.size(); ++k) {
    check(f.predicted[k].cov);
    check(f.posterior[k].cov);
  }

  GctConfig g;
  g.dt = 1.9;
  GpFitConfig fc;
  fc.hyper0 = {50.0, 10.0, 1.0};
  fc.lml_steps = 0;
  fc.max_points = 300;
  const GpPair gp = gp_fit(make_dataset(10, g, s, 405), fc);
  PfConfig pc;
  pc.particles = 500;
  pc.ess_threshold = 0.5;  // keeps non-uniform weights between resampling steps
  ParticleSet ps = sample_particles(init_track(tr.meas[0], tr.meas[1], tr.dt, s), pc.particles, rng);
  for (std::size_t k = kFirstFilteredStep; k < tr.size(); ++k) {
    const PfStepResult r = pf_step(ps, tr.meas[k], gp, s, tr.dt, pc, rng);
    check(r.predicted.cov);
    check(r.posterior.cov);
    worst_w = std::max(worst_w, std::abs(r.particles.w.sum() - 1.0));
    ps = r.particles;
  }
  const bool pass = bad_cov == 0 && worst_mu <= 1e-12 && worst_w <= 1e-12;
  return {pass, fmt("%zu covariances, %zu invalid; |sum mu - 1| %.2g; |sum w - 1| %.2g (tol 1e-12)",
                    checked, bad_cov, worst_mu, worst_w)};
}

// --- 5 and 7: the simulated benchmark --------------------------------------------------------

void run_pipeline(const fs::path& config_src, const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  fs::copy_file(config_src, dir / "experiment.ini");
  const ExperimentConfig cfg = load_config(dir / "experiment.ini");
  for (const char* m : {"ekf", "gp", "imm", "mkf"}) {
    const double wall = cmd_train(m, cfg, dir / "models");
    log(fmt("%s: trained %s in %.1f s", dir.filename().c_str(), m, wall));
  }
  cmd_evaluate(cfg, dir / "report");
}

Outcome criterion5(const ScoreTable& t) {
  const auto& ekf = t.at("ekf");
  const auto& imm = t.at("imm");
  const auto& mkf = t.at("mkf");
  const auto& gp = t.at("gp");
  struct Check {
    const char* what;
    bool ok;
  };
  const std::vector<Check> checks = {
      {"EKF post in [0.85,1.00]", ekf.rel_upd >= 0.85 && ekf.rel_upd <= 1.00},
      {"EKF pred in [1.00,1.20]", ekf.rel_pred >= 1.00 && ekf.rel_pred <= 1.20},
      {"IMM post < EKF post", imm.rel_upd < ekf.rel_upd},
      {"MKF pred < EKF pred", mkf.rel_pred < ekf.rel_pred},
      {"MKF pred <= 1.05", mkf.rel_pred <= 1.05},
      {"GP post <= 1.3", gp.rel_upd <= 1.3},
  };
  bool pass = true;
  std::string failed;
  for (const auto& c : checks) {
    if (!c.ok) {
      pass = false;
      failed += std::string(failed.empty() ? "" : ", ") + c.what;
    }
  }
  std::string d = fmt("noise %.2f m; pred/post ekf %.4f/%.4f imm %.4f/%.4f mkf %.4f/%.4f gp %.4f/%.4f",
                      t.noise_level, ekf.rel_pred, ekf.rel_upd, imm.rel_pred, imm.rel_upd,
                      mkf.rel_pred, mkf.rel_upd, gp.rel_pred, gp.rel_upd);
  if (!failed.empty()) d += "; failed: " + failed;
  return {pass, d};
}

// --- 6: GPS-like CSV input -------------------------------------------------------------------

// Vehicle-like track at 1 s spacing: speed wanders between 4 and 16 m/s,
// straight legs alternate with turns, and the heading is steered back towards
// the centre of a 3 km area.
void write_gps_csv(const fs::path& p, std::size_t rows, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Vec2 centre(2500.0, 2500.0);
  Vec2 pos = centre + Vec2(n(rng), n(rng)) * 300.0;
  double heading = u(rng) * 2.0 * std::numbers::pi;
  double speed = 10.0;
  double turn = 0.0;
  int leg = 0;
  std::ofstream out(p);
  out.precision(12);
  out << "t,x,y,vx,vy\n";
  for (std::size_t i = 0; i < rows; ++i) {
    if (leg-- <= 0) {
      leg = 10 + static_cast<int>(u(rng) * 40.0);
      turn = u(rng) < 0.5 ? 0.0 : (u(rng) < 0.5 ? -1.0 : 1.0) * (2.0 + 6.0 * u(rng)) * std::numbers::pi / 180.0;
      const Vec2 d = centre - pos;
      if (d.norm() > 1500.0) {
        const double want = std::atan2(d.y(), d.x());
        const double err = wrap_angle(want - heading);
        turn = std::copysign(6.0 * std::numbers::pi / 180.0, err);
        leg = std::min(leg, static_cast<int>(std::abs(err / turn)) + 1);
      }
    }
    speed = std::clamp(speed + 0.3 * n(rng), 4.0, 16.0);
    out << static_cast<double>(i) << ',' << pos.x() << ',' << pos.y() << ','
        << speed * std::cos(heading) << ',' << speed * std::sin(heading) << '\n';
    heading = wrap_angle(heading + turn);
    pos += speed * Vec2(std::cos(heading), std::sin(heading));
  }
}

Outcome criterion6(const fs::path& config_src, const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_gps_csv(dir / "gps_train.csv", 4300, 61);
  write_gps_csv(dir / "gps_test.csv", 1000, 62);
  fs::copy_file(config_src, dir / "experiment.ini");
  const ExperimentConfig cfg = load_config(dir / "experiment.ini");
  const Datasets d = load_datasets(cfg);
  log(fmt("gps csv: %zu train, %zu test tracklets", d.train.size(), d.test.size()));
  for (const char* m : {"ekf", "gp", "imm", "mkf"}) {
    const double wall = cmd_train(m, cfg, dir / "models");
    log(fmt("gps csv: trained %s in %.1f s", m, wall));
  }
  cmd_evaluate(cfg, dir / "report");
  const ScoreTable t = read_scores(dir / "report/scores.csv");
  bool all_ran = t.rows.size() == 4;
  for (const auto& r : t.rows) all_ran = all_ran && std::isfinite(r.rel_pred) && std::isfinite(r.rel_upd);
  const auto problems = validate_manifest(dir / "report");
  const auto model_problems = validate_manifest(dir / "models");
  const double imm_post = t.at("imm").rel_upd;
  const bool pass = d.train.size() == 43 && all_ran && imm_post < 1.0 && problems.empty() &&
                    model_problems.empty();
  std::string detail = fmt("%zu train tracklets, %zu methods scored, IMM post %.4f; post ekf %.4f gp %.4f "
                           "mkf %.4f; manifest %s",
                           d.train.size(), t.rows.size(), imm_post, t.at("ekf").rel_upd,
                           t.at("gp").rel_upd, t.at("mkf").rel_upd,
                           problems.empty() && model_problems.empty() ? "valid" : "INVALID");
  return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dmtrack acceptance suite"};
  fs::path workdir = "acceptance_runs";
  fs::path config_dir = DMT_CONFIG_DIR;
  std::vector<int> only;
  app.add_option("--workdir", workdir, "scratch directory for experiment runs");
  app.add_option("--configs", config_dir, "directory holding the experiment configs");
  app.add_option("--only", only, "run only these criteria");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(workdir);

  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };
  int failures = 0;
  auto report = [&](int c, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %d: %s  %s  [%.0f s]\n", c, o.pass ? "PASS" : "FAIL", o.detail.c_str(), s);
    std::fflush(stdout);
    if (!o.pass) ++failures;
  };

  if (wanted(1)) report(1, criterion1);
  if (wanted(2)) report(2, criterion2);
  if (wanted(3)) report(3, criterion3);
  if (wanted(4)) report(4, criterion4);

  const fs::path gct = config_dir / "gct_acceptance.ini";
  bool have5 = false;
  if (wanted(5) || wanted(7)) {
    report(5, [&] {
      run_pipeline(gct, workdir / "gct_run1");
      have5 = true;
      return criterion5(read_report(workdir / "gct_run1/report"));
    });
  }
  if (wanted(6)) report(6, [&] { return criterion6(config_dir / "gps_csv.ini", workdir / "gps_csv"); });
  if (wanted(7)) {
    report(7, [&]() -> Outcome {
      if (!have5) return {false, "first run did not complete"};
      run_pipeline(gct, workdir / "gct_run2");
      const std::string a = slurp(workdir / "gct_run1/report/scores.csv");
      const std::string b = slurp(workdir / "gct_run2/report/scores.csv");
      return {!a.empty() && a == b,
              fmt("full retrain and evaluation; scores.csv %s (%zu bytes)",
                  a == b ? "bit-identical" : "DIFFERS", a.size())};
    });
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
