#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "doctest.h"
#include "dmtrack/evalkit.hpp"

using namespace dmt;
namespace fs = std::filesystem;

namespace {

RunRecord record(std::size_t n, const std::function<Vec2(std::size_t)>& err_pred,
                 const std::function<Vec2(std::size_t)>& err_upd,
                 const std::function<Vec2(std::size_t)>& err_meas) {
  RunRecord r;
  for (std::size_t k = 0; k < n; ++k) {
    const Vec2 t(100.0 * k, -50.0 * k);
    r.truth.push_back(t);
    r.predicted.push_back(t + err_pred(k));
    r.posterior.push_back(t + err_upd(k));
    r.measured.push_back(t + err_meas(k));
  }
  return r;
}

std::vector<RunRecord> synthetic(std::size_t tracklets, std::size_t steps, double scale) {
  std::vector<RunRecord> out;
  for (std::size_t i = 0; i < tracklets; ++i) {
    const double a = 1.0 + 0.25 * i;
    out.push_back(record(
        steps, [&](std::size_t k) { return Vec2(scale * a * std::sin(0.3 * k), scale * 0.5 * k); },
        [&](std::size_t k) { return Vec2(scale * a * 0.5, scale * std::cos(0.7 * k)); },
        [&](std::size_t k) { return Vec2(3.0 * a, 4.0 + 0.1 * k); }));
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("exact estimates give an all-zero series") {
  const auto zero = [](std::size_t) { return Vec2::Zero().eval(); };
  const std::vector<RunRecord> recs = {record(10, zero, zero, [](std::size_t) { return Vec2(1, 1); })};
  for (const auto& p : rmse_series(recs, Phase::kPredicted)) {
    CHECK(p.rmse == 0.0);
    CHECK(p.lo == 0.0);
    CHECK(p.hi == 0.0);
  }
  CHECK(average_rmse(recs, Phase::kPosterior) == 0.0);
  CHECK(relative_score(0.0, recs) == 0.0);
}

TEST_CASE("single step with a 3-4 error has RMSE 5") {
  RunRecord r;
  r.first_step = 0;
  r.truth = {Vec2(10, 10)};
  r.predicted = {Vec2(13, 14)};
  r.posterior = {Vec2(10, 10)};
  r.measured = {Vec2(13, 14)};
  const auto s = rmse_series({r}, Phase::kPredicted);
  REQUIRE(s.size() == 1);
  CHECK(s[0].rmse == doctest::Approx(5.0));
  CHECK(s[0].count == 1);
  CHECK(relative_score(average_rmse({r}, Phase::kPredicted), {r}) == doctest::Approx(1.0));
}

TEST_CASE("series equals a brute-force recomputation") {
  const auto recs = synthetic(7, 30, 2.0);
  for (Phase ph : {Phase::kPredicted, Phase::kPosterior, Phase::kMeasured}) {
    const auto s = rmse_series(recs, ph);
    REQUIRE(s.size() == 28);
    double pooled = 0.0;
    std::size_t total = 0;
    for (const auto& p : s) {
      const auto k = static_cast<std::size_t>(p.t);
      double sq = 0.0, sum = 0.0;
      for (const auto& r : recs) {
        const Vec2 est = ph == Phase::kPredicted ? r.predicted[k]
                         : ph == Phase::kPosterior ? r.posterior[k] : r.measured[k];
        const double e = (est - r.truth[k]).norm();
        sq += e * e;
        sum += e;
      }
      const double n = static_cast<double>(recs.size());
      const double rmse = std::sqrt(sq / n);
      const double sd = std::sqrt(std::max(0.0, sq / n - (sum / n) * (sum / n)));
      CHECK(std::abs(p.rmse - rmse) <= 1e-12 * std::max(1.0, rmse));
      CHECK(std::abs(p.hi - (rmse + 2 * sd)) <= 1e-12 * std::max(1.0, rmse));
      CHECK(p.lo >= 0.0);
      pooled += p.rmse * p.rmse * static_cast<double>(p.count);
      total += p.count;
    }
    // The aggregate is the count-weighted quadratic mean of the series.
    CHECK(average_rmse(recs, ph) == doctest::Approx(std::sqrt(pooled / static_cast<double>(total))).epsilon(1e-12));
  }
}

TEST_CASE("the measurement as estimator scores exactly one") {
  auto recs = synthetic(4, 20, 1.0);
  for (auto& r : recs) r.posterior = r.measured;
  CHECK(relative_score(average_rmse(recs, Phase::kPosterior), recs) == 1.0);
  CHECK(relative_score(average_rmse(recs, Phase::kMeasured), recs) == 1.0);
}

TEST_CASE("zero noise level raises") {
  auto recs = synthetic(2, 10, 1.0);
  for (auto& r : recs) r.measured = r.truth;
  CHECK_THROWS_AS(relative_score(1.0, recs), std::domain_error);
}

TEST_CASE("empty inputs raise") {
  CHECK_THROWS_AS(make_report(fs::temp_directory_path() / "dmt_empty_report", {}), std::invalid_argument);
  CHECK_THROWS_AS(score_methods({}), std::invalid_argument);
  CHECK_THROWS_AS(rmse_series({}, Phase::kPredicted), std::invalid_argument);
  RunRecord bad;
  bad.truth = {Vec2::Zero()};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("four methods give a four-row table and a report") {
  const fs::path dir = fs::temp_directory_path() / "dmt_report_four";
  fs::remove_all(dir);
  MethodRecords runs = {{"ekf", synthetic(5, 25, 3.0)},
                        {"gp", synthetic(5, 25, 2.0)},
                        {"imm", synthetic(5, 25, 2.5)},
                        {"mkf", synthetic(5, 25, 1.5)}};
  make_report(dir, runs);
  const ScoreTable t = read_scores(dir / "scores.csv");
  REQUIRE(t.rows.size() == 4);
  const ScoreTable ref = score_methods(runs);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(t.rows[i].method == ref.rows[i].method);
    CHECK(t.rows[i].rel_pred == doctest::Approx(ref.rows[i].rel_pred).epsilon(1e-9));
    CHECK(t.rows[i].avg_upd == doctest::Approx(ref.rows[i].avg_upd).epsilon(1e-9));
  }
  for (const char* m : {"ekf", "gp", "imm", "mkf"}) {
    CHECK(fs::exists(dir / (std::string("series_") + m + "_pred.csv")));
    CHECK(fs::exists(dir / (std::string("series_") + m + "_upd.csv")));
  }
  const std::string summary = slurp(dir / "summary.txt");
  CHECK(summary.find("best after prediction: mkf") != std::string::npos);
  CHECK(summary.find("best after update: mkf") != std::string::npos);
}

TEST_CASE("report matches the golden files") {
  const fs::path dir = fs::temp_directory_path() / "dmt_report_golden";
  fs::remove_all(dir);
  MethodRecords runs = {{"ekf", synthetic(3, 12, 4.0)}, {"imm", synthetic(3, 12, 2.0)}};
  make_report(dir, runs);
  const fs::path golden = DMT_GOLDEN_DIR;
  for (const char* f : {"scores.csv", "noise_level.csv", "series_imm_upd.csv", "summary.txt"}) {
    INFO(f);
    CHECK(slurp(dir / f) == slurp(golden / f));
  }
}
