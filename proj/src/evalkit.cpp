#include "dmtrack/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "dmtrack/errors.hpp"

namespace dmt {

void RunRecord::validate() const {
  const std::size_t n = truth.size();
  if (predicted.size() != n || posterior.size() != n || measured.size() != n) {
    throw std::invalid_argument("RunRecord: sequence lengths differ");
  }
}

RunRecord make_record(const Tracklet& tr, const FilterTrace& trace, const SensorConfig& sensor) {
  const std::size_t n = tr.size();
  if (trace.predicted.size() != n || trace.posterior.size() != n || tr.meas.size() != n) {
    throw std::invalid_argument("make_record: trace length does not match the tracklet");
  }
  RunRecord r;
  r.predicted.reserve(n);
  r.posterior.reserve(n);
  r.truth.reserve(n);
  r.measured.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    r.predicted.push_back(trace.predicted[k].position());
    r.posterior.push_back(trace.posterior[k].position());
    r.truth.push_back(tr.truth[k].head<2>());
    r.measured.push_back(polar_to_cartesian(tr.meas[k], sensor));
  }
  return r;
}

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::kPredicted: return "pred";
    case Phase::kPosterior: return "upd";
    case Phase::kMeasured: return "meas";
  }
  return "?";
}

namespace {

const std::vector<Vec2>& estimates(const RunRecord& r, Phase p) {
  switch (p) {
    case Phase::kPredicted: return r.predicted;
    case Phase::kPosterior: return r.posterior;
    case Phase::kMeasured: return r.measured;
  }
  return r.measured;
}

}  // namespace

std::vector<SeriesPoint> rmse_series(const std::vector<RunRecord>& records, Phase phase) {
  if (records.empty()) throw std::invalid_argument("rmse_series: no records");
  std::size_t len = 0;
  for (const auto& r : records) {
    r.validate();
    len = std::max(len, r.size());
  }
  std::vector<SeriesPoint> out;
  for (std::size_t k = 0; k < len; ++k) {
    double sum_sq = 0.0;
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : records) {
      if (k < r.first_step || k >= r.size()) continue;
      const double e = (estimates(r, phase)[k] - r.truth[k]).norm();
      sum_sq += e * e;
      sum += e;
      ++n;
    }
    if (n == 0) continue;
    SeriesPoint p;
    p.t = static_cast<long>(k);
    p.count = n;
    p.rmse = std::sqrt(sum_sq / static_cast<double>(n));
    const double mean = sum / static_cast<double>(n);
    const double sd = std::sqrt(std::max(0.0, sum_sq / static_cast<double>(n) - mean * mean));
    p.lo = std::max(0.0, p.rmse - 2.0 * sd);
    p.hi = p.rmse + 2.0 * sd;
    out.push_back(p);
  }
  return out;
}

double average_rmse(const std::vector<RunRecord>& records, Phase phase) {
  double sum_sq = 0.0;
  std::size_t n = 0;
  for (const auto& r : records) {
    r.validate();
    const auto& est = estimates(r, phase);
    for (std::size_t k = r.first_step; k < r.size(); ++k) {
      sum_sq += (est[k] - r.truth[k]).squaredNorm();
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("average_rmse: no scored steps");
  return std::sqrt(sum_sq / static_cast<double>(n));
}

double noise_level(const std::vector<RunRecord>& records) {
  return average_rmse(records, Phase::kMeasured);
}

double relative_score(double avg_rmse, const std::vector<RunRecord>& records) {
  const double level = noise_level(records);
  if (!(level > 0.0)) throw std::domain_error("relative_score: measurement error level is zero");
  return avg_rmse / level;
}

const MethodScore& ScoreTable::at(const std::string& method) const {
  for (const auto& r : rows) {
    if (r.method == method) return r;
  }
  throw std::out_of_range("no scores for method '" + method + "'");
}

ScoreTable score_methods(const MethodRecords& runs) {
  if (runs.empty()) throw std::invalid_argument("score_methods: empty method set");
  ScoreTable t;
  t.noise_level = noise_level(runs.front().second);
  if (!(t.noise_level > 0.0)) throw std::domain_error("score_methods: measurement error level is zero");
  for (const auto& [name, recs] : runs) {
    MethodScore s;
    s.method = name;
    s.avg_pred = average_rmse(recs, Phase::kPredicted);
    s.avg_upd = average_rmse(recs, Phase::kPosterior);
    s.rel_pred = s.avg_pred / t.noise_level;
    s.rel_upd = s.avg_upd / t.noise_level;
    t.rows.push_back(s);
  }
  return t;
}

namespace {

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << std::setprecision(10);
  return out;
}

void close_out(std::ofstream& out, const std::filesystem::path& p) {
  out.close();
  if (!out) throw std::runtime_error("write failed: " + p.string());
}

}  // namespace

void make_report(const std::filesystem::path& dir, const MethodRecords& runs) {
  if (runs.empty()) throw std::invalid_argument("make_report: empty method set");
  const ScoreTable table = score_methods(runs);
  std::filesystem::create_directories(dir);

  {
    const auto p = dir / "scores.csv";
    auto out = open_out(p);
    out << "method,phase,avg,rel\n";
    for (const auto& r : table.rows) {
      out << r.method << ",pred," << r.avg_pred << ',' << r.rel_pred << '\n';
      out << r.method << ",upd," << r.avg_upd << ',' << r.rel_upd << '\n';
    }
    close_out(out, p);
  }
  {
    const auto p = dir / "noise_level.csv";
    auto out = open_out(p);
    out << "noise_level\n" << table.noise_level << '\n';
    close_out(out, p);
  }
  for (const auto& [name, recs] : runs) {
    for (Phase ph : {Phase::kPredicted, Phase::kPosterior}) {
      const auto p = dir / ("series_" + name + "_" + phase_name(ph) + ".csv");
      auto out = open_out(p);
      out << "t,rmse,lo,hi\n";
      for (const auto& s : rmse_series(recs, ph)) {
        out << s.t << ',' << s.rmse << ',' << s.lo << ',' << s.hi << '\n';
      }
      close_out(out, p);
    }
  }
  {
    const auto p = dir / "summary.txt";
    auto out = open_out(p);
    out << std::fixed << std::setprecision(4);
    out << "noise level (m): " << table.noise_level << "\n\n";
    out << std::left << std::setw(12) << "method" << std::right << std::setw(12) << "avg_pred"
        << std::setw(10) << "rel_pred" << std::setw(12) << "avg_upd" << std::setw(10)
        << "rel_upd" << '\n';
    for (const auto& r : table.rows) {
      out << std::left << std::setw(12) << r.method << std::right << std::setw(12) << r.avg_pred
          << std::setw(10) << r.rel_pred << std::setw(12) << r.avg_upd << std::setw(10)
          << r.rel_upd << '\n';
    }
    const auto best_pred = std::min_element(
        table.rows.begin(), table.rows.end(),
        [](const auto& a, const auto& b) { return a.avg_pred < b.avg_pred; });
    const auto best_upd = std::min_element(
        table.rows.begin(), table.rows.end(),
        [](const auto& a, const auto& b) { return a.avg_upd < b.avg_upd; });
    out << "\nbest after prediction: " << best_pred->method << '\n';
    out << "best after update: " << best_upd->method << '\n';
    close_out(out, p);
  }
}

ScoreTable read_scores(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string(), 0, "cannot open file");
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line) || line != "method,phase,avg,rel") {
    throw ParseError(path.string(), 1, "unexpected header");
  }
  ScoreTable t;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string method, phase, avg, rel;
    if (!std::getline(ss, method, ',') || !std::getline(ss, phase, ',') ||
        !std::getline(ss, avg, ',') || !std::getline(ss, rel)) {
      throw ParseError(path.string(), lineno, "expected 4 fields");
    }
    auto it = std::find_if(t.rows.begin(), t.rows.end(),
                           [&](const MethodScore& m) { return m.method == method; });
    if (it == t.rows.end()) {
      t.rows.push_back({method});
      it = t.rows.end() - 1;
    }
    try {
      if (phase == "pred") {
        it->avg_pred = std::stod(avg);
        it->rel_pred = std::stod(rel);
      } else if (phase == "upd") {
        it->avg_upd = std::stod(avg);
        it->rel_upd = std::stod(rel);
      } else {
        throw ParseError(path.string(), lineno, "unknown phase '" + phase + "'");
      }
    } catch (const std::logic_error&) {
      throw ParseError(path.string(), lineno, "bad number");
    }
  }
  return t;
}

}  // namespace dmt
