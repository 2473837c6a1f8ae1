#include "dmtrack/simkit.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "dmtrack/errors.hpp"

namespace dmt {

namespace fs = std::filesystem;

void GctConfig::validate() const {
  if (n_steps == 0) throw ConfigError("gct.n_steps must be > 0");
  if (!(dt > 0.0)) throw ConfigError("gct.dt must be > 0");
  if (half_period == 0) throw ConfigError("gct.half_period must be > 0");
  if (!(turn_rate_deg.first < turn_rate_deg.second)) {
    throw ConfigError("gct.turn_rate_min must be < gct.turn_rate_max");
  }
  if (!(speed > 0.0)) throw ConfigError("gct.speed must be > 0");
  if ((start_hi - start_lo).minCoeff() < 0.0) {
    throw ConfigError("gct.start box bounds are inverted");
  }
}

Rng stream_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32), 0x5eedu};
  return Rng(seq);
}

namespace {

// Advances position along a circular arc of signed turn rate `omega` (rad/s).
Vec2 arc_step(const Vec2& p, double heading, double speed, double omega, double dt) {
  if (omega == 0.0) {
    return p + speed * dt * Vec2(std::cos(heading), std::sin(heading));
  }
  const double h2 = heading + omega * dt;
  return p + (speed / omega) * Vec2(std::sin(h2) - std::sin(heading),
                                    std::cos(heading) - std::cos(h2));
}

Tracklet integrate_turns(const GctConfig& cfg, double omega, Vec2 pos, double heading,
                         bool alternate) {
  Tracklet tr;
  tr.dt = cfg.dt;
  tr.truth.reserve(cfg.n_steps);
  for (std::size_t k = 0; k < cfg.n_steps; ++k) {
    Vec4 s;
    s << pos, cfg.speed * std::cos(heading), cfg.speed * std::sin(heading);
    tr.truth.push_back(s);
    const bool left = !alternate || (k / cfg.half_period) % 2 == 0;
    const double w = left ? omega : -omega;
    pos = arc_step(pos, heading, cfg.speed, w, cfg.dt);
    heading += w * cfg.dt;
  }
  return tr;
}

double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

}  // namespace

Tracklet generate_gct(const GctConfig& cfg, Rng& rng) {
  cfg.validate();
  std::uniform_real_distribution<double> rate(cfg.turn_rate_deg.first, cfg.turn_rate_deg.second);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double omega = deg2rad(rate(rng));
  Vec2 start;
  start.x() = cfg.start_lo.x() + (cfg.start_hi.x() - cfg.start_lo.x()) * u01(rng);
  start.y() = cfg.start_lo.y() + (cfg.start_hi.y() - cfg.start_lo.y()) * u01(rng);
  const double heading = 2.0 * std::numbers::pi * u01(rng);
  return integrate_turns(cfg, omega, start, heading, true);
}

Tracklet generate_gct_fixed(const GctConfig& cfg, double turn_rate_deg, const Vec2& start,
                            double heading, bool alternate) {
  return integrate_turns(cfg, deg2rad(turn_rate_deg), start, heading, alternate);
}

Tracklet simulate_measurements(const Tracklet& truth, const SensorConfig& sensor, Rng& rng) {
  if (truth.truth.empty()) throw DataError("cannot simulate measurements for empty tracklet");
  std::normal_distribution<double> n01(0.0, 1.0);
  Tracklet out = truth;
  out.meas.clear();
  out.meas.reserve(truth.size());
  for (std::size_t k = 0; k < truth.size(); ++k) {
    const Vec2 h = measure(truth.truth[k].head<2>(), sensor);
    Measurement z;
    z.t = static_cast<long>(k);
    z.range = h.x() + sensor.sigma_r * n01(rng);
    z.bearing = wrap_angle(h.y() + sensor.sigma_a * n01(rng));
    out.meas.push_back(z);
  }
  return out;
}

Dataset make_dataset(std::size_t n_tracklets, const GctConfig& cfg, const SensorConfig& sensor,
                     std::uint64_t seed, DatasetRole role) {
  cfg.validate();
  Dataset ds;
  ds.sensor = sensor;
  ds.role = role;
  ds.tracklets.reserve(n_tracklets);
  for (std::size_t i = 0; i < n_tracklets; ++i) {
    Rng rng = stream_rng(seed, i);
    ds.tracklets.push_back(simulate_measurements(generate_gct(cfg, rng), sensor, rng));
  }
  return ds;
}

// --- CSV -----------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const fs::path& file, std::size_t line) {
  std::size_t b = s.find_first_not_of(" \t\r");
  std::size_t e = s.find_last_not_of(" \t\r");
  if (b == std::string::npos) throw ParseError(file.string(), line, "empty field");
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data() + b, s.data() + e + 1, v);
  if (ec != std::errc() || p != s.data() + e + 1) {
    throw ParseError(file.string(), line, "not a number: '" + s + "'");
  }
  return v;
}

std::string strip(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
  return s;
}

std::vector<std::vector<double>> read_numeric_csv(const fs::path& path,
                                                  const std::string& header) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string(), 0, "cannot open file");
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError(path.string(), 1, "missing header");
  ++lineno;
  if (strip(line) != header) {
    throw ParseError(path.string(), lineno, "expected header '" + header + "'");
  }
  const std::size_t ncols = split_csv_line(header).size();
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (strip(line).empty()) continue;
    auto cells = split_csv_line(strip(line));
    if (cells.size() != ncols) {
      throw ParseError(path.string(), lineno,
                       "expected " + std::to_string(ncols) + " fields, got " +
                           std::to_string(cells.size()));
    }
    std::vector<double> row;
    row.reserve(ncols);
    for (const auto& c : cells) row.push_back(parse_double(c, path, lineno));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(17);
  return out;
}

}  // namespace

std::vector<TrajectoryRow> read_trajectory_csv(const fs::path& path) {
  std::vector<TrajectoryRow> out;
  for (const auto& r : read_numeric_csv(path, "t,x,y,vx,vy")) {
    out.push_back({r[0], Vec4(r[1], r[2], r[3], r[4])});
  }
  return out;
}

void write_trajectory_csv(const fs::path& path, const Tracklet& tr) {
  auto out = open_out(path);
  out << "t,x,y,vx,vy\n";
  for (std::size_t k = 0; k < tr.truth.size(); ++k) {
    const Vec4& s = tr.truth[k];
    out << static_cast<double>(k) * tr.dt << ',' << s[0] << ',' << s[1] << ',' << s[2] << ','
        << s[3] << '\n';
  }
}

std::vector<Measurement> read_measurement_csv(const fs::path& path) {
  std::vector<Measurement> out;
  for (const auto& r : read_numeric_csv(path, "t,range,bearing")) {
    out.push_back({static_cast<long>(std::llround(r[0])), r[1], r[2]});
  }
  return out;
}

void write_measurement_csv(const fs::path& path, const std::vector<Measurement>& meas) {
  auto out = open_out(path);
  out << "t,range,bearing\n";
  for (const auto& z : meas) out << z.t << ',' << z.range << ',' << z.bearing << '\n';
}

Dataset ingest_csv(const fs::path& traj_path, const SensorConfig& sensor,
                   std::size_t tracklet_len, Rng& rng) {
  if (tracklet_len < 2) throw ConfigError("tracklet_len must be >= 2");
  const auto rows = read_trajectory_csv(traj_path);
  if (rows.size() < tracklet_len) {
    throw DataError(traj_path.string() + ": " + std::to_string(rows.size()) +
                    " rows is fewer than one tracklet of " + std::to_string(tracklet_len));
  }
  const double dt = rows[1].t - rows[0].t;
  if (!(dt > 0.0)) throw ParseError(traj_path.string(), 3, "time column must increase");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double d = rows[i].t - rows[i - 1].t;
    if (std::abs(d - dt) > 1e-6 * std::max(1.0, dt)) {
      throw ParseError(traj_path.string(), i + 2, "non-uniform time step");
    }
  }
  Dataset ds;
  ds.sensor = sensor;
  const std::size_t n = rows.size() / tracklet_len;
  for (std::size_t j = 0; j < n; ++j) {
    Tracklet tr;
    tr.dt = dt;
    for (std::size_t k = 0; k < tracklet_len; ++k) {
      tr.truth.push_back(rows[j * tracklet_len + k].state);
    }
    ds.tracklets.push_back(simulate_measurements(tr, sensor, rng));
  }
  return ds;
}

namespace {

std::string indexed(const char* stem, std::size_t i) {
  std::ostringstream s;
  s << stem << '_' << std::setw(4) << std::setfill('0') << i << ".csv";
  return s.str();
}

}  // namespace

void write_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < ds.tracklets.size(); ++i) {
    write_trajectory_csv(dir / indexed("truth", i), ds.tracklets[i]);
    write_measurement_csv(dir / indexed("meas", i), ds.tracklets[i].meas);
  }
}

Dataset read_dataset(const fs::path& dir, const SensorConfig& sensor, DatasetRole role) {
  Dataset ds;
  ds.sensor = sensor;
  ds.role = role;
  for (std::size_t i = 0;; ++i) {
    const fs::path tp = dir / indexed("truth", i);
    if (!fs::exists(tp)) break;
    const auto rows = read_trajectory_csv(tp);
    Tracklet tr;
    tr.dt = rows.size() > 1 ? rows[1].t - rows[0].t : 1.0;
    for (const auto& r : rows) tr.truth.push_back(r.state);
    tr.meas = read_measurement_csv(dir / indexed("meas", i));
    if (tr.meas.size() != tr.truth.size()) {
      throw DataError(tp.string() + ": truth and measurement lengths differ");
    }
    ds.tracklets.push_back(std::move(tr));
  }
  if (ds.tracklets.empty()) throw DataError("no tracklets found in " + dir.string());
  return ds;
}

}  // namespace dmt
