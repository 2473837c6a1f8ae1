#include "dmtrack/statespace.hpp"

#include <cmath>
#include <numbers>

#include "dmtrack/errors.hpp"

namespace dmt {

double wrap_angle(double a) {
  double w = std::remainder(a, 2.0 * std::numbers::pi);
  if (w <= -std::numbers::pi) w += 2.0 * std::numbers::pi;
  return w;
}

namespace {

Vec2 relative(const Vec2& pos, const SensorConfig& sensor) {
  Vec2 d = pos - sensor.origin;
  if (d.x() == 0.0 && d.y() == 0.0) {
    throw DegenerateGeometry("target position coincides with sensor origin");
  }
  return d;
}

}  // namespace

Vec2 measure(const Vec2& pos, const SensorConfig& sensor) {
  const Vec2 d = relative(pos, sensor);
  return {std::hypot(d.x(), d.y()), std::atan2(d.y(), d.x())};
}

Mat24 measure_jacobian(const Vec4& mean, const SensorConfig& sensor) {
  const Vec2 d = relative(mean.head<2>(), sensor);
  const double r2 = d.squaredNorm();
  const double r = std::sqrt(r2);
  Mat24 h = Mat24::Zero();
  h(0, 0) = d.x() / r;
  h(0, 1) = d.y() / r;
  h(1, 0) = -d.y() / r2;
  h(1, 1) = d.x() / r2;
  return h;
}

Vec2 polar_to_cartesian(double range, double bearing, const SensorConfig& sensor) {
  return sensor.origin + range * Vec2(std::cos(bearing), std::sin(bearing));
}

Vec2 polar_to_cartesian(const Measurement& z, const SensorConfig& sensor) {
  return polar_to_cartesian(z.range, z.bearing, sensor);
}

Mat2 polar_to_cartesian_jacobian(double range, double bearing) {
  const double c = std::cos(bearing);
  const double s = std::sin(bearing);
  Mat2 j;
  j << c, -range * s, s, range * c;
  return j;
}

double min_eigenvalue(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

bool is_valid_covariance(const Eigen::MatrixXd& cov, double rel_tol, double psd_tol) {
  if (cov.rows() != cov.cols() || !cov.allFinite()) return false;
  const double scale = std::max(cov.cwiseAbs().maxCoeff(), 1e-300);
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > rel_tol * scale) return false;
  const double tr = cov.trace();
  return min_eigenvalue(cov) >= -psd_tol * std::abs(tr);
}

}  // namespace dmt
