#pragma once

#include <Eigen/Dense>
#include <vector>

namespace dmt {

using Vec2 = Eigen::Vector2d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat4 = Eigen::Matrix4d;
using Mat24 = Eigen::Matrix<double, 2, 4>;
using Mat42 = Eigen::Matrix<double, 4, 2>;

// State ordering shared by every module: [x1, x2, v1, v2] in m and m/s.
inline constexpr int kStateDim = 4;
inline constexpr int kMeasDim = 2;

struct StateEstimate {
  Vec4 mean = Vec4::Zero();
  Mat4 cov = Mat4::Zero();
  long t = 0;

  Vec2 position() const { return mean.head<2>(); }
  Vec2 velocity() const { return mean.tail<2>(); }
};

struct Measurement {
  long t = 0;
  double range = 0.0;    // m
  double bearing = 0.0;  // rad, (-pi, pi]

  Vec2 as_vector() const { return {range, bearing}; }
};

struct SensorConfig {
  Vec2 origin = Vec2::Zero();
  double sigma_r = 25.0;  // m, standard deviation
  double sigma_a = 0.01;  // rad, standard deviation

  Mat2 noise_cov() const {
    return Vec2(sigma_r * sigma_r, sigma_a * sigma_a).asDiagonal();
  }
  bool operator==(const SensorConfig&) const = default;
};

/// Fixed-length ground-truth segment with its measurement sequence.
struct Tracklet {
  double dt = 1.0;
  std::vector<Vec4> truth;
  std::vector<Measurement> meas;

  std::size_t size() const { return truth.size(); }
};

/// Wraps an angle into (-pi, pi].
double wrap_angle(double a);

/// Range and bearing of `pos` as seen from the sensor. Throws DegenerateGeometry
/// when `pos` coincides with the sensor origin.
Vec2 measure(const Vec2& pos, const SensorConfig& sensor);

/// Analytic Jacobian of measure() with respect to the full 4-D state.
Mat24 measure_jacobian(const Vec4& mean, const SensorConfig& sensor);

Vec2 polar_to_cartesian(const Measurement& z, const SensorConfig& sensor);
Vec2 polar_to_cartesian(double range, double bearing, const SensorConfig& sensor);

/// Jacobian of polar_to_cartesian with respect to (range, bearing).
Mat2 polar_to_cartesian_jacobian(double range, double bearing);

/// True when `cov` is symmetric within `rel_tol` (relative to its largest entry)
/// and its minimum eigenvalue is at least -psd_tol * trace.
bool is_valid_covariance(const Eigen::MatrixXd& cov, double rel_tol = 1e-9,
                         double psd_tol = 1e-9);

/// Minimum eigenvalue of the symmetric part of `m`.
double min_eigenvalue(const Eigen::MatrixXd& m);

}  // namespace dmt
