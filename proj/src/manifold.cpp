#include "gsbi/manifold.hpp"

#include <cmath>
#include <string>

#include "gsbi/error.hpp"

namespace gsbi {

namespace {

constexpr double kUnitTolerance = 1e-6;
constexpr double kTangentTolerance = 1e-6;
constexpr double kSmallTangent = 1e-12;

void require_unit(const Vec4& q, const char* what) {
  const double n = q.norm();
  if (!std::isfinite(n) || std::abs(n - 1.0) > kUnitTolerance) {
    fail(ErrorKind::InvalidInput,
         std::string(what) + ": quaternion norm " + std::to_string(n) +
             " deviates from 1 by more than 1e-6");
  }
}

}  // namespace

UnitQuaternion UnitQuaternion::from_unit(const Vec4& xyzw) {
  require_unit(xyzw, "UnitQuaternion::from_unit");
  return UnitQuaternion(xyzw / xyzw.norm());
}

UnitQuaternion UnitQuaternion::normalized(const Vec4& xyzw) {
  const double n = xyzw.norm();
  if (!std::isfinite(n) || n < 1e-300) {
    fail(ErrorKind::InvalidInput, "cannot normalize a zero or non-finite quaternion");
  }
  return UnitQuaternion(xyzw / n);
}

UnitQuaternion UnitQuaternion::from_rotation(const Mat3& rotation) {
  const Eigen::Quaterniond q(rotation);
  return normalized(Vec4(q.x(), q.y(), q.z(), q.w()));
}

UnitQuaternion UnitQuaternion::from_axis_angle(const Vec3& axis, double angle) {
  const Vec3 a = axis.normalized();
  const double s = std::sin(0.5 * angle);
  return normalized(Vec4(a.x() * s, a.y() * s, a.z() * s, std::cos(0.5 * angle)));
}

Mat3 UnitQuaternion::rotation() const {
  return Eigen::Quaterniond(w(), x(), y(), z()).toRotationMatrix();
}

UnitQuaternion UnitQuaternion::operator-() const { return UnitQuaternion(-coeffs_); }

HandGradient operator+(HandGradient a, const HandGradient& b) { return a += b; }

HandGradient operator-(const HandGradient& g) { return {-g.position, -g.orientation}; }

Vec4 project_to_tangent(const UnitQuaternion& q, const Vec4& v) {
  const Vec4& c = q.coeffs();
  Vec4 out = v - c.dot(v) * c;
  // A second pass removes the residual left by cancellation when v is nearly
  // parallel to q.
  out -= c.dot(out) * c;
  return out;
}

Vec4 project_to_tangent(const Vec4& q, const Vec4& v) {
  require_unit(q, "project_to_tangent");
  return project_to_tangent(UnitQuaternion::from_unit(q), v);
}

UnitQuaternion exp_map(const UnitQuaternion& q, const Vec4& tangent) {
  const Vec4& c = q.coeffs();
  if (!tangent.allFinite()) {
    fail(ErrorKind::Numeric, "exp_map: non-finite tangent");
  }
  if (std::abs(c.dot(tangent)) > kTangentTolerance * std::max(1.0, tangent.norm())) {
    fail(ErrorKind::InvalidInput, "exp_map: tangent is not orthogonal to the base point");
  }
  const double n = tangent.norm();
  if (n == 0.0) return q;
  if (n < kSmallTangent) {
    return UnitQuaternion::normalized(c);
  }
  return UnitQuaternion::normalized(std::cos(n) * c + (std::sin(n) / n) * tangent);
}

TangentVector riemannian_gradient(const ProductPoint& p, const HandGradient& g) {
  return {g.position, project_to_tangent(p.orientation, g.orientation)};
}

ProductPoint riemannian_step(const ProductPoint& p, const HandGradient& g,
                             const StepSizes& steps) {
  static const char* const kNames[] = {"position.x", "position.y", "position.z",
                                       "orientation.x", "orientation.y",
                                       "orientation.z", "orientation.w"};
  for (int i = 0; i < 7; ++i) {
    const double v = i < 3 ? g.position[i] : g.orientation[i - 3];
    if (!std::isfinite(v)) {
      fail(ErrorKind::Numeric,
           std::string("riemannian_step: non-finite gradient component ") + kNames[i]);
    }
  }
  const TangentVector grad = riemannian_gradient(p, g);
  ProductPoint out;
  out.position = p.position - steps.position * grad.d_position;
  out.orientation = exp_map(p.orientation, -steps.orientation * grad.d_orientation);
  return out;
}

double geodesic_distance(const UnitQuaternion& a, const UnitQuaternion& b) {
  const double d = std::min(1.0, std::abs(a.coeffs().dot(b.coeffs())));
  return std::acos(d);
}

}  // namespace gsbi
