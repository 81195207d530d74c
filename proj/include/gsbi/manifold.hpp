#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace gsbi {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;

/// Unit quaternion stored scalar-last as (x, y, z, w).
///
/// q and -q are kept distinct: nothing here folds a quaternion onto a
/// hemisphere, so optimization runs on S^3 rather than on SO(3).
class UnitQuaternion {
 public:
  UnitQuaternion() : coeffs_(0.0, 0.0, 0.0, 1.0) {}

  /// Accepts a 4-vector whose norm is within 1e-6 of one and renormalizes it.
  /// Throws ErrorKind::InvalidInput otherwise.
  static UnitQuaternion from_unit(const Vec4& xyzw);
  /// Normalizes any non-zero, finite 4-vector.
  static UnitQuaternion normalized(const Vec4& xyzw);
  static UnitQuaternion from_rotation(const Mat3& rotation);
  static UnitQuaternion from_axis_angle(const Vec3& axis, double angle);

  const Vec4& coeffs() const { return coeffs_; }
  double x() const { return coeffs_[0]; }
  double y() const { return coeffs_[1]; }
  double z() const { return coeffs_[2]; }
  double w() const { return coeffs_[3]; }

  Mat3 rotation() const;
  UnitQuaternion operator-() const;

 private:
  explicit UnitQuaternion(const Vec4& c) : coeffs_(c) {}
  Vec4 coeffs_;
};

/// A point of R^3 x S^3: hand position (meters) and orientation.
struct ProductPoint {
  Vec3 position = Vec3::Zero();
  UnitQuaternion orientation;
};

struct TangentVector {
  Vec3 d_position = Vec3::Zero();
  Vec4 d_orientation = Vec4::Zero();
};

/// Euclidean gradient of a function on R^3 x R^4, before projection.
struct HandGradient {
  Vec3 position = Vec3::Zero();
  Vec4 orientation = Vec4::Zero();

  HandGradient& operator+=(const HandGradient& o) {
    position += o.position;
    orientation += o.orientation;
    return *this;
  }
};

HandGradient operator+(HandGradient a, const HandGradient& b);
HandGradient operator-(const HandGradient& g);

struct StepSizes {
  double position = 0.008;
  double orientation = 0.005;
};

/// (I - q q^T) v.
Vec4 project_to_tangent(const UnitQuaternion& q, const Vec4& v);
/// Same as above for a raw 4-vector base point; throws when |‖q‖-1| > 1e-6.
Vec4 project_to_tangent(const Vec4& q, const Vec4& v);

/// Great-circle geodesic cos(|t|) q + sin(|t|) t/|t|. The tangent must satisfy
/// <t, q> = 0 within 1e-6.
UnitQuaternion exp_map(const UnitQuaternion& q, const Vec4& tangent);

/// One projected Riemannian gradient-descent step on R^3 x S^3.
/// Throws ErrorKind::Numeric naming the first non-finite gradient component.
ProductPoint riemannian_step(const ProductPoint& p, const HandGradient& g,
                             const StepSizes& steps);

TangentVector riemannian_gradient(const ProductPoint& p, const HandGradient& g);

/// Geodesic angle on S^3 between the rotations a and b, identifying q with -q.
/// Lies in [0, pi/2].
double geodesic_distance(const UnitQuaternion& a, const UnitQuaternion& b);

}  // namespace gsbi
