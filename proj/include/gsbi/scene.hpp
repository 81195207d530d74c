#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "gsbi/manifold.hpp"
#include "gsbi/random.hpp"

namespace gsbi {

// ---------------------------------------------------------------------------
// Frames. The workspace frame S has z up; the workspace cube spans
// [-l/2, l/2] x [-l/2, l/2] x [0, l]. The table top is the plane
// z = table_height (before the table pose perturbation, which only moves it
// in x, y and yaw).
//
// Hand frame: origin at the tool center point between the fingertips, +x is
// the closing axis, +z the approach axis (pointing from the palm toward the
// object).
// ---------------------------------------------------------------------------

enum class ShapeKind : std::uint32_t { Box = 0, Cylinder = 1, Sphere = 2 };

const char* to_string(ShapeKind kind);

/// Box: half extents. Cylinder (vertical axis): (radius, radius, half-height).
/// Sphere: (radius, radius, radius).
struct ObjectShape {
  ShapeKind kind = ShapeKind::Box;
  Vec3 dims = Vec3::Constant(0.02);

  double half_height() const { return dims.z(); }
};

struct LatentState {
  ObjectShape shape;
  double table_x = 0.0;  // meters, in S
  double table_y = 0.0;
  double table_yaw_deg = 0.0;
  double object_x = 0.0;  // meters, in the table frame
  double object_y = 0.0;
  double object_yaw = 0.0;  // radians, in the table frame
  double finger_torque = 37.5;
  double friction = 1.5;
  double spin_ratio = 0.002;
  std::uint64_t noise_seed = 0;

  double spinning_friction() const { return spin_ratio * friction; }
};

struct WorldParams {
  double workspace_size = 0.3;  // l
  double table_height = 0.05;
  double table_half_size = 0.3;
  double table_thickness = 0.02;
};

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct LatentPriorParams {
  double table_xy_std = 0.008;      // N(0, 0.008), read as a standard deviation
  double table_yaw_deg = 5.0;       // U(-5, 5) degrees
  double object_xy_half_range = -1.0;  // U(-r, r); negative means l/2
  Range torque{35.0, 40.0};
  Range friction{1.0, 2.0};
  double spin_ratio_mean = 0.002;
  double spin_ratio_std = 0.0001;
  bool use_box = true;
  bool use_cylinder = true;
  bool use_sphere = true;
  Range box_half_xy{0.015, 0.03};
  Range box_half_y{0.0, 0.0};  // separate y range when hi > 0, else box_half_xy
  Range box_half_z{0.015, 0.04};
  Range cylinder_radius{0.015, 0.03};
  Range cylinder_half_height{0.015, 0.04};
  Range sphere_radius{0.02, 0.035};
};

struct Intrinsics {
  double fx = 400.0;
  double fy = 400.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;

  Mat3 matrix() const;
};

/// Square pixels, principal point at the image center ((w-1)/2, (h-1)/2).
Intrinsics make_intrinsics(int width, int height, double horizontal_fov_deg);

struct CameraParams {
  int n_views = 6;
  double radius = 0.6;     // distance from the workspace center
  double polar_deg = 45.0;  // angle from the vertical
  int width = 848;
  int height = 480;
  double horizontal_fov_deg = 86.0;
};

/// T_WC maps camera coordinates (OpenCV: +z forward, +x right, +y down) to
/// the workspace frame.
struct CameraView {
  Eigen::Isometry3d world_from_camera = Eigen::Isometry3d::Identity();
  Intrinsics intrinsics;
};

/// Pinhole depth image; depth is the camera z coordinate, 0 means no hit.
struct DepthImage {
  int width = 0;
  int height = 0;
  std::vector<double> depth;  // row-major

  double at(int u, int v) const { return depth[static_cast<std::size_t>(v) * width + u]; }
  double& at(int u, int v) { return depth[static_cast<std::size_t>(v) * width + u]; }
};

struct Primitive {
  ShapeKind kind = ShapeKind::Box;
  Vec3 dims = Vec3::Constant(0.02);
  Vec3 center = Vec3::Zero();
  double yaw = 0.0;  // rotation about +z
};

struct Scene {
  std::vector<Primitive> primitives;
};

struct NoiseParams {
  double sigma = 0.001;       // additive Gaussian, meters
  double bias_scale = 0.0;    // relative amplitude of the multiplicative field
  double bias_frequency = 2.0;  // cycles per image width, upper bound
};

struct SurrogateParams {
  double w_align = 2.0;
  double w_center = 6.0;
  double center_scale = 0.06;  // d0, meters
  double w_friction = 0.5;
  double w_torque = 0.5;
  double bias = -6.0;
};

struct GraspOutcome {
  bool success = false;
  double success_probability = 0.0;
};

LatentState sample_latents(Rng& rng, const WorldParams& world, const LatentPriorParams& prior);

Primitive object_primitive(const LatentState& z, const WorldParams& world);
Primitive table_primitive(const LatentState& z, const WorldParams& world);
Scene scene_from_latents(const LatentState& z, const WorldParams& world);

Vec3 workspace_center(double workspace_size);

std::vector<CameraView> camera_trajectory(int n_views, double workspace_size,
                                          const CameraParams& params);
CameraView look_at(const Vec3& eye, const Vec3& target, const Intrinsics& intrinsics);

/// Ray-cast a depth image with exact ray-primitive intersections.
DepthImage render_depth(const Scene& scene, const CameraView& view);
DepthImage render_depth(const LatentState& z, const WorldParams& world, const CameraView& view);

/// Nearest positive hit distance along origin + t * dir, or +inf when missed.
double intersect(const Primitive& p, const Vec3& origin, const Vec3& dir);

DepthImage apply_depth_noise(const DepthImage& img, Rng& rng, const NoiseParams& params);

/// cos of the smallest angle between the gripper closing axis and one of the
/// object's graspable directions, in [0, 1].
double grasp_alignment(const ProductPoint& h, const Primitive& object);

double analytic_success_prob(const ProductPoint& h, const LatentState& z,
                             const WorldParams& world, const SurrogateParams& params);

/// Logit of the surrogate with friction and torque contributions removed;
/// the full logit adds w_f (mu - 1) + w_t (tau - 35) / 5.
double surrogate_geometric_logit(const ProductPoint& h, const LatentState& z,
                                 const WorldParams& world, const SurrogateParams& params);

GraspOutcome simulate_grasp(const ProductPoint& h, const LatentState& z, Rng& rng,
                            const WorldParams& world, const SurrogateParams& params);

}  // namespace gsbi
