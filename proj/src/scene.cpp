#include "gsbi/scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "gsbi/error.hpp"

namespace gsbi {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kEps = 1e-12;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

Eigen::Matrix3d yaw_rotation(double yaw) {
  return Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix();
}

double intersect_box(const Vec3& o, const Vec3& d, const Vec3& half) {
  double t_near = -kInf, t_far = kInf;
  for (int i = 0; i < 3; ++i) {
    if (std::abs(d[i]) < kEps) {
      if (o[i] < -half[i] || o[i] > half[i]) return kInf;
      continue;
    }
    double t0 = (-half[i] - o[i]) / d[i];
    double t1 = (half[i] - o[i]) / d[i];
    if (t0 > t1) std::swap(t0, t1);
    t_near = std::max(t_near, t0);
    t_far = std::min(t_far, t1);
    if (t_near > t_far) return kInf;
  }
  if (t_near > 0.0) return t_near;
  return kInf;  // origin inside or box behind
}

double intersect_cylinder(const Vec3& o, const Vec3& d, double r, double hh) {
  double best = kInf;
  const double a = d.x() * d.x() + d.y() * d.y();
  if (a > kEps) {
    const double b = 2.0 * (o.x() * d.x() + o.y() * d.y());
    const double c = o.x() * o.x() + o.y() * o.y() - r * r;
    const double disc = b * b - 4.0 * a * c;
    if (disc >= 0.0) {
      const double s = std::sqrt(disc);
      for (double t : {(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)}) {
        if (t > 0.0 && std::abs(o.z() + t * d.z()) <= hh) {
          best = std::min(best, t);
          break;
        }
      }
    }
  }
  if (std::abs(d.z()) > kEps) {
    for (double zc : {hh, -hh}) {
      const double t = (zc - o.z()) / d.z();
      if (t <= 0.0) continue;
      const double x = o.x() + t * d.x(), y = o.y() + t * d.y();
      if (x * x + y * y <= r * r) best = std::min(best, t);
    }
  }
  return best;
}

double intersect_sphere(const Vec3& o, const Vec3& d, double r) {
  const double a = d.squaredNorm();
  const double b = 2.0 * o.dot(d);
  const double c = o.squaredNorm() - r * r;
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return kInf;
  const double s = std::sqrt(disc);
  const double t0 = (-b - s) / (2.0 * a);
  if (t0 > 0.0) return t0;
  return kInf;
}

}  // namespace

const char* to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::Box: return "box";
    case ShapeKind::Cylinder: return "cylinder";
    case ShapeKind::Sphere: return "sphere";
  }
  return "unknown";
}

Mat3 Intrinsics::matrix() const {
  Mat3 k;
  k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
  return k;
}

Intrinsics make_intrinsics(int width, int height, double horizontal_fov_deg) {
  if (width <= 0 || height <= 0) fail(ErrorKind::InvalidInput, "image size must be positive");
  if (!(horizontal_fov_deg > 0.0 && horizontal_fov_deg < 180.0)) {
    fail(ErrorKind::InvalidInput, "horizontal field of view must lie in (0, 180) degrees");
  }
  Intrinsics k;
  k.width = width;
  k.height = height;
  k.fx = 0.5 * width / std::tan(0.5 * horizontal_fov_deg * std::numbers::pi / 180.0);
  k.fy = k.fx;
  k.cx = 0.5 * (width - 1);
  k.cy = 0.5 * (height - 1);
  return k;
}

LatentState sample_latents(Rng& rng, const WorldParams& world, const LatentPriorParams& prior) {
  if (!(world.workspace_size > 0.0)) fail(ErrorKind::InvalidInput, "workspace size must be positive");
  std::vector<ShapeKind> kinds;
  if (prior.use_box) kinds.push_back(ShapeKind::Box);
  if (prior.use_cylinder) kinds.push_back(ShapeKind::Cylinder);
  if (prior.use_sphere) kinds.push_back(ShapeKind::Sphere);
  if (kinds.empty()) fail(ErrorKind::InvalidInput, "no object shapes enabled");

  LatentState z;
  z.shape.kind = kinds[std::uniform_int_distribution<std::size_t>(0, kinds.size() - 1)(rng)];
  switch (z.shape.kind) {
    case ShapeKind::Box:
    {
      const Range& ry = prior.box_half_y.hi > 0.0 ? prior.box_half_y : prior.box_half_xy;
      const double hx = uniform(rng, prior.box_half_xy.lo, prior.box_half_xy.hi);
      const double hy = uniform(rng, ry.lo, ry.hi);
      z.shape.dims = Vec3(hx, hy, uniform(rng, prior.box_half_z.lo, prior.box_half_z.hi));
      break;
    }
    case ShapeKind::Cylinder: {
      const double r = uniform(rng, prior.cylinder_radius.lo, prior.cylinder_radius.hi);
      z.shape.dims = Vec3(r, r, uniform(rng, prior.cylinder_half_height.lo,
                                        prior.cylinder_half_height.hi));
      break;
    }
    case ShapeKind::Sphere: {
      const double r = uniform(rng, prior.sphere_radius.lo, prior.sphere_radius.hi);
      z.shape.dims = Vec3::Constant(r);
      break;
    }
  }

  std::normal_distribution<double> table_xy(0.0, prior.table_xy_std);
  z.table_x = table_xy(rng);
  z.table_y = table_xy(rng);
  z.table_yaw_deg = uniform(rng, -prior.table_yaw_deg, prior.table_yaw_deg);

  const double r = prior.object_xy_half_range < 0.0 ? 0.5 * world.workspace_size
                                                     : prior.object_xy_half_range;
  z.object_x = uniform(rng, -r, r);
  z.object_y = uniform(rng, -r, r);
  z.object_yaw = uniform(rng, 0.0, 2.0 * std::numbers::pi);

  z.finger_torque = uniform(rng, prior.torque.lo, prior.torque.hi);
  z.friction = uniform(rng, prior.friction.lo, prior.friction.hi);
  z.spin_ratio = std::normal_distribution<double>(prior.spin_ratio_mean, prior.spin_ratio_std)(rng);
  z.noise_seed = rng();
  return z;
}

Primitive object_primitive(const LatentState& z, const WorldParams& world) {
  const double table_yaw = z.table_yaw_deg * std::numbers::pi / 180.0;
  const Vec3 offset = yaw_rotation(table_yaw) * Vec3(z.object_x, z.object_y, 0.0);
  Primitive p;
  p.kind = z.shape.kind;
  p.dims = z.shape.dims;
  p.center = Vec3(z.table_x + offset.x(), z.table_y + offset.y(),
                  world.table_height + z.shape.half_height());
  p.yaw = table_yaw + z.object_yaw;
  return p;
}

Primitive table_primitive(const LatentState& z, const WorldParams& world) {
  Primitive p;
  p.kind = ShapeKind::Box;
  p.dims = Vec3(world.table_half_size, world.table_half_size, 0.5 * world.table_thickness);
  p.center = Vec3(z.table_x, z.table_y, world.table_height - 0.5 * world.table_thickness);
  p.yaw = z.table_yaw_deg * std::numbers::pi / 180.0;
  return p;
}

Scene scene_from_latents(const LatentState& z, const WorldParams& world) {
  return Scene{{table_primitive(z, world), object_primitive(z, world)}};
}

Vec3 workspace_center(double workspace_size) { return Vec3(0.0, 0.0, 0.5 * workspace_size); }

CameraView look_at(const Vec3& eye, const Vec3& target, const Intrinsics& intrinsics) {
  const Vec3 forward = (target - eye).normalized();
  Vec3 up = Vec3::UnitZ();
  if (std::abs(forward.dot(up)) > 1.0 - 1e-9) up = Vec3::UnitY();
  const Vec3 right = forward.cross(up).normalized();
  const Vec3 down = forward.cross(right);
  CameraView view;
  Mat3 r;
  r.col(0) = right;
  r.col(1) = down;
  r.col(2) = forward;
  view.world_from_camera.linear() = r;
  view.world_from_camera.translation() = eye;
  view.intrinsics = intrinsics;
  return view;
}

std::vector<CameraView> camera_trajectory(int n_views, double workspace_size,
                                          const CameraParams& params) {
  if (n_views < 1) fail(ErrorKind::InvalidInput, "camera_trajectory: n_views must be >= 1");
  const Intrinsics k = make_intrinsics(params.width, params.height, params.horizontal_fov_deg);
  const Vec3 target = workspace_center(workspace_size);
  const double polar = params.polar_deg * std::numbers::pi / 180.0;
  std::vector<CameraView> views;
  views.reserve(n_views);
  for (int i = 0; i < n_views; ++i) {
    const double az = 2.0 * std::numbers::pi * i / n_views;
    const Vec3 eye = target + params.radius * Vec3(std::sin(polar) * std::cos(az),
                                                   std::sin(polar) * std::sin(az),
                                                   std::cos(polar));
    views.push_back(look_at(eye, target, k));
  }
  return views;
}

namespace {

double intersect_local(const Primitive& p, const Vec3& o, const Vec3& d) {
  switch (p.kind) {
    case ShapeKind::Box: return intersect_box(o, d, p.dims);
    case ShapeKind::Cylinder: return intersect_cylinder(o, d, p.dims.x(), p.dims.z());
    case ShapeKind::Sphere: return intersect_sphere(o, d, p.dims.x());
  }
  return kInf;
}

}  // namespace

double intersect(const Primitive& p, const Vec3& origin, const Vec3& dir) {
  // Into the primitive's local frame (yaw only, so z is preserved).
  const Mat3 r_inv = yaw_rotation(-p.yaw);
  return intersect_local(p, r_inv * (origin - p.center), r_inv * dir);
}

DepthImage render_depth(const Scene& scene, const CameraView& view) {
  const Intrinsics& k = view.intrinsics;
  DepthImage img;
  img.width = k.width;
  img.height = k.height;
  img.depth.assign(static_cast<std::size_t>(k.width) * k.height, 0.0);
  const Mat3 r = view.world_from_camera.linear();
  const Vec3 eye = view.world_from_camera.translation();
  // Camera frame expressed in each primitive's local frame.
  std::vector<Mat3> dir_to_local;
  std::vector<Vec3> eye_local;
  for (const Primitive& p : scene.primitives) {
    const Mat3 r_inv = yaw_rotation(-p.yaw);
    dir_to_local.push_back(r_inv * r);
    eye_local.push_back(r_inv * (eye - p.center));
  }
  for (int v = 0; v < k.height; ++v) {
    for (int u = 0; u < k.width; ++u) {
      // Camera-frame direction with unit z, so the hit parameter is the depth.
      const Vec3 dc((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
      double best = kInf;
      for (std::size_t i = 0; i < scene.primitives.size(); ++i) {
        best = std::min(best, intersect_local(scene.primitives[i], eye_local[i], dir_to_local[i] * dc));
      }
      if (std::isfinite(best)) img.at(u, v) = best;
    }
  }
  return img;
}

DepthImage render_depth(const LatentState& z, const WorldParams& world, const CameraView& view) {
  return render_depth(scene_from_latents(z, world), view);
}

DepthImage apply_depth_noise(const DepthImage& img, Rng& rng, const NoiseParams& params) {
  DepthImage out = img;
  if (params.sigma <= 0.0 && params.bias_scale <= 0.0) return out;

  // Low-frequency field: a few random plane waves, normalized to unit RMS.
  constexpr int kWaves = 3;
  std::uniform_real_distribution<double> freq(-params.bias_frequency, params.bias_frequency);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  double fu[kWaves], fv[kWaves], ph[kWaves];
  for (int i = 0; i < kWaves; ++i) {
    fu[i] = freq(rng);
    fv[i] = freq(rng);
    ph[i] = phase(rng);
  }
  const double amp = std::sqrt(2.0 / kWaves);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int v = 0; v < img.height; ++v) {
    for (int u = 0; u < img.width; ++u) {
      double& d = out.at(u, v);
      if (d <= 0.0) continue;
      double field = 0.0;
      if (params.bias_scale > 0.0) {
        for (int i = 0; i < kWaves; ++i) {
          field += amp * std::cos(2.0 * std::numbers::pi *
                                      (fu[i] * u / img.width + fv[i] * v / img.width) +
                                  ph[i]);
        }
      }
      const double noisy = d * (1.0 + params.bias_scale * field) + params.sigma * noise(rng);
      d = std::max(noisy, 1e-6);
    }
  }
  return out;
}

double grasp_alignment(const ProductPoint& h, const Primitive& object) {
  const Vec3 closing = h.orientation.rotation().col(0);
  switch (object.kind) {
    case ShapeKind::Box: {
      const Vec3 ex(std::cos(object.yaw), std::sin(object.yaw), 0.0);
      const Vec3 ey(-std::sin(object.yaw), std::cos(object.yaw), 0.0);
      return std::max(std::abs(closing.dot(ex)), std::abs(closing.dot(ey)));
    }
    case ShapeKind::Cylinder:
      return std::sqrt(std::max(0.0, 1.0 - closing.z() * closing.z()));
    case ShapeKind::Sphere:
      return 1.0;
  }
  return 0.0;
}

double surrogate_geometric_logit(const ProductPoint& h, const LatentState& z,
                                 const WorldParams& world, const SurrogateParams& params) {
  const Primitive object = object_primitive(z, world);
  const double distance = (h.position - object.center).norm();
  return params.w_align * grasp_alignment(h, object) +
         params.w_center * (1.0 - distance / params.center_scale) + params.bias;
}

double analytic_success_prob(const ProductPoint& h, const LatentState& z,
                             const WorldParams& world, const SurrogateParams& params) {
  const double logit = surrogate_geometric_logit(h, z, world, params) +
                       params.w_friction * (z.friction - 1.0) +
                       params.w_torque * (z.finger_torque - 35.0) / 5.0;
  return std::clamp(sigmoid(logit), 0.0, 1.0);
}

GraspOutcome simulate_grasp(const ProductPoint& h, const LatentState& z, Rng& rng,
                            const WorldParams& world, const SurrogateParams& params) {
  if (std::abs(h.orientation.coeffs().norm() - 1.0) > 1e-6) {
    fail(ErrorKind::InvalidInput, "simulate_grasp: non-unit quaternion");
  }
  GraspOutcome out;
  out.success_probability = analytic_success_prob(h, z, world, params);
  out.success = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < out.success_probability;
  return out;
}

}  // namespace gsbi
