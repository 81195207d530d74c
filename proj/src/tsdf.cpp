#include "gsbi/tsdf.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <Eigen/Eigenvalues>

#include "gsbi/binary_io.hpp"
#include "gsbi/error.hpp"

namespace gsbi {

namespace {

constexpr std::uint32_t kGridVersion = 1;
constexpr std::string_view kGridMagic = "GSBI-TSDF";

template <typename Fn>
void for_each_object_voxel(const TsdfGrid& grid, double table_height,
                           const TsdfParams& params, Fn&& fn) {
  const int n = grid.n();
  const double z_min = table_height + params.table_margin_voxels * grid.voxel_size();
  for (int k = 0; k < n; ++k) {
    const Vec3 probe = grid.voxel_center(0, 0, k);
    if (probe.z() < z_min) continue;
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < n; ++i) {
        const std::size_t idx = grid.index(i, j, k);
        if (grid.weight(idx) > 0.0 && grid.value(idx) < 0.0) fn(grid.voxel_center(i, j, k));
      }
    }
  }
}

Vec3 back_project(const DepthImage& img, const Intrinsics& k, int u, int v) {
  const double d = img.at(u, v);
  return d * Vec3((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
}

// Camera-frame surface normal at a pixel from central differences of the
// back-projected depth map, oriented toward the camera. False at silhouettes
// and depth discontinuities.
bool pixel_normal(const DepthImage& img, const Intrinsics& k, int u, int v, Vec3& normal) {
  if (u < 1 || v < 1 || u + 1 >= img.width || v + 1 >= img.height) return false;
  const double d = img.at(u, v);
  const double jump = 0.05 * d;
  for (const auto& [du, dv] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
    const double dn = img.at(u + du, v + dv);
    if (dn <= 0.0 || std::abs(dn - d) > jump) return false;
  }
  const Vec3 tx = back_project(img, k, u + 1, v) - back_project(img, k, u - 1, v);
  const Vec3 ty = back_project(img, k, u, v + 1) - back_project(img, k, u, v - 1);
  Vec3 nrm = tx.cross(ty);
  const double len = nrm.norm();
  if (!(len > 0.0)) return false;
  nrm /= len;
  const Vec3 ray = back_project(img, k, u, v).normalized();
  // Toward the camera, so that free space in front is positive.
  if (nrm.dot(ray) > 0.0) nrm = -nrm;
  normal = nrm;
  return true;
}

}  // namespace

TsdfGrid::TsdfGrid(int n, double size, const Vec3& origin) : n_(n), size_(size), origin_(origin) {
  if (n <= 0) fail(ErrorKind::InvalidInput, "TsdfGrid: n must be positive");
  if (!(size > 0.0)) fail(ErrorKind::InvalidInput, "TsdfGrid: size must be positive");
  const std::size_t count = static_cast<std::size_t>(n) * n * n;
  values_.assign(count, kUnobserved);
  weights_.assign(count, 0.0);
}

Vec3 TsdfGrid::voxel_center(int i, int j, int k) const {
  return origin_ + voxel_size() * Vec3(i + 0.5, j + 0.5, k + 0.5);
}

bool TsdfGrid::locate(const Vec3& p, int& i, int& j, int& k) const {
  const Vec3 r = (p - origin_) / voxel_size();
  if (!r.allFinite()) return false;
  const double fi = std::floor(r.x()), fj = std::floor(r.y()), fk = std::floor(r.z());
  if (fi < 0 || fj < 0 || fk < 0 || fi >= n_ || fj >= n_ || fk >= n_) return false;
  i = static_cast<int>(fi);
  j = static_cast<int>(fj);
  k = static_cast<int>(fk);
  return true;
}

bool TsdfGrid::contains(const Vec3& p) const {
  int i, j, k;
  return locate(p, i, j, k);
}

TsdfGrid make_workspace_grid(int n, double workspace_size) {
  return TsdfGrid(n, workspace_size, Vec3(-0.5 * workspace_size, -0.5 * workspace_size, 0.0));
}

void integrate(TsdfGrid& grid, const DepthImage& img, const CameraView& view,
               double truncation_voxels) {
  const Intrinsics& k = view.intrinsics;
  if (img.width != k.width || img.height != k.height ||
      img.depth.size() != static_cast<std::size_t>(img.width) * img.height) {
    fail(ErrorKind::InvalidInput, "integrate: image size does not match intrinsics");
  }
  if (!(truncation_voxels > 0.0)) fail(ErrorKind::InvalidInput, "integrate: truncation must be positive");
  const double delta = truncation_voxels * grid.voxel_size();
  const Mat3 r_cw = view.world_from_camera.linear().transpose();
  const Vec3 eye = view.world_from_camera.translation();
  auto& values = grid.mutable_values();
  auto& weights = grid.mutable_weights();
  const int n = grid.n();
  for (int kk = 0; kk < n; ++kk) {
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < n; ++i) {
        const Vec3 pc = r_cw * (grid.voxel_center(i, j, kk) - eye);
        if (pc.z() <= 0.0) continue;
        const long u = std::lround(k.fx * pc.x() / pc.z() + k.cx);
        const long v = std::lround(k.fy * pc.y() / pc.z() + k.cy);
        if (u < 0 || v < 0 || u >= k.width || v >= k.height) continue;
        const double d = img.at(static_cast<int>(u), static_cast<int>(v));
        double tsdf;
        if (d <= 0.0) {
          tsdf = 1.0;
        } else {
          double sdf = d - pc.z();
          if (sdf < -delta) continue;  // occluded
          if (sdf < delta) {
            Vec3 normal;
            if (pixel_normal(img, k, static_cast<int>(u), static_cast<int>(v), normal)) {
              const Vec3 surface = d * Vec3((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
              sdf = (pc - surface).dot(normal);
              if (sdf < -delta) continue;
            }
          }
          tsdf = std::clamp(sdf / delta, -1.0, 1.0);
        }
        const std::size_t idx = grid.index(i, j, kk);
        const double w = weights[idx];
        values[idx] = (w * values[idx] + tsdf) / (w + 1.0);
        weights[idx] = w + 1.0;
      }
    }
  }
}

TsdfGrid fuse(std::span<const DepthImage> images, std::span<const CameraView> views, int n,
              double workspace_size, double truncation_voxels) {
  if (images.empty()) fail(ErrorKind::InvalidInput, "fuse: no images");
  if (images.size() != views.size()) fail(ErrorKind::InvalidInput, "fuse: images and views differ in count");
  TsdfGrid grid = make_workspace_grid(n, workspace_size);
  for (std::size_t i = 0; i < images.size(); ++i) integrate(grid, images[i], views[i], truncation_voxels);
  return grid;
}

Aabb object_aabb(const TsdfGrid& grid, double table_height, const TsdfParams& params) {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  std::size_t count = 0;
  for_each_object_voxel(grid, table_height, params, [&](const Vec3& c) {
    lo = lo.cwiseMin(c);
    hi = hi.cwiseMax(c);
    ++count;
  });
  if (count == 0) fail(ErrorKind::EmptyScene, "object_aabb: no object voxels above the table");
  const double half = 0.5 * grid.voxel_size();
  return Aabb{lo.array() - half, hi.array() + half};
}

PoseFeature4D extract_pose_feature(const TsdfGrid& grid, double table_height,
                                   const TsdfParams& params) {
  Vec3 sum = Vec3::Zero();
  Eigen::Matrix2d outer = Eigen::Matrix2d::Zero();
  std::size_t count = 0;
  std::vector<Vec3> points;
  for_each_object_voxel(grid, table_height, params, [&](const Vec3& c) {
    points.push_back(c);
    sum += c;
    ++count;
  });
  if (count == 0) fail(ErrorKind::EmptyScene, "extract_pose_feature: no object voxels");
  PoseFeature4D f;
  f.centroid = sum / static_cast<double>(count);
  for (const Vec3& p : points) {
    const Eigen::Vector2d d = (p - f.centroid).head<2>();
    outer += d * d.transpose();
  }
  outer /= static_cast<double>(count);
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(outer);
  const double l_small = eig.eigenvalues()[0];
  const double l_big = eig.eigenvalues()[1];
  if (l_big - l_small <= params.isotropy_tolerance * (l_big + l_small) || l_big <= 0.0) {
    f.yaw = 0.0;
    f.degenerate = true;
    return f;
  }
  const Eigen::Vector2d axis = eig.eigenvectors().col(1);
  double yaw = std::atan2(axis.y(), axis.x());
  // Fold onto [-pi/2, pi/2): the principal axis has no sign.
  if (yaw >= std::numbers::pi / 2) yaw -= std::numbers::pi;
  if (yaw < -std::numbers::pi / 2) yaw += std::numbers::pi;
  f.yaw = yaw;
  return f;
}

GripperModel default_gripper() {
  // Parallel-jaw hand, 85 mm opening, fingertips at the TCP plane.
  GripperModel g;
  const double half_open = 0.0425;
  g.capsules.push_back({Vec3(-half_open, 0, -0.06), Vec3(-half_open, 0, 0.0), 0.006});
  g.capsules.push_back({Vec3(half_open, 0, -0.06), Vec3(half_open, 0, 0.0), 0.006});
  g.capsules.push_back({Vec3(-0.05, 0, -0.07), Vec3(0.05, 0, -0.07), 0.01});
  g.capsules.push_back({Vec3(0, 0, -0.07), Vec3(0, 0, -0.16), 0.02});
  return g;
}

std::vector<Vec3> gripper_sample_points(const GripperModel& gripper, double spacing) {
  std::vector<Vec3> pts;
  for (const Capsule& c : gripper.capsules) {
    const Vec3 axis = c.b - c.a;
    const double len = axis.norm();
    const Vec3 dir = len > 0 ? Vec3(axis / len) : Vec3::UnitZ();
    const Vec3 any = std::abs(dir.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
    const Vec3 e1 = dir.cross(any).normalized();
    const Vec3 e2 = dir.cross(e1);
    const int n_axis = std::max(1, static_cast<int>(std::ceil(len / spacing)));
    const int n_ring = std::max(6, static_cast<int>(std::ceil(2 * std::numbers::pi * c.radius / spacing)));
    const int n_radial = std::max(1, static_cast<int>(std::ceil(c.radius / spacing)));
    for (int s = 0; s <= n_axis; ++s) {
      const Vec3 p = c.a + axis * (static_cast<double>(s) / n_axis);
      pts.push_back(p);
      for (int r = 1; r <= n_radial; ++r) {
        const double rad = c.radius * r / n_radial;
        for (int t = 0; t < n_ring; ++t) {
          const double ang = 2 * std::numbers::pi * t / n_ring;
          pts.push_back(p + rad * (std::cos(ang) * e1 + std::sin(ang) * e2));
        }
      }
    }
    // End caps.
    for (const Vec3& end : {c.a, c.b}) {
      const Vec3 out = (end == c.a ? -dir : dir);
      pts.push_back(end + c.radius * out);
    }
  }
  return pts;
}

bool collision_check(const TsdfGrid& grid, const ProductPoint& h, std::span<const Vec3> hand_points) {
  if (!grid.contains(h.position)) return true;
  const Mat3 r = h.orientation.rotation();
  for (const Vec3& p : hand_points) {
    int i, j, k;
    if (!grid.locate(r * p + h.position, i, j, k)) continue;
    const std::size_t idx = grid.index(i, j, k);
    if (grid.weight(idx) > 0.0 && grid.value(idx) < 0.0) return true;
  }
  return false;
}

bool collision_check(const TsdfGrid& grid, const ProductPoint& h, const GripperModel& gripper) {
  const auto pts = gripper_sample_points(gripper, 0.5 * grid.voxel_size());
  return collision_check(grid, h, pts);
}

void write_grid(std::ostream& os, const TsdfGrid& grid) {
  io::write_magic(os, kGridMagic);
  io::write<std::uint32_t>(os, kGridVersion);
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(grid.n()));
  io::write<double>(os, grid.size());
  for (int i = 0; i < 3; ++i) io::write<double>(os, grid.origin()[i]);
  for (double v : grid.values()) io::write<float>(os, static_cast<float>(v));
  for (double w : grid.weights()) io::write<float>(os, static_cast<float>(w));
}

TsdfGrid read_grid(std::istream& is) {
  io::expect_magic(is, kGridMagic);
  const auto version = io::read<std::uint32_t>(is);
  if (version != kGridVersion) fail(ErrorKind::Schema, "unsupported grid version " + std::to_string(version));
  const auto n = io::read<std::uint32_t>(is);
  if (n == 0 || n > 1024) fail(ErrorKind::Schema, "grid: implausible resolution " + std::to_string(n));
  const double l = io::read<double>(is);
  Vec3 origin;
  for (int i = 0; i < 3; ++i) origin[i] = io::read<double>(is);
  TsdfGrid grid(static_cast<int>(n), l, origin);
  for (double& v : grid.mutable_values()) v = io::read<float>(is);
  for (double& w : grid.mutable_weights()) w = io::read<float>(is);
  return grid;
}

void save_grid(const std::string& path, const TsdfGrid& grid) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::Io, "cannot open " + path + " for writing");
  write_grid(os, grid);
}

TsdfGrid load_grid(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Io, "cannot open " + path);
  return read_grid(is);
}

}  // namespace gsbi
