#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "gsbi/manifold.hpp"
#include "gsbi/scene.hpp"

namespace gsbi {

struct TsdfParams {
  double truncation_voxels = 4.0;    // delta, in voxel sizes
  double table_margin_voxels = 1.0;  // masked slab above the table top
  double isotropy_tolerance = 0.15;  // relative eigenvalue gap for yaw
};

/// Cubic voxel grid of truncated, scaled signed distances in [-1, 1].
///
/// Voxel (i, j, k) has its center at origin + (i + 1/2, j + 1/2, k + 1/2) * l/n
/// and is stored at i + n (j + n k). Unobserved voxels carry weight 0 and the
/// sentinel value 0.
class TsdfGrid {
 public:
  static constexpr double kUnobserved = 0.0;

  TsdfGrid() = default;
  TsdfGrid(int n, double size, const Vec3& origin);

  int n() const { return n_; }
  double size() const { return size_; }
  const Vec3& origin() const { return origin_; }
  double voxel_size() const { return size_ / n_; }
  std::size_t voxel_count() const { return values_.size(); }

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(n_) * (static_cast<std::size_t>(j) +
                                           static_cast<std::size_t>(n_) * k);
  }
  Vec3 voxel_center(int i, int j, int k) const;
  /// Voxel containing p; false when p lies outside the grid.
  bool locate(const Vec3& p, int& i, int& j, int& k) const;
  bool contains(const Vec3& p) const;

  double value(std::size_t idx) const { return values_[idx]; }
  double weight(std::size_t idx) const { return weights_[idx]; }
  std::span<const double> values() const { return values_; }
  std::span<const double> weights() const { return weights_; }
  std::vector<double>& mutable_values() { return values_; }
  std::vector<double>& mutable_weights() { return weights_; }

 private:
  int n_ = 0;
  double size_ = 0.0;
  Vec3 origin_ = Vec3::Zero();
  std::vector<double> values_;
  std::vector<double> weights_;
};

/// Grid covering the workspace cube [-l/2, l/2]^2 x [0, l].
TsdfGrid make_workspace_grid(int n, double workspace_size);

/// Projective TSDF update with weight 1 per observation. Pixels without a
/// hit mark their ray as free space.
void integrate(TsdfGrid& grid, const DepthImage& img, const CameraView& view,
               double truncation_voxels);

TsdfGrid fuse(std::span<const DepthImage> images, std::span<const CameraView> views, int n,
              double workspace_size, double truncation_voxels);

struct Aabb {
  Vec3 low = Vec3::Zero();
  Vec3 high = Vec3::Zero();

  bool contains(const Vec3& p) const {
    return (p.array() >= low.array()).all() && (p.array() <= high.array()).all();
  }
};

struct PoseFeature4D {
  Vec3 centroid = Vec3::Zero();
  double yaw = 0.0;  // principal axis, in [-pi/2, pi/2)
  bool degenerate = false;

  Eigen::Vector4d as_vector() const {
    return Eigen::Vector4d(centroid.x(), centroid.y(), centroid.z(), yaw);
  }
};

/// Bounds of observed voxels with negative value above the table slab,
/// padded by half a voxel. Throws ErrorKind::EmptyScene when none exist.
Aabb object_aabb(const TsdfGrid& grid, double table_height, const TsdfParams& params = {});

PoseFeature4D extract_pose_feature(const TsdfGrid& grid, double table_height,
                                   const TsdfParams& params = {});

struct Capsule {
  Vec3 a = Vec3::Zero();
  Vec3 b = Vec3::Zero();
  double radius = 0.0;
};

/// Gripper swept volume in the hand frame.
struct GripperModel {
  std::vector<Capsule> capsules;
};

GripperModel default_gripper();

/// Sample points of the capsules, spaced at most `spacing` apart, hand frame.
std::vector<Vec3> gripper_sample_points(const GripperModel& gripper, double spacing);

/// True when a gripper sample point falls into an observed voxel with negative
/// value, or when the hand position lies outside the grid.
bool collision_check(const TsdfGrid& grid, const ProductPoint& h, const GripperModel& gripper);
bool collision_check(const TsdfGrid& grid, const ProductPoint& h,
                     std::span<const Vec3> hand_points);

// Binary file format: "GSBI-TSDF", u32 version, u32 n, f64 l, 3 x f64 origin,
// n^3 f32 values, n^3 f32 weights; little-endian, x-fastest.
void write_grid(std::ostream& os, const TsdfGrid& grid);
TsdfGrid read_grid(std::istream& is);
void save_grid(const std::string& path, const TsdfGrid& grid);
TsdfGrid load_grid(const std::string& path);

}  // namespace gsbi
