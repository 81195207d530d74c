#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <sstream>

#include "gsbi/error.hpp"
#include "gsbi/tsdf.hpp"

using namespace gsbi;

namespace {

constexpr double kL = 0.3;
constexpr int kN = 40;

struct Fused {
  std::vector<CameraView> views;
  std::vector<DepthImage> images;
  TsdfGrid grid;
};

Fused fuse_scene(const Scene& scene, int n_views, int w = 320, int h = 240) {
  CameraParams cp;
  cp.width = w;
  cp.height = h;
  Fused f;
  f.views = camera_trajectory(n_views, kL, cp);
  for (const auto& v : f.views) f.images.push_back(render_depth(scene, v));
  f.grid = fuse(f.images, f.views, kN, kL, 4.0);
  return f;
}

Primitive sphere(double r, const Vec3& c) {
  Primitive s;
  s.kind = ShapeKind::Sphere;
  s.dims = Vec3::Constant(r);
  s.center = c;
  return s;
}

// Max scaled error over voxels that every view sees head-on (incidence at most
// 60 degrees on the analytic surface) inside the truncation band.
double sphere_error(const Fused& f, const Primitive& s, int* count = nullptr) {
  const auto& g = f.grid;
  const double delta = 4.0 * g.voxel_size();
  const double max_incidence = std::numbers::pi / 3.0;
  double worst = 0.0;
  int c = 0;
  for (int k = 0; k < kN; ++k)
    for (int j = 0; j < kN; ++j)
      for (int i = 0; i < kN; ++i) {
        const auto idx = g.index(i, j, k);
        if (g.weight(idx) < static_cast<double>(f.views.size())) continue;
        const Vec3 x = g.voxel_center(i, j, k);
        const double sdf = (x - s.center).norm() - s.dims.x();
        if (std::abs(sdf) >= delta) continue;
        bool head_on = true;
        for (const auto& v : f.views) {
          const Vec3 eye = v.world_from_camera.translation();
          const Vec3 d = (x - eye).normalized();
          const double t = intersect(s, eye, d);
          if (!std::isfinite(t)) {
            head_on = false;
            break;
          }
          const Vec3 normal = (eye + t * d - s.center).normalized();
          if (std::acos(std::clamp(-normal.dot(d), -1.0, 1.0)) > max_incidence) head_on = false;
        }
        if (!head_on) continue;
        worst = std::max(worst, std::abs(g.value(idx) - sdf / delta));
        ++c;
      }
  if (count) *count = c;
  return worst;
}

LatentState box_latents(double yaw) {
  LatentState z;
  z.shape.kind = ShapeKind::Box;
  z.shape.dims = Vec3(0.05, 0.02, 0.03);
  z.object_x = 0.01;
  z.object_y = -0.015;
  z.object_yaw = yaw;
  return z;
}

ProductPoint hand(const Vec3& p, const Vec3& closing, const Vec3& approach) {
  Mat3 r;
  r.col(0) = closing.normalized();
  r.col(2) = approach.normalized();
  r.col(1) = r.col(2).cross(r.col(0));
  return ProductPoint{p, UnitQuaternion::from_rotation(r)};
}

}  // namespace

TEST_CASE("grid geometry") {
  const auto g = make_workspace_grid(kN, kL);
  CHECK(g.voxel_count() == static_cast<std::size_t>(kN * kN * kN));
  CHECK(g.voxel_size() == doctest::Approx(0.0075));
  CHECK((g.voxel_center(0, 0, 0) - Vec3(-0.15 + 0.00375, -0.15 + 0.00375, 0.00375)).norm() < 1e-15);
  int i, j, k;
  REQUIRE(g.locate(g.voxel_center(3, 17, 39), i, j, k));
  CHECK(i == 3);
  CHECK(j == 17);
  CHECK(k == 39);
  CHECK_FALSE(g.contains(Vec3(0, 0, -0.001)));
  CHECK(g.index(1, 0, 0) == 1);
  CHECK(g.index(0, 1, 0) == static_cast<std::size_t>(kN));
  CHECK_THROWS_AS(make_workspace_grid(0, kL), Error);
}

TEST_CASE("empty scene is free space") {
  const auto f = fuse_scene(Scene{}, 6, 160, 120);
  int observed = 0;
  for (std::size_t idx = 0; idx < f.grid.voxel_count(); ++idx) {
    if (f.grid.weight(idx) > 0) {
      ++observed;
      CHECK(f.grid.value(idx) == 1.0);
    } else {
      CHECK(f.grid.value(idx) == TsdfGrid::kUnobserved);
    }
  }
  CHECK(observed > 0);
  CHECK_THROWS_AS(object_aabb(f.grid, 0.05), Error);
}

TEST_CASE("sphere against the analytic signed distance") {
  const Primitive s = sphere(0.05, Vec3(0.003, -0.002, 0.15));
  const Scene scene{{s}};
  std::vector<double> errors;
  for (int nv = 1; nv <= 6; ++nv) {
    int count = 0;
    errors.push_back(sphere_error(fuse_scene(scene, nv), s, &count));
    CHECK(count > 0);
  }
  MESSAGE("max scaled error 1..6 views: " << errors[0] << " " << errors[1] << " " << errors[2]
                                          << " " << errors[3] << " " << errors[4] << " " << errors[5]);
  CHECK(errors.back() <= 0.25);
  for (std::size_t i = 1; i < errors.size(); ++i) CHECK(errors[i] <= errors[i - 1] + 1e-12);
}

TEST_CASE("integration is order independent and weights count views") {
  const Scene scene = scene_from_latents(box_latents(0.3), WorldParams{});
  auto f = fuse_scene(scene, 6, 160, 120);
  std::vector<std::size_t> order{3, 0, 5, 1, 4, 2};
  std::vector<DepthImage> imgs;
  std::vector<CameraView> views;
  for (auto o : order) {
    imgs.push_back(f.images[o]);
    views.push_back(f.views[o]);
  }
  const auto g2 = fuse(imgs, views, kN, kL, 4.0);
  double diff = 0.0;
  for (std::size_t idx = 0; idx < g2.voxel_count(); ++idx) {
    diff = std::max(diff, std::abs(g2.value(idx) - f.grid.value(idx)));
    CHECK(g2.weight(idx) == f.grid.weight(idx));
    CHECK(f.grid.weight(idx) <= 6.0);
    CHECK(std::abs(f.grid.value(idx)) <= 1.0);
  }
  CHECK(diff <= 1e-9);

  // Same image twice leaves values unchanged and doubles weights.
  auto once = make_workspace_grid(kN, kL);
  integrate(once, f.images[0], f.views[0], 4.0);
  auto twice = once;
  integrate(twice, f.images[0], f.views[0], 4.0);
  for (std::size_t idx = 0; idx < once.voxel_count(); ++idx) {
    CHECK(twice.value(idx) == doctest::Approx(once.value(idx)).epsilon(1e-12));
    CHECK(twice.weight(idx) == 2.0 * once.weight(idx));
  }

  DepthImage wrong = f.images[0];
  wrong.width = 10;
  CHECK_THROWS_AS(integrate(once, wrong, f.views[0], 4.0), Error);
  CHECK_THROWS_AS(fuse(std::span<const DepthImage>(imgs).first(2), views, kN, kL, 4.0), Error);
}

TEST_CASE("object bounds and pose feature") {
  const WorldParams world;
  SUBCASE("box yaw") {
    for (double yaw : {0.0, std::numbers::pi / 6}) {
      const LatentState z = box_latents(yaw);
      const auto f = fuse_scene(scene_from_latents(z, world), 6);
      const Primitive obj = object_primitive(z, world);
      const Aabb box = object_aabb(f.grid, world.table_height);
      CHECK(box.contains(obj.center));
      CHECK(box.high.z() <= obj.center.z() + obj.dims.z() + 2 * f.grid.voxel_size());
      CHECK(box.low.z() >= world.table_height);
      const auto pose = extract_pose_feature(f.grid, world.table_height);
      CHECK_FALSE(pose.degenerate);
      CHECK((pose.centroid.head<2>() - obj.center.head<2>()).norm() < f.grid.voxel_size());
      CHECK(pose.yaw >= -std::numbers::pi / 2);
      CHECK(pose.yaw < std::numbers::pi / 2);
      double err = std::abs(pose.yaw - obj.yaw);
      err = std::min(err, std::numbers::pi - err);
      CHECK(err < 5.0 * std::numbers::pi / 180.0);
    }
  }
  SUBCASE("sphere is planar-isotropic") {
    LatentState z;
    z.shape.kind = ShapeKind::Sphere;
    z.shape.dims = Vec3::Constant(0.03);
    const auto f = fuse_scene(scene_from_latents(z, world), 6);
    const auto pose = extract_pose_feature(f.grid, world.table_height);
    CHECK(pose.degenerate);
    CHECK(pose.yaw == 0.0);
  }
}

TEST_CASE("gripper collisions") {
  const WorldParams world;
  const LatentState z = box_latents(0.0);
  const auto f = fuse_scene(scene_from_latents(z, world), 6);
  const Primitive obj = object_primitive(z, world);
  const auto gripper = default_gripper();

  const auto pts = gripper_sample_points(gripper, 0.002);
  CHECK(pts.size() > 100);
  for (const auto& c : gripper.capsules) CHECK(c.radius > 0.0);

  // Pre-grasp pose well above the object.
  CHECK_FALSE(collision_check(f.grid, hand(obj.center + Vec3(0, 0, 0.12), Vec3::UnitY(), -Vec3::UnitZ()), gripper));
  // Fingers straddle the 4 cm wide side of the box.
  CHECK_FALSE(collision_check(f.grid, hand(obj.center + Vec3(0, 0, 0.01), Vec3::UnitY(), -Vec3::UnitZ()), gripper));
  // Along the 10 cm side the fingers land inside the box.
  CHECK(collision_check(f.grid, hand(obj.center + Vec3(0, 0, 0.01), Vec3::UnitX(), -Vec3::UnitZ()), gripper));
  // Hand center outside the workspace.
  CHECK(collision_check(f.grid, hand(Vec3(0, 0, 0.5), Vec3::UnitX(), -Vec3::UnitZ()), gripper));
}

TEST_CASE("grid file round trip") {
  const auto f = fuse_scene(Scene{{sphere(0.04, Vec3(0, 0, 0.12))}}, 3, 160, 120);
  std::stringstream ss;
  write_grid(ss, f.grid);
  const auto back = read_grid(ss);
  CHECK(back.n() == f.grid.n());
  CHECK(back.size() == f.grid.size());
  CHECK(back.origin() == f.grid.origin());
  for (std::size_t idx = 0; idx < back.voxel_count(); ++idx) {
    CHECK(back.value(idx) == static_cast<double>(static_cast<float>(f.grid.value(idx))));
    CHECK(back.weight(idx) == f.grid.weight(idx));
  }
  std::stringstream bad("GSBI-XXXX garbage");
  CHECK_THROWS_AS(read_grid(bad), Error);

  const auto path = std::filesystem::temp_directory_path() / "gsbi_grid_test.tsdf";
  save_grid(path.string(), f.grid);
  CHECK(load_grid(path.string()).n() == kN);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_grid("/nonexistent/dir/x.tsdf"), Error);
}
