#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "gsbi/distributions.hpp"
#include "gsbi/error.hpp"
#include "gsbi/scene.hpp"

using namespace gsbi;

namespace {

double cross2(const Eigen::Vector2d& o, const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  return (a - o).x() * (b - o).y() - (a - o).y() * (b - o).x();
}

// Area of the convex hull (monotone chain) of projected points.
double hull_area(std::vector<Eigen::Vector2d> pts) {
  std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) {
    return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
  });
  std::vector<Eigen::Vector2d> h(2 * pts.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    while (k >= 2 && cross2(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
    h[k++] = pts[i];
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i > 0; --i) {
    while (k >= t && cross2(h[k - 2], h[k - 1], pts[i - 1]) <= 0) --k;
    h[k++] = pts[i - 1];
  }
  h.resize(k - 1);
  double area = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const auto& a = h[i];
    const auto& b = h[(i + 1) % h.size()];
    area += a.x() * b.y() - b.x() * a.y();
  }
  return 0.5 * std::abs(area);
}

ProductPoint top_down_at(const Vec3& p, double yaw) {
  // Closing axis along world (cos yaw, sin yaw, 0), approach -z.
  Mat3 r;
  const Vec3 c(std::cos(yaw), std::sin(yaw), 0.0);
  const Vec3 a(0, 0, -1);
  r.col(0) = c;
  r.col(1) = a.cross(c);
  r.col(2) = a;
  return ProductPoint{p, UnitQuaternion::from_rotation(r)};
}

}  // namespace

TEST_CASE("sample_latents marginals and determinism") {
  const WorldParams world;
  const LatentPriorParams prior;
  Rng rng(42);
  const int n = 100000;
  double eta_sum = 0.0;
  int shapes[3] = {0, 0, 0};
  for (int i = 0; i < n; ++i) {
    const LatentState z = sample_latents(rng, world, prior);
    CHECK(z.finger_torque >= 35.0);
    CHECK(z.finger_torque <= 40.0);
    CHECK(z.friction >= 1.0);
    CHECK(z.friction <= 2.0);
    CHECK(std::abs(z.table_yaw_deg) <= 5.0);
    CHECK(std::abs(z.object_x) <= 0.15);
    CHECK(std::abs(z.object_y) <= 0.15);
    CHECK(z.object_yaw >= 0.0);
    CHECK(z.object_yaw < 2.0 * std::numbers::pi);
    CHECK(z.spinning_friction() == doctest::Approx(z.spin_ratio * z.friction));
    eta_sum += z.spin_ratio;
    ++shapes[static_cast<int>(z.shape.kind)];
  }
  const double sigma_mean = 0.0001 / std::sqrt(static_cast<double>(n));
  CHECK(std::abs(eta_sum / n - 0.002) <= 3.0 * sigma_mean);
  for (int c : shapes) CHECK(std::abs(c - n / 3.0) < 3.0 * std::sqrt(n * (1.0 / 3) * (2.0 / 3)));

  Rng a(7), b(7);
  const auto za = sample_latents(a, world, prior);
  const auto zb = sample_latents(b, world, prior);
  CHECK(za.noise_seed == zb.noise_seed);
  CHECK(za.object_x == zb.object_x);
  CHECK(za.shape.dims == zb.shape.dims);

  WorldParams bad;
  bad.workspace_size = 0.0;
  CHECK_THROWS_AS(sample_latents(rng, bad, prior), Error);
}

TEST_CASE("camera trajectory") {
  CameraParams params;
  const auto views = camera_trajectory(6, 0.3, params);
  REQUIRE(views.size() == 6);
  const Vec3 center = workspace_center(0.3);
  for (std::size_t i = 0; i < views.size(); ++i) {
    const Mat3 r = views[i].world_from_camera.linear();
    CHECK((r.transpose() * r - Mat3::Identity()).norm() < 1e-12);
    CHECK(r.determinant() == doctest::Approx(1.0).epsilon(1e-12));
    const Vec3 eye = views[i].world_from_camera.translation();
    const Vec3 axis = r.col(2);
    const Vec3 to_center = center - eye;
    CHECK((to_center - to_center.dot(axis) * axis).norm() < 1e-9);
    const Vec3 e = eye - center;
    const double az = std::atan2(e.y(), e.x());
    double expected = std::numbers::pi / 3.0 * i;
    if (expected > std::numbers::pi) expected -= 2 * std::numbers::pi;
    CHECK(az == doctest::Approx(expected).epsilon(1e-12));
  }
  const auto again = camera_trajectory(6, 0.3, params);
  CHECK(again[3].world_from_camera.matrix() == views[3].world_from_camera.matrix());
  CHECK_THROWS_AS(camera_trajectory(0, 0.3, params), Error);
}

TEST_CASE("render_depth") {
  const Intrinsics k = make_intrinsics(101, 101, 60.0);
  SUBCASE("sphere on the optical axis") {
    const double d = 0.4, r = 0.05;
    Primitive s;
    s.kind = ShapeKind::Sphere;
    s.dims = Vec3::Constant(r);
    s.center = Vec3(0.1, 0.2, 0.3);
    const Vec3 eye = s.center + Vec3(0.0, -d * std::sin(0.3), d * std::cos(0.3));
    const auto view = look_at(eye, s.center, k);
    const auto img = render_depth(Scene{{s}}, view);
    CHECK(std::abs(img.at(50, 50) - (d - r)) < 1e-9);
  }
  SUBCASE("empty scene") {
    const auto view = look_at(Vec3(0, 0, 1), Vec3::Zero(), k);
    const auto img = render_depth(Scene{}, view);
    CHECK(std::all_of(img.depth.begin(), img.depth.end(), [](double v) { return v == 0.0; }));
  }
  SUBCASE("occlusion: nearest surface wins") {
    Primitive front, back;
    front.kind = back.kind = ShapeKind::Box;
    front.dims = back.dims = Vec3::Constant(0.05);
    front.center = Vec3(0, 0, 0.2);
    back.center = Vec3(0, 0, 0.0);
    const auto view = look_at(Vec3(0, 0, 1.0), Vec3::Zero(), k);
    const auto img = render_depth(Scene{{back, front}}, view);
    CHECK(img.at(50, 50) == doctest::Approx(1.0 - 0.25).epsilon(1e-12));
  }
  SUBCASE("box silhouette matches the analytic projected area") {
    const Intrinsics big = make_intrinsics(848, 480, 86.0);
    Primitive b;
    b.kind = ShapeKind::Box;
    b.dims = Vec3(0.04, 0.025, 0.03);
    b.center = Vec3(0.01, -0.02, 0.1);
    b.yaw = 0.4;
    const auto view = look_at(Vec3(0.25, 0.2, 0.45), Vec3(0, 0, 0.08), big);
    const auto img = render_depth(Scene{{b}}, view);
    const double pixels = std::count_if(img.depth.begin(), img.depth.end(), [](double v) { return v > 0.0; });

    std::vector<Eigen::Vector2d> proj;
    const Mat3 rot = Eigen::AngleAxisd(b.yaw, Vec3::UnitZ()).toRotationMatrix();
    for (int sx : {-1, 1})
      for (int sy : {-1, 1})
        for (int sz : {-1, 1}) {
          const Vec3 corner = b.center + rot * Vec3(sx * b.dims.x(), sy * b.dims.y(), sz * b.dims.z());
          const Vec3 pc = view.world_from_camera.inverse() * corner;
          proj.emplace_back(big.fx * pc.x() / pc.z() + big.cx, big.fy * pc.y() / pc.z() + big.cy);
        }
    const double area = hull_area(proj);
    CHECK(pixels == doctest::Approx(area).epsilon(0.02));
  }
}

TEST_CASE("depth noise") {
  DepthImage img;
  img.width = 1000;
  img.height = 1000;
  img.depth.assign(1000000, 0.5);
  for (int u = 0; u < 1000; ++u) img.at(u, 0) = 0.0;
  Rng rng(3);

  NoiseParams none;
  none.sigma = 0.0;
  const auto same = apply_depth_noise(img, rng, none);
  CHECK(same.depth == img.depth);

  NoiseParams p;
  p.sigma = 0.002;
  const auto noisy = apply_depth_noise(img, rng, p);
  double s = 0.0, s2 = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < img.depth.size(); ++i) {
    if (img.depth[i] == 0.0) {
      CHECK(noisy.depth[i] == 0.0);
      continue;
    }
    const double r = noisy.depth[i] - img.depth[i];
    s += r;
    s2 += r * r;
    ++count;
  }
  const double sd = std::sqrt(s2 / count - (s / count) * (s / count));
  CHECK(sd == doctest::Approx(0.002).epsilon(0.05));

  NoiseParams biased;
  biased.sigma = 0.0;
  biased.bias_scale = 0.01;
  const auto warped = apply_depth_noise(img, rng, biased);
  double max_rel = 0.0;
  for (std::size_t i = 0; i < img.depth.size(); ++i) {
    if (img.depth[i] > 0) max_rel = std::max(max_rel, std::abs(warped.depth[i] / img.depth[i] - 1.0));
  }
  CHECK(max_rel > 0.0);
  CHECK(max_rel <= 0.01 * std::sqrt(6.0) + 1e-12);
}

TEST_CASE("grasp surrogate") {
  const WorldParams world;
  const SurrogateParams params;
  LatentState z;
  z.shape.kind = ShapeKind::Box;
  z.shape.dims = Vec3(0.03, 0.02, 0.03);
  z.object_x = 0.02;
  z.object_y = -0.01;
  z.object_yaw = 0.3;
  z.friction = 2.0;
  z.finger_torque = 40.0;
  const Primitive obj = object_primitive(z, world);

  const auto aligned = top_down_at(obj.center, obj.yaw);
  CHECK(grasp_alignment(aligned, obj) == doctest::Approx(1.0));
  CHECK(analytic_success_prob(aligned, z, world, params) >= 0.9);

  // Beyond d0 from the centroid the rate is small whatever the other terms.
  const auto far = top_down_at(obj.center + Vec3(0.05, 0.0, 0.05), obj.yaw);
  CHECK(analytic_success_prob(far, z, world, params) <= 0.05);

  SUBCASE("Bernoulli rate") {
    const auto h = top_down_at(obj.center + Vec3(0.01, 0.01, 0.0), obj.yaw + 0.5);
    const double p = analytic_success_prob(h, z, world, params);
    Rng rng(11);
    int hits = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
      const auto out = simulate_grasp(h, z, rng, world, params);
      CHECK(out.success_probability == p);
      hits += out.success;
    }
    CHECK(std::abs(hits - n * p) <= 3.0 * std::sqrt(n * p * (1 - p)));
    Rng a(5), b(5);
    CHECK(simulate_grasp(h, z, a, world, params).success ==
          simulate_grasp(h, z, b, world, params).success);
  }

  SUBCASE("monotone in friction and torque") {
    const auto h = top_down_at(obj.center + Vec3(0.0, 0.02, 0.01), obj.yaw + 0.2);
    double prev = -1.0;
    for (double mu = 1.0; mu <= 2.0; mu += 0.1) {
      for (double tau = 35.0; tau <= 40.0; tau += 0.5) {
        LatentState zz = z;
        zz.friction = mu;
        zz.finger_torque = tau;
        const double p = analytic_success_prob(h, zz, world, params);
        if (tau > 35.0) CHECK(p >= prev);
        prev = p;
      }
      LatentState lo = z, hi = z;
      lo.friction = mu;
      hi.friction = std::min(2.0, mu + 0.1);
      CHECK(analytic_success_prob(h, hi, world, params) >= analytic_success_prob(h, lo, world, params));
    }
  }

  SUBCASE("symmetries") {
    LatentState cyl = z;
    cyl.shape.kind = ShapeKind::Cylinder;
    cyl.shape.dims = Vec3(0.025, 0.025, 0.03);
    const auto h = top_down_at(object_primitive(cyl, world).center + Vec3(0.01, 0, 0), 1.1);
    const double base = analytic_success_prob(h, cyl, world, params);
    for (double yaw = 0.0; yaw < 6.28; yaw += 0.37) {
      LatentState turned = cyl;
      turned.object_yaw = yaw;
      CHECK(analytic_success_prob(h, turned, world, params) == doctest::Approx(base).epsilon(1e-12));
    }
    // A box is symmetric under quarter turns about its vertical axis.
    const double box_base = analytic_success_prob(h, z, world, params);
    LatentState quarter = z;
    quarter.object_yaw += std::numbers::pi / 2;
    CHECK(analytic_success_prob(h, quarter, world, params) == doctest::Approx(box_base).epsilon(1e-12));
  }
}

TEST_CASE("surrogate rate under the hand prior is informative") {
  // Prior mean success over random scenes with h drawn from a box around the
  // object should sit well away from 0 and 1.
  const WorldParams world;
  const LatentPriorParams lp;
  const SurrogateParams sp;
  const auto orient = build_orientation_prior();
  Rng rng(17);
  double acc = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const auto z = sample_latents(rng, world, lp);
    const auto obj = object_primitive(z, world);
    HandPrior prior;
    const Vec3 pad = obj.dims + Vec3::Constant(0.004);
    prior.position = PositionPrior(obj.center - pad, obj.center + pad);
    prior.orientation = orient;
    acc += analytic_success_prob(prior_sample(rng, prior), z, world, sp);
  }
  const double mean = acc / n;
  MESSAGE("prior mean success rate " << mean);
  CHECK(mean > 0.15);
  CHECK(mean < 0.45);
}
