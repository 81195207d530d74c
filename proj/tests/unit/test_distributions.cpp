#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "gsbi/distributions.hpp"
#include "gsbi/error.hpp"

using namespace gsbi;

namespace {

Vec4 random_unit(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return Vec4(n(rng), n(rng), n(rng), n(rng)).normalized();
}

// Semicircle law: marginal CDF of one coordinate of a uniform point on S^3.
double uniform_s3_coordinate_cdf(double x) {
  x = std::clamp(x, -1.0, 1.0);
  return 0.5 + (x * std::sqrt(1.0 - x * x) + std::asin(x)) / std::numbers::pi;
}

double ks_statistic(std::vector<double> xs, double (*cdf)(double)) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = cdf(xs[i]);
    d = std::max({d, std::abs(f - i / n), std::abs((i + 1) / n - f)});
  }
  return d;
}

// Monte-Carlo estimate of the integral of the density over S^3.
double mc_mass(const PowerSpherical& d, int samples, std::uint64_t seed) {
  Rng rng(seed);
  double acc = 0.0;
  for (int i = 0; i < samples; ++i) acc += std::exp(ps_log_density(random_unit(rng), d));
  return acc / samples * 2.0 * std::numbers::pi * std::numbers::pi;
}

}  // namespace

TEST_CASE("ps_log_normalizer") {
  CHECK(ps_log_normalizer(0.0) == doctest::Approx(-std::log(2.0 * std::numbers::pi * std::numbers::pi)));
  CHECK_THROWS_AS(ps_log_normalizer(-1.0), Error);

  // MC oracle with uniform sphere samples: exp(log C) * mean((1+mu^T q)^k) * 2 pi^2 = 1.
  for (double kappa : {1.0, 4.0, 8.0}) {
    const PowerSpherical d(Vec4::UnitW(), kappa);
    CHECK(mc_mass(d, 400000, 11 + static_cast<int>(kappa)) == doctest::Approx(1.0).epsilon(0.01));
  }
}

TEST_CASE("ps_log_density examples") {
  const Vec4 mu = Vec4(1, 2, 3, 4).normalized();
  const PowerSpherical d(mu, 8.0);
  const double log_c = ps_log_normalizer(8.0);
  CHECK(ps_log_density(mu, d) == doctest::Approx(log_c + 8.0 * std::log(2.0)));
  CHECK(ps_log_density(-mu, d) == -std::numeric_limits<double>::infinity());
  const Vec4 ortho = Vec4(2, -1, 0, 0).normalized();
  CHECK(ps_log_density(ortho, d) == doctest::Approx(log_c));
  CHECK_THROWS_AS(ps_log_density(Vec4(0, 0, 0, 2), d), Error);
}

TEST_CASE("ps gradients") {
  const Vec4 mu = Vec4(0.2, -0.4, 0.1, 0.9).normalized();
  const PowerSpherical d(mu, 8.0);
  CHECK((ps_log_density_grad(mu, d) - 4.0 * mu).norm() < 1e-12);
  CHECK(ps_log_density_grad(mu, PowerSpherical(mu, 0.0)).norm() == 0.0);
  CHECK_THROWS_AS(ps_log_density_grad(-mu, d), Error);

  // Both gradient forms agree: grad p = p * grad log p.
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const Vec4 q = random_unit(rng);
    if (1.0 + mu.dot(q) < 1e-3) continue;
    const Vec4 lhs = ps_density_grad(q, d);
    const Vec4 rhs = std::exp(ps_log_density(q, d)) * ps_log_density_grad(q, d);
    CHECK((lhs - rhs).norm() <= 1e-10 * std::max(1.0, rhs.norm()));
  }

  // Central differences in the ambient R^4 of the unnormalized log-density.
  const double h = 1e-6;
  int checked = 0;
  while (checked < 100) {
    const Vec4 q = random_unit(rng);
    if (1.0 + mu.dot(q) < 0.05) continue;
    const Vec4 g = ps_log_density_grad(q, d);
    Vec4 fd;
    for (int k = 0; k < 4; ++k) {
      Vec4 e = Vec4::Zero();
      e[k] = h;
      fd[k] = (8.0 * std::log(1.0 + mu.dot(q + e)) - 8.0 * std::log(1.0 + mu.dot(q - e))) / (2 * h);
    }
    CHECK((fd - g).norm() <= 1e-5 * std::max(1.0, g.norm()));
    ++checked;
  }
}

TEST_CASE("ps_sample") {
  Rng rng(5);
  const Vec4 mu = Vec4(-0.3, 0.5, 0.1, 0.8).normalized();
  const PowerSpherical d(mu, 8.0);
  Vec4 mean = Vec4::Zero();
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const Vec4 s = ps_sample(rng, d);
    CHECK(std::abs(s.norm() - 1.0) <= 1e-9);
    mean += s;
  }
  CHECK(mu.dot(mean.normalized()) > 0.99);

  // The mean of mu^T q equals 1 - 2b/(a+b) for the Beta(a, b) marginal.
  const double a = 1.5 + 8.0, b = 1.5;
  CHECK(mu.dot(mean / n) == doctest::Approx(2.0 * a / (a + b) - 1.0).epsilon(0.01));

  // kappa = 0 is uniform on S^3: KS test of each coordinate at alpha = 0.01.
  const PowerSpherical uniform(mu, 0.0);
  const int m = 20000;
  std::vector<std::vector<double>> coords(4);
  for (int i = 0; i < m; ++i) {
    const Vec4 s = ps_sample(rng, uniform);
    for (int k = 0; k < 4; ++k) coords[k].push_back(s[k]);
  }
  const double critical = 1.628 / std::sqrt(static_cast<double>(m));
  for (int k = 0; k < 4; ++k) {
    CHECK(ks_statistic(coords[k], uniform_s3_coordinate_cdf) < critical);
  }
}

TEST_CASE("orientation prior construction") {
  const auto prior = build_orientation_prior();
  CHECK(prior.modes.size() == 20);
  CHECK(prior.kappa == 8.0);
  for (const Vec4& m : prior.modes) CHECK(std::abs(m.norm() - 1.0) < 1e-12);

  // Modes are distinct rotations.
  for (std::size_t i = 0; i < prior.modes.size(); ++i) {
    for (std::size_t j = i + 1; j < prior.modes.size(); ++j) {
      CHECK(std::abs(prior.modes[i].dot(prior.modes[j])) < 1.0 - 1e-6);
    }
  }

  // The first mode approaches top-down: hand +z maps to world -z.
  const Mat3 r = UnitQuaternion::from_unit(prior.modes[0]).rotation();
  CHECK((r.col(2) - Vec3(0, 0, -1)).norm() < 1e-12);

  Rng rng(9);
  for (int i = 0; i < 1000; ++i) {
    const Vec4 q = random_unit(rng);
    CHECK(std::abs(mixture_log_density(q, prior) - mixture_log_density(-q, prior)) <= 1e-9);
  }
}

TEST_CASE("mixture gradient") {
  const auto prior = build_orientation_prior();
  Rng rng(13);
  const double h = 1e-6;
  for (int i = 0; i < 100; ++i) {
    const Vec4 q = random_unit(rng);
    const Vec4 g = mixture_log_density_grad(q, prior);
    // Extend the mixture off the sphere via the (1 + mu^T x) form and
    // difference it directly.
    auto f = [&](const Vec4& x) {
      double acc = 0.0;
      for (const Vec4& m : prior.modes) {
        acc += std::pow(std::max(0.0, 1.0 + m.dot(x)), 8.0) +
               std::pow(std::max(0.0, 1.0 - m.dot(x)), 8.0);
      }
      return std::log(acc);
    };
    Vec4 fd;
    for (int k = 0; k < 4; ++k) {
      Vec4 e = Vec4::Zero();
      e[k] = h;
      fd[k] = (f(q + e) - f(q - e)) / (2 * h);
    }
    CHECK((fd - g).norm() <= 1e-5 * std::max(1.0, g.norm()));
  }

  // A two-mode prior evaluated at the normalized midpoint of its modes: the
  // gradient lies along the midpoint, so its tangent part vanishes.
  const Vec4 a = Vec4(1, 0, 0, 1).normalized();
  const Vec4 b = Vec4(0, 1, 0, 1).normalized();
  const auto two = make_orientation_prior({a, b}, 8.0);
  const Vec4 mid = (a + b).normalized();
  const Vec4 g = mixture_log_density_grad(mid, two);
  CHECK((g - g.dot(mid) * mid).norm() < 1e-12);
}

TEST_CASE("position prior and bijection") {
  const PositionPrior box(Vec3(-0.1, 0.0, 0.05), Vec3(0.1, 0.2, 0.15));
  CHECK((box_bijection(Vec3::Zero(), box) - box.center()).norm() < 1e-15);
  CHECK((box_bijection(Vec3::Ones(), box) - box.high).norm() < 1e-15);
  CHECK_THROWS_AS(box_bijection(Vec3(1.5, 0, 0), box), Error);
  CHECK_THROWS_AS(PositionPrior(Vec3::Zero(), Vec3(1, 0, 1)), Error);

  Rng rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const Vec3 v(u(rng), u(rng), u(rng));
    CHECK((inverse_box_bijection(box_bijection(v, box), box) - v).norm() <= 1e-12);
    Vec3 w = v;
    w[i % 3] = std::min(1.0, w[i % 3] + 0.01);
    CHECK((box_bijection(w, box) - box_bijection(v, box)).minCoeff() >= 0.0);
  }
}

TEST_CASE("hand prior density, gradient and sampling") {
  HandPrior prior;
  prior.position = PositionPrior(Vec3(-0.05, -0.05, 0.05), Vec3(0.05, 0.05, 0.12));
  prior.orientation = build_orientation_prior();

  ProductPoint h;
  h.position = Vec3(0.01, -0.02, 0.07);
  h.orientation = UnitQuaternion::from_unit(prior.orientation.modes[0]);
  const double expected = -std::log(prior.position.volume()) +
                          mixture_log_density(prior.orientation.modes[0], prior.orientation);
  CHECK(prior_log_density(h, prior) == doctest::Approx(expected));

  ProductPoint moved = h;
  moved.position += Vec3(0.02, 0.01, 0.03);
  CHECK(prior_log_density(moved, prior) == doctest::Approx(prior_log_density(h, prior)));

  ProductPoint outside = h;
  outside.position.x() = 0.2;
  CHECK(prior_log_density(outside, prior) == -std::numeric_limits<double>::infinity());

  const auto g = prior_grad(h, prior);
  CHECK(g.gradient.position == Vec3::Zero());
  CHECK_FALSE(g.on_boundary);
  const auto gb = prior_grad(outside, prior);
  CHECK(gb.on_boundary);
  CHECK(gb.gradient.position == Vec3::Zero());

  Rng rng(21);
  std::vector<int> counts(20, 0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto s = prior_sample(rng, prior);
    CHECK(prior.position.contains(s.position));
    CHECK(std::abs(s.orientation.coeffs().norm() - 1.0) < 1e-12);
    CHECK(std::isfinite(prior_log_density(s, prior)));
    ++counts[mixture_sample(rng, prior.orientation).mode];
  }
  const double p = 1.0 / 20.0;
  const double sigma = std::sqrt(n * p * (1 - p));
  for (int c : counts) CHECK(std::abs(c - n * p) <= 3.0 * sigma + 1.0);
}
