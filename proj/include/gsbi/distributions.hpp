#pragma once

#include <cstddef>
#include <vector>

#include "gsbi/manifold.hpp"
#include "gsbi/random.hpp"

namespace gsbi {

/// Power-spherical distribution on S^3: density C(kappa) (1 + mu^T q)^kappa.
struct PowerSpherical {
  Vec4 mu = Vec4(0.0, 0.0, 0.0, 1.0);
  double kappa = 0.0;

  PowerSpherical() = default;
  PowerSpherical(const Vec4& mu, double kappa);
};

/// log C(kappa) for the power-spherical law on S^{dim-1} embedded in R^dim.
double ps_log_normalizer(double kappa, int dim = 4);

double ps_log_density(const Vec4& q, const PowerSpherical& d);

/// Euclidean gradient of the density itself, C kappa mu (1 + mu^T q)^(kappa-1).
Vec4 ps_density_grad(const Vec4& q, const PowerSpherical& d);
/// Euclidean gradient of the log-density, kappa mu / (1 + mu^T q).
Vec4 ps_log_density_grad(const Vec4& q, const PowerSpherical& d);

/// Exact sampler: Beta marginal along the north pole, uniform direction on
/// the orthogonal S^2, Householder reflection onto mu.
Vec4 ps_sample(Rng& rng, const PowerSpherical& d);

/// Equal-weight mixture over modes, each mode paired with its antipode so
/// that p(q) = p(-q).
struct OrientationPrior {
  std::vector<Vec4> modes;
  double kappa = 8.0;

  std::size_t component_count() const { return modes.size(); }
};

OrientationPrior build_orientation_prior(double kappa = 8.0);
/// Prior built from an explicit mode list (each still paired antipodally).
OrientationPrior make_orientation_prior(std::vector<Vec4> modes, double kappa);

double mixture_log_density(const Vec4& q, const OrientationPrior& prior);
Vec4 mixture_log_density_grad(const Vec4& q, const OrientationPrior& prior);

struct OrientationSample {
  UnitQuaternion q;
  std::size_t mode = 0;  // index into prior.modes
  bool antipode = false;
};
OrientationSample mixture_sample(Rng& rng, const OrientationPrior& prior);

/// Uniform position prior over an axis-aligned box, parametrized by the cube
/// [-1, 1]^3.
struct PositionPrior {
  Vec3 low = Vec3::Constant(-1.0);
  Vec3 high = Vec3::Constant(1.0);

  PositionPrior() = default;
  PositionPrior(const Vec3& low, const Vec3& high);

  Vec3 center() const { return 0.5 * (low + high); }
  Vec3 half_width() const { return 0.5 * (high - low); }
  double volume() const { return (high - low).prod(); }
  bool contains(const Vec3& x) const;
  bool strictly_contains(const Vec3& x) const;
  Vec3 clamp(const Vec3& x) const;
};

Vec3 box_bijection(const Vec3& u, const PositionPrior& prior);
Vec3 inverse_box_bijection(const Vec3& x, const PositionPrior& prior);

struct HandPrior {
  PositionPrior position;
  OrientationPrior orientation;
};

double prior_log_density(const ProductPoint& h, const HandPrior& prior);

struct PriorGradient {
  HandGradient gradient;
  bool on_boundary = false;
};

/// Gradient of the prior log-density. The uniform position factor contributes
/// zero; at or beyond the box boundary the position gradient stays zero and
/// on_boundary is set.
PriorGradient prior_grad(const ProductPoint& h, const HandPrior& prior);

ProductPoint prior_sample(Rng& rng, const HandPrior& prior);

}  // namespace gsbi
