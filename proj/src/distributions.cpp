#include "gsbi/distributions.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "gsbi/error.hpp"

namespace gsbi {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_unit(const Vec4& q, const char* what) {
  const double n = q.norm();
  if (!std::isfinite(n) || std::abs(n - 1.0) > 1e-6) {
    fail(ErrorKind::InvalidInput, std::string(what) + ": expected a unit quaternion");
  }
}

// 1 + mu^T q with rounding below zero folded onto the boundary.
double cosine_term(const Vec4& q, const Vec4& mu) {
  return std::max(0.0, 1.0 + mu.dot(q));
}

double log_sum_exp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// Closing axis c and approach axis a define the hand frame columns
// (c, a x c, a).
Mat3 hand_frame(const Vec3& closing, const Vec3& approach) {
  Mat3 r;
  r.col(0) = closing;
  r.col(1) = approach.cross(closing);
  r.col(2) = approach;
  return r;
}

}  // namespace

PowerSpherical::PowerSpherical(const Vec4& m, double k) : mu(m), kappa(k) {
  require_unit(m, "PowerSpherical");
  mu.normalize();
  if (!std::isfinite(k) || k < 0.0) {
    fail(ErrorKind::InvalidInput, "PowerSpherical: kappa must be finite and non-negative");
  }
}

double ps_log_normalizer(double kappa, int dim) {
  if (!(kappa >= 0.0) || !std::isfinite(kappa)) {
    fail(ErrorKind::InvalidInput, "ps_log_normalizer: kappa must be finite and >= 0");
  }
  if (dim < 2) fail(ErrorKind::InvalidInput, "ps_log_normalizer: dim must be >= 2");
  // Normalizer of (1 + mu^T x)^kappa over S^{d-1}:
  //   Z = 2^(a+b) pi^b Gamma(a) / Gamma(a+b),  a = (d-1)/2 + kappa,  b = (d-1)/2.
  const double b = 0.5 * (dim - 1);
  const double a = b + kappa;
  const double log_z = (a + b) * std::numbers::ln2 + b * std::log(std::numbers::pi) +
                       std::lgamma(a) - std::lgamma(a + b);
  return -log_z;
}

double ps_log_density(const Vec4& q, const PowerSpherical& d) {
  require_unit(q, "ps_log_density");
  const double log_c = ps_log_normalizer(d.kappa);
  if (d.kappa == 0.0) return log_c;
  const double t = cosine_term(q, d.mu);
  if (t <= 0.0) return -kInf;
  return log_c + d.kappa * std::log(t);
}

Vec4 ps_density_grad(const Vec4& q, const PowerSpherical& d) {
  const double t = 1.0 + d.mu.dot(q);
  if (t <= 0.0) fail(ErrorKind::Domain, "ps_density_grad: evaluated at the antipode of mu");
  if (d.kappa == 0.0) return Vec4::Zero();
  const double c = std::exp(ps_log_normalizer(d.kappa));
  return c * d.kappa * std::pow(t, d.kappa - 1.0) * d.mu;
}

Vec4 ps_log_density_grad(const Vec4& q, const PowerSpherical& d) {
  const double t = 1.0 + d.mu.dot(q);
  if (t <= 0.0) fail(ErrorKind::Domain, "ps_log_density_grad: evaluated at the antipode of mu");
  if (d.kappa == 0.0) return Vec4::Zero();
  return (d.kappa / t) * d.mu;
}

Vec4 ps_sample(Rng& rng, const PowerSpherical& d) {
  constexpr int kDim = 4;
  const double beta_b = 0.5 * (kDim - 1);
  const double beta_a = beta_b + d.kappa;
  std::gamma_distribution<double> ga(beta_a, 1.0);
  std::gamma_distribution<double> gb(beta_b, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  const double xa = ga(rng);
  const double xb = gb(rng);
  const double z = xa / (xa + xb);
  const double t = 2.0 * z - 1.0;

  Vec3 v;
  do {
    v = Vec3(normal(rng), normal(rng), normal(rng));
  } while (v.squaredNorm() < 1e-24);
  v.normalize();

  // Basis vector e1 is the "north pole" the construction starts from.
  Vec4 y;
  y << t, std::sqrt(std::max(0.0, 1.0 - t * t)) * v;

  Vec4 u = Vec4::UnitX() - d.mu;
  const double un = u.norm();
  if (un > 1e-12) {
    u /= un;
    y -= 2.0 * u.dot(y) * u;
  }
  return y.normalized();
}

OrientationPrior make_orientation_prior(std::vector<Vec4> modes, double kappa) {
  if (modes.empty()) fail(ErrorKind::InvalidInput, "orientation prior needs at least one mode");
  if (!std::isfinite(kappa) || kappa < 0.0) {
    fail(ErrorKind::InvalidInput, "orientation prior: kappa must be finite and >= 0");
  }
  for (auto& m : modes) {
    require_unit(m, "orientation prior mode");
    m.normalize();
  }
  return OrientationPrior{std::move(modes), kappa};
}

OrientationPrior build_orientation_prior(double kappa) {
  // Hand frame: +x is the closing axis, +z the approach axis.
  // Five approach directions: top-down plus four horizontal approaches that
  // point at the workspace center from +x, -x, +y, -y. Each is replicated at
  // four in-hand rolls of k * pi/2 about the approach axis.
  const Vec3 up = Vec3::UnitZ();
  std::vector<Mat3> bases;
  bases.push_back(hand_frame(Vec3::UnitX(), -up));
  for (const Vec3& approach : {Vec3(-1, 0, 0), Vec3(1, 0, 0), Vec3(0, -1, 0), Vec3(0, 1, 0)}) {
    bases.push_back(hand_frame(up.cross(approach), approach));
  }
  std::vector<Vec4> modes;
  modes.reserve(20);
  for (const Mat3& base : bases) {
    for (int k = 0; k < 4; ++k) {
      const Mat3 roll =
          Eigen::AngleAxisd(k * std::numbers::pi / 2.0, Vec3::UnitZ()).toRotationMatrix();
      modes.push_back(UnitQuaternion::from_rotation(base * roll).coeffs());
    }
  }
  return make_orientation_prior(std::move(modes), kappa);
}

double mixture_log_density(const Vec4& q, const OrientationPrior& prior) {
  require_unit(q, "mixture_log_density");
  const double log_c = ps_log_normalizer(prior.kappa);
  const double log_w = -std::log(2.0 * static_cast<double>(prior.modes.size()));
  std::vector<double> terms;
  terms.reserve(2 * prior.modes.size());
  for (const Vec4& m : prior.modes) {
    for (double sign : {1.0, -1.0}) {
      const double t = cosine_term(q, sign * m);
      double lp;
      if (prior.kappa == 0.0) {
        lp = log_c;
      } else {
        lp = t > 0.0 ? log_c + prior.kappa * std::log(t) : -kInf;
      }
      terms.push_back(log_w + lp);
    }
  }
  return log_sum_exp(terms);
}

Vec4 mixture_log_density_grad(const Vec4& q, const OrientationPrior& prior) {
  if (prior.kappa == 0.0) return Vec4::Zero();
  // The normalizer and the equal weights cancel in the responsibilities.
  std::vector<double> log_terms;
  std::vector<Vec4> directions;
  log_terms.reserve(2 * prior.modes.size());
  directions.reserve(2 * prior.modes.size());
  for (const Vec4& m : prior.modes) {
    for (double sign : {1.0, -1.0}) {
      const Vec4 mu = sign * m;
      const double t = 1.0 + mu.dot(q);
      if (t <= 0.0) continue;  // zero-density component, zero weight
      log_terms.push_back(prior.kappa * std::log(t));
      directions.push_back((prior.kappa / t) * mu);
    }
  }
  const double lse = log_sum_exp(log_terms);
  Vec4 g = Vec4::Zero();
  for (std::size_t i = 0; i < log_terms.size(); ++i) {
    g += std::exp(log_terms[i] - lse) * directions[i];
  }
  return g;
}

OrientationSample mixture_sample(Rng& rng, const OrientationPrior& prior) {
  std::uniform_int_distribution<std::size_t> pick(0, 2 * prior.modes.size() - 1);
  const std::size_t c = pick(rng);
  OrientationSample s;
  s.mode = c / 2;
  s.antipode = (c % 2) == 1;
  const Vec4 mu = s.antipode ? Vec4(-prior.modes[s.mode]) : prior.modes[s.mode];
  s.q = UnitQuaternion::normalized(ps_sample(rng, PowerSpherical(mu, prior.kappa)));
  return s;
}

PositionPrior::PositionPrior(const Vec3& lo, const Vec3& hi) : low(lo), high(hi) {
  if (!lo.allFinite() || !hi.allFinite() || !(lo.array() < hi.array()).all()) {
    fail(ErrorKind::InvalidInput, "PositionPrior: expected finite bounds with low < high");
  }
}

bool PositionPrior::contains(const Vec3& x) const {
  return (x.array() >= low.array()).all() && (x.array() <= high.array()).all();
}

bool PositionPrior::strictly_contains(const Vec3& x) const {
  return (x.array() > low.array()).all() && (x.array() < high.array()).all();
}

Vec3 PositionPrior::clamp(const Vec3& x) const {
  return x.cwiseMax(low).cwiseMin(high);
}

Vec3 box_bijection(const Vec3& u, const PositionPrior& prior) {
  constexpr double kSlack = 1e-12;
  if (!u.allFinite() || (u.array().abs() > 1.0 + kSlack).any()) {
    fail(ErrorKind::InvalidInput, "box_bijection: u must lie in [-1, 1]^3");
  }
  return prior.center() + prior.half_width().cwiseProduct(u);
}

Vec3 inverse_box_bijection(const Vec3& x, const PositionPrior& prior) {
  return (x - prior.center()).cwiseQuotient(prior.half_width());
}

double prior_log_density(const ProductPoint& h, const HandPrior& prior) {
  if (!prior.position.contains(h.position)) return -kInf;
  return -std::log(prior.position.volume()) +
         mixture_log_density(h.orientation.coeffs(), prior.orientation);
}

PriorGradient prior_grad(const ProductPoint& h, const HandPrior& prior) {
  PriorGradient out;
  out.on_boundary = !prior.position.strictly_contains(h.position);
  out.gradient.orientation = mixture_log_density_grad(h.orientation.coeffs(), prior.orientation);
  return out;
}

ProductPoint prior_sample(Rng& rng, const HandPrior& prior) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Vec3 u;
  for (int i = 0; i < 3; ++i) u[i] = unit(rng);
  ProductPoint h;
  h.position = box_bijection(u, prior.position);
  h.orientation = mixture_sample(rng, prior.orientation).q;
  return h;
}

}  // namespace gsbi
