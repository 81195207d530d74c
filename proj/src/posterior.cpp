#include "gsbi/posterior.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "gsbi/dataset.hpp"
#include "gsbi/error.hpp"

namespace gsbi {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Descent {
  std::vector<double> trace;
  std::vector<ProductPoint> path;
  int best_step = 0;
};

Descent descend(const PosteriorModel& m, PosteriorMode mode, const ProductPoint& start,
                const OptimizerConfig& config) {
  const Vec3 hw = m.prior.position.half_width();
  const Vec3 precondition = hw.cwiseProduct(hw);
  Descent d;
  d.trace.reserve(config.n_steps + 1);
  d.path.reserve(config.n_steps + 1);
  ProductPoint h = start;
  d.path.push_back(h);
  d.trace.push_back(neg_log_posterior(m, h, mode));
  for (int step = 0; step < config.n_steps; ++step) {
    HandGradient g = objective_grad(m, h, mode).gradient;
    // d/du = hw * d/dx, and a step in u moves x by hw times as much.
    g.position = g.position.cwiseProduct(precondition);
    h = riemannian_step(h, g, config.steps);
    h.position = m.prior.position.clamp(h.position);
    d.path.push_back(h);
    d.trace.push_back(neg_log_posterior(m, h, mode));
    if (d.trace.back() < d.trace[d.best_step]) d.best_step = step + 1;
  }
  return d;
}

}  // namespace

EnsembleLogRatio::EnsembleLogRatio(const RatioEnsemble& ensemble, const TsdfGrid& grid,
                                   const PoseFeature4D& pose, const PositionPrior& box)
    : ratio_(ensemble, grid, pose, box) {}

double EnsembleLogRatio::value(const ProductPoint& h) const { return ratio_.log_ratio(true, h); }

LogRatioModel::Evaluation EnsembleLogRatio::evaluate(const ProductPoint& h) const {
  const auto r = ratio_.grad_wrt_hand(true, h);
  return {r.value, r.gradient};
}

AnalyticLogRatio::AnalyticLogRatio(std::vector<Bump> bumps, Vec4 orientation_mu,
                                   double orientation_kappa)
    : bumps_(std::move(bumps)), mu_(orientation_mu), kappa_(orientation_kappa) {
  if (bumps_.empty()) fail(ErrorKind::InvalidInput, "AnalyticLogRatio: no bumps");
  for (const Bump& b : bumps_) {
    if (!(b.sigma > 0.0)) fail(ErrorKind::InvalidInput, "AnalyticLogRatio: sigma must be positive");
  }
  if (kappa_ > 0.0) mu_.normalize();
}

double AnalyticLogRatio::value(const ProductPoint& h) const { return evaluate(h).value; }

LogRatioModel::Evaluation AnalyticLogRatio::evaluate(const ProductPoint& h) const {
  std::vector<double> terms;
  terms.reserve(bumps_.size());
  double top = -kInf;
  for (const Bump& b : bumps_) {
    const double t = b.peak - (h.position - b.center).squaredNorm() / (2.0 * b.sigma * b.sigma);
    terms.push_back(t);
    top = std::max(top, t);
  }
  double sum = 0.0;
  Vec3 grad = Vec3::Zero();
  for (std::size_t i = 0; i < bumps_.size(); ++i) {
    const double w = std::exp(terms[i] - top);
    sum += w;
    const Bump& b = bumps_[i];
    grad -= w * (h.position - b.center) / (b.sigma * b.sigma);
  }
  Evaluation e;
  e.value = top + std::log(sum);
  e.gradient.position = grad / sum;
  if (kappa_ > 0.0) {
    const double c = 1.0 + mu_.dot(h.orientation.coeffs());
    e.value += kappa_ * std::log(c);
    e.gradient.orientation = kappa_ * mu_ / c;
  }
  return e;
}

const char* to_string(PosteriorMode mode) { return mode == PosteriorMode::Map ? "map" : "mle"; }

PosteriorMode parse_mode(const std::string& s) {
  if (s == "map") return PosteriorMode::Map;
  if (s == "mle") return PosteriorMode::Mle;
  fail(ErrorKind::InvalidInput, "unknown mode '" + s + "' (expected map or mle)");
}

bool PosteriorModel::collides(const ProductPoint& h) const {
  if (collision) return collision(h);
  if (collision_grid.n() == 0) return false;
  return collision_check(collision_grid, h, default_gripper());
}

PosteriorModel make_posterior(const ProjectConfig& config, const RatioEnsemble& ensemble,
                              const TsdfGrid& voxel_grid, const TsdfGrid& collision_grid,
                              const PoseFeature4D& pose, const Aabb& aabb) {
  PosteriorModel m;
  m.prior = hand_prior(config, aabb);
  m.ratio = std::make_shared<EnsembleLogRatio>(ensemble, voxel_grid, pose, m.prior.position);
  m.pose = pose;
  m.voxel_grid = voxel_grid;
  m.collision_grid = collision_grid;
  return m;
}

ObjectiveTerms objective_terms(const PosteriorModel& m, const ProductPoint& h, PosteriorMode mode) {
  ObjectiveTerms t;
  if (!m.prior.position.contains(h.position)) {
    t.ratio_term = kInf;
    t.prior_term = mode == PosteriorMode::Map ? kInf : 0.0;
    t.total = kInf;
    return t;
  }
  t.ratio_term = -m.ratio->value(h);
  if (mode == PosteriorMode::Map) t.prior_term = -prior_log_density(h, m.prior);
  t.total = t.ratio_term + t.prior_term;
  if (std::isnan(t.total)) t.total = kInf;
  return t;
}

double neg_log_posterior(const PosteriorModel& m, const ProductPoint& h, PosteriorMode mode) {
  return objective_terms(m, h, mode).total;
}

ObjectiveGradient objective_grad(const PosteriorModel& m, const ProductPoint& h, PosteriorMode mode) {
  ObjectiveGradient out;
  out.gradient = -m.ratio->evaluate(h).gradient;
  out.on_boundary = !m.prior.position.strictly_contains(h.position);
  if (mode == PosteriorMode::Map && !out.on_boundary) {
    out.gradient += -prior_grad(h, m.prior).gradient;
  }
  return out;
}

OptimizationReport optimize(const PosteriorModel& m, PosteriorMode mode, Rng& rng,
                            const OptimizerConfig& config) {
  if (!m.ratio) fail(ErrorKind::InvalidInput, "optimize: model has no ratio");
  if (config.n_init < 1 || config.n_steps < 0) {
    fail(ErrorKind::InvalidInput, "optimize: n_init must be >= 1 and n_steps >= 0");
  }
  std::vector<ProductPoint> starts(config.n_init);
  std::vector<double> values(config.n_init);
  for (int i = 0; i < config.n_init; ++i) {
    starts[i] = prior_sample(rng, m.prior);
    values[i] = neg_log_posterior(m, starts[i], mode);
  }
  const auto first = std::min_element(values.begin(), values.end());
  if (!std::isfinite(*first)) {
    fail(ErrorKind::DegeneratePosterior,
         "optimize: all " + std::to_string(config.n_init) + " initial objectives are infinite");
  }

  Descent best;
  if (config.descend_all) {
    double best_value = kInf;
    for (int i = 0; i < config.n_init; ++i) {
      if (!std::isfinite(values[i])) continue;
      Descent d = descend(m, mode, starts[i], config);
      if (d.trace[d.best_step] < best_value) {
        best_value = d.trace[d.best_step];
        best = std::move(d);
      }
    }
  } else {
    best = descend(m, mode, starts[first - values.begin()], config);
  }

  OptimizationReport r;
  r.mode = mode;
  r.n_starts = config.n_init;
  r.n_steps = config.n_steps;
  r.best_step = best.best_step;
  r.best = best.path[best.best_step];
  r.best_objective = best.trace[best.best_step];
  r.best_terms = objective_terms(m, r.best, mode);
  r.trace = std::move(best.trace);
  r.path = std::move(best.path);
  return r;
}

OptimizationReport plan_with_retry(const PosteriorModel& m, PosteriorMode mode, Rng& rng,
                                   const OptimizerConfig& config) {
  OptimizationReport r;
  for (int attempt = 0;; ++attempt) {
    r = optimize(m, mode, rng, config);
    r.retries_used = attempt;
    r.collision = m.collides(r.best);
    if (!r.collision) return r;
    if (attempt >= config.max_retries) break;
  }
  r.infeasible = true;
  return r;
}

void write_report(std::ostream& os, const OptimizationReport& r) {
  const auto old_precision = os.precision(17);
  const Vec4& q = r.best.orientation.coeffs();
  os << "report mode=" << to_string(r.mode) << " n_starts=" << r.n_starts
     << " n_steps=" << r.n_steps << " retries_used=" << r.retries_used
     << " collision=" << (r.collision ? 1 : 0) << " infeasible=" << (r.infeasible ? 1 : 0)
     << " best_step=" << r.best_step << " objective=" << r.best_objective
     << " ratio_term=" << r.best_terms.ratio_term << " prior_term=" << r.best_terms.prior_term
     << " px=" << r.best.position.x() << " py=" << r.best.position.y()
     << " pz=" << r.best.position.z() << " qx=" << q[0] << " qy=" << q[1] << " qz=" << q[2]
     << " qw=" << q[3] << '\n';
  for (std::size_t i = 0; i < r.path.size(); ++i) {
    const ProductPoint& h = r.path[i];
    const Vec4& c = h.orientation.coeffs();
    os << "step index=" << i << " objective=" << r.trace[i] << " px=" << h.position.x()
       << " py=" << h.position.y() << " pz=" << h.position.z() << " qx=" << c[0]
       << " qy=" << c[1] << " qz=" << c[2] << " qw=" << c[3] << '\n';
  }
  os.precision(old_precision);
}

}  // namespace gsbi
