#pragma once

#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "gsbi/config.hpp"
#include "gsbi/distributions.hpp"
#include "gsbi/manifold.hpp"
#include "gsbi/random.hpp"
#include "gsbi/ratio_net.hpp"
#include "gsbi/tsdf.hpp"

namespace gsbi {

/// log r(S=1 | h, V) for one fixed observation, with its Euclidean gradient
/// with respect to workspace position and raw quaternion.
class LogRatioModel {
 public:
  struct Evaluation {
    double value = 0.0;
    HandGradient gradient;
  };

  virtual ~LogRatioModel() = default;
  virtual double value(const ProductPoint& h) const = 0;
  virtual Evaluation evaluate(const ProductPoint& h) const = 0;
};

/// The trained ensemble conditioned on one observation.
class EnsembleLogRatio final : public LogRatioModel {
 public:
  EnsembleLogRatio(const RatioEnsemble& ensemble, const TsdfGrid& grid, const PoseFeature4D& pose,
                   const PositionPrior& box);

  double value(const ProductPoint& h) const override;
  Evaluation evaluate(const ProductPoint& h) const override;

 private:
  ObservationRatio ratio_;
};

/// Closed-form test ratio: isotropic Gaussian bumps in position (log-sum-exp
/// over bumps, each with its own peak offset) plus an optional power-spherical
/// orientation term.
class AnalyticLogRatio final : public LogRatioModel {
 public:
  struct Bump {
    Vec3 center = Vec3::Zero();
    double sigma = 0.02;
    double peak = 0.0;  // log-ratio at the center
  };

  explicit AnalyticLogRatio(std::vector<Bump> bumps, Vec4 orientation_mu = Vec4::Zero(),
                            double orientation_kappa = 0.0);

  double value(const ProductPoint& h) const override;
  Evaluation evaluate(const ProductPoint& h) const override;

 private:
  std::vector<Bump> bumps_;
  Vec4 mu_;
  double kappa_;
};

/// Constant log-ratio, as produced by a zero-weight ensemble.
class ConstantLogRatio final : public LogRatioModel {
 public:
  explicit ConstantLogRatio(double value = 0.0) : value_(value) {}
  double value(const ProductPoint&) const override { return value_; }
  Evaluation evaluate(const ProductPoint&) const override { return {value_, {}}; }

 private:
  double value_;
};

enum class PosteriorMode { Map, Mle };
const char* to_string(PosteriorMode mode);
PosteriorMode parse_mode(const std::string& s);

using CollisionFn = std::function<bool(const ProductPoint&)>;

struct PosteriorModel {
  std::shared_ptr<const LogRatioModel> ratio;
  HandPrior prior;
  PoseFeature4D pose;
  TsdfGrid voxel_grid;
  TsdfGrid collision_grid;  // may be empty
  /// Overrides the voxel check on collision_grid when set.
  CollisionFn collision;

  bool collides(const ProductPoint& h) const;
};

/// Builds the model for one observation: ensemble ratio on the network grid,
/// hand prior around the observed AABB, gripper check on the fine grid.
PosteriorModel make_posterior(const ProjectConfig& config, const RatioEnsemble& ensemble,
                              const TsdfGrid& voxel_grid, const TsdfGrid& collision_grid,
                              const PoseFeature4D& pose, const Aabb& aabb);

struct ObjectiveTerms {
  double ratio_term = 0.0;  // -log r
  double prior_term = 0.0;  // -log p(h | V); zero in MLE mode
  double total = 0.0;
};

/// +inf outside the position box in either mode; the ratio was never trained
/// there.
ObjectiveTerms objective_terms(const PosteriorModel& m, const ProductPoint& h, PosteriorMode mode);
double neg_log_posterior(const PosteriorModel& m, const ProductPoint& h, PosteriorMode mode);

struct ObjectiveGradient {
  HandGradient gradient;  // Euclidean, before projection
  bool on_boundary = false;
};

ObjectiveGradient objective_grad(const PosteriorModel& m, const ProductPoint& h, PosteriorMode mode);

struct OptimizationReport {
  PosteriorMode mode = PosteriorMode::Map;
  ProductPoint best;
  double best_objective = 0.0;
  ObjectiveTerms best_terms;
  std::vector<double> trace;        // objective of every iterate, n_steps + 1
  std::vector<ProductPoint> path;   // the iterates themselves
  int best_step = 0;
  int n_starts = 0;
  int n_steps = 0;
  int retries_used = 0;
  bool collision = false;
  bool infeasible = false;
};

/// Best of n_init prior samples by the active objective, then n_steps
/// Riemannian steps. The position step is taken in the box-normalized
/// coordinates the network sees; positions are clamped to the box and the
/// best iterate is returned. Throws ErrorKind::DegeneratePosterior when no
/// initial sample has a finite objective.
OptimizationReport optimize(const PosteriorModel& m, PosteriorMode mode, Rng& rng,
                            const OptimizerConfig& config);

/// Re-runs optimize with fresh samples while the result collides, at most
/// config.max_retries times.
OptimizationReport plan_with_retry(const PosteriorModel& m, PosteriorMode mode, Rng& rng,
                                   const OptimizerConfig& config);

/// One "report" record followed by one "step" record per iterate.
void write_report(std::ostream& os, const OptimizationReport& r);

}  // namespace gsbi
