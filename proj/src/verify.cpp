#include "gsbi/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <numbers>
#include <ostream>
#include <sstream>

#include "gsbi/dataset.hpp"
#include "gsbi/error.hpp"
#include "gsbi/manifold.hpp"
#include "gsbi/oracle.hpp"
#include "gsbi/pipeline.hpp"
#include "gsbi/posterior.hpp"
#include "gsbi/ratio_net.hpp"
#include "gsbi/tsdf.hpp"

namespace gsbi {
namespace fs = std::filesystem;

void CheckResult::measure(const std::string& what, double value, double tolerance, bool upper_bound) {
  Measurement m{what, value, tolerance, upper_bound, false};
  m.passed = std::isfinite(value) && (upper_bound ? value <= tolerance : value >= tolerance);
  measurements.push_back(m);
}

void CheckResult::finish() {
  passed = !measurements.empty() &&
           std::all_of(measurements.begin(), measurements.end(), [](const Measurement& m) { return m.passed; });
}

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Vec4 random_unit(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return Vec4(n(rng), n(rng), n(rng), n(rng)).normalized();
}

void note(const VerifyOptions& o, const std::string& s) {
  if (o.log) *o.log << s << '\n' << std::flush;
}

std::string read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Io, "cannot read " + path);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

TsdfGrid random_grid(int n, Rng& rng) {
  TsdfGrid g(n, 0.3, Vec3(-0.15, -0.15, 0.0));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : g.mutable_values()) v = u(rng);
  for (auto& w : g.mutable_weights()) w = 1.0;
  return g;
}

RatioEnsemble random_ensemble(const NetworkConfig& cfg, Rng& rng) {
  RatioEnsemble e;
  for (int i = 0; i < kEnsembleSize; ++i) e.members.push_back(init_classifier(cfg, rng, false));
  return e;
}

// Semicircle law for one coordinate of a uniform point on S^3.
double uniform_s3_coordinate_cdf(double x) {
  x = std::clamp(x, -1.0, 1.0);
  return 0.5 + (x * std::sqrt(1.0 - x * x) + std::asin(x)) / std::numbers::pi;
}

double ks_statistic(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = uniform_s3_coordinate_cdf(xs[i]);
    d = std::max({d, std::abs(f - static_cast<double>(i) / n), std::abs(static_cast<double>(i + 1) / n - f)});
  }
  return d;
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

}  // namespace

CheckResult check_manifold(std::uint64_t seed) {
  const auto t0 = Clock::now();
  CheckResult r;
  r.criterion = 1;
  r.name = "manifold suite";
  Rng rng = make_rng(seed, Stream::Verification, 1);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> scale(0.0, 3.0);
  double ortho = 0.0, norm = 0.0, identity = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const UnitQuaternion q = UnitQuaternion::from_unit(random_unit(rng));
    const Vec4 v = scale(rng) * Vec4(n(rng), n(rng), n(rng), n(rng));
    const Vec4 t = project_to_tangent(q, v);
    ortho = std::max(ortho, std::abs(t.dot(q.coeffs())) / std::max(1.0, v.norm()));
    norm = std::max(norm, std::abs(exp_map(q, t).coeffs().norm() - 1.0));
    const ProductPoint p{Vec3(n(rng), n(rng), n(rng)), q};
    const ProductPoint s = riemannian_step(p, HandGradient{}, StepSizes{});
    identity = std::max({identity, (s.position - p.position).norm(),
                         (s.orientation.coeffs() - p.orientation.coeffs()).norm()});
  }
  r.measure("projection orthogonality", ortho, 1e-9);
  r.measure("exp-map norm deviation", norm, 1e-12);
  r.measure("zero-gradient step deviation", identity, 0.0);
  r.seconds = since(t0);
  r.measure("runtime s", r.seconds, 10.0);
  r.detail = "1e5 random (q, v)";
  r.finish();
  return r;
}

CheckResult check_power_spherical(std::uint64_t seed, const PsGradientFn& grad) {
  const auto t0 = Clock::now();
  CheckResult r;
  r.criterion = 2;
  r.name = "power-spherical suite";
  Rng rng = make_rng(seed, Stream::Verification, 2);

  const Vec4 mu = random_unit(rng);
  double worst_mass = 0.0;
  for (double kappa : {0.0, 1.0, 8.0}) {
    const PowerSpherical d(mu, kappa);
    double acc = 0.0;
    const int samples = 2000000;
    for (int i = 0; i < samples; ++i) acc += std::exp(ps_log_density(random_unit(rng), d));
    const double mass = acc / samples * 2.0 * std::numbers::pi * std::numbers::pi;
    worst_mass = std::max(worst_mass, std::abs(mass - 1.0));
  }
  r.measure("MC normalization error (kappa 0, 1, 8)", worst_mass, 0.01);

  {
    const PowerSpherical d(mu, 8.0);
    const double h = 1e-6;
    double worst = 0.0;
    int checked = 0;
    while (checked < 100) {
      const Vec4 q = random_unit(rng);
      if (1.0 + mu.dot(q) < 0.05) continue;
      const Vec4 g = grad(q, d);
      Vec4 fd;
      for (int k = 0; k < 4; ++k) {
        Vec4 e = Vec4::Zero();
        e[k] = h;
        fd[k] = (d.kappa * std::log(1.0 + mu.dot(q + e)) - d.kappa * std::log(1.0 + mu.dot(q - e))) / (2 * h);
      }
      worst = std::max(worst, (fd - g).norm() / std::max(fd.norm(), 1e-12));
      ++checked;
    }
    r.measure("log-density gradient vs FD, relative", worst, 1e-5);
  }

  {
    const OrientationPrior prior = build_orientation_prior(8.0);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const Vec4 q = random_unit(rng);
      worst = std::max(worst, std::abs(mixture_log_density(q, prior) - mixture_log_density(-q, prior)));
    }
    r.measure("antipodal mixture symmetry", worst, 1e-9);
  }

  {
    // Mean of mu^T q is 2a/(a+b) - 1 for the Beta(a, b) marginal, a = 1.5 + kappa, b = 1.5.
    const double kappa = 8.0, a = 1.5 + kappa, b = 1.5;
    const PowerSpherical d(mu, kappa);
    const int samples = 100000;
    double sum = 0.0;
    Vec4 mean = Vec4::Zero();
    for (int i = 0; i < samples; ++i) {
      const Vec4 s = ps_sample(rng, d);
      sum += mu.dot(s);
      mean += s;
    }
    const double expected = 2.0 * a / (a + b) - 1.0;
    const double sd = std::sqrt(4.0 * a * b / ((a + b) * (a + b) * (a + b + 1.0)));
    const double z = std::abs(sum / samples - expected) / (sd / std::sqrt(static_cast<double>(samples)));
    r.measure("sampler mean-direction z (alpha 0.01)", z, 2.5758);
    r.measure("sampler mean direction cosine", mu.dot(mean.normalized()), 0.99, false);

    // One KS test on the projection onto a fixed axis, which follows the
    // semicircle law under the uniform distribution on S^3.
    const PowerSpherical uniform(mu, 0.0);
    const Vec4 axis = random_unit(rng);
    const int m = 20000;
    std::vector<double> proj;
    for (int i = 0; i < m; ++i) proj.push_back(axis.dot(ps_sample(rng, uniform)));
    const double ks = ks_statistic(std::move(proj));
    r.measure("uniform-case KS statistic (alpha 0.01)", ks, 1.628 / std::sqrt(static_cast<double>(m)));
  }
  r.seconds = since(t0);
  r.measure("runtime s", r.seconds, 60.0);
  r.finish();
  return r;
}

CheckResult check_tsdf_sphere() {
  const auto t0 = Clock::now();
  CheckResult r;
  r.criterion = 3;
  r.name = "TSDF sphere oracle";
  const int n = 40;
  const double l = 0.3, trunc = 4.0;
  Primitive s;
  s.kind = ShapeKind::Sphere;
  s.dims = Vec3::Constant(0.05);
  s.center = Vec3(0.003, -0.002, 0.15);
  const Scene scene{{s}};
  CameraParams cp;
  cp.width = 320;
  cp.height = 240;
  const auto views = camera_trajectory(6, l, cp);
  std::vector<DepthImage> images;
  for (const auto& v : views) images.push_back(render_depth(scene, v));
  const TsdfGrid g = fuse(images, views, n, l, trunc);

  // Well observed: seen by every view, and every view meets the analytic
  // surface at no more than 60 degrees incidence along the voxel ray.
  const double delta = trunc * g.voxel_size();
  double worst = 0.0;
  int count = 0;
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        const auto idx = g.index(i, j, k);
        if (g.weight(idx) < static_cast<double>(views.size())) continue;
        const Vec3 x = g.voxel_center(i, j, k);
        const double sdf = (x - s.center).norm() - s.dims.x();
        if (std::abs(sdf) >= delta) continue;
        bool head_on = true;
        for (const auto& v : views) {
          const Vec3 eye = v.world_from_camera.translation();
          const Vec3 d = (x - eye).normalized();
          const double t = intersect(s, eye, d);
          if (!std::isfinite(t)) {
            head_on = false;
            break;
          }
          const Vec3 normal = (eye + t * d - s.center).normalized();
          if (std::acos(std::clamp(-normal.dot(d), -1.0, 1.0)) > std::numbers::pi / 3.0) head_on = false;
        }
        if (!head_on) continue;
        worst = std::max(worst, std::abs(g.value(idx) - sdf / delta));
        ++count;
      }
  r.measure("max scaled error, well-observed band voxels", worst, 1.0 / trunc);
  r.measure("well-observed voxels", count, 1.0, false);

  double perm = 0.0;
  for (const std::vector<int>& order : {std::vector<int>{5, 4, 3, 2, 1, 0}, std::vector<int>{2, 5, 0, 3, 1, 4}}) {
    std::vector<DepthImage> im;
    std::vector<CameraView> vs;
    for (int o : order) {
      im.push_back(images[o]);
      vs.push_back(views[o]);
    }
    const TsdfGrid g2 = fuse(im, vs, n, l, trunc);
    for (std::size_t idx = 0; idx < g.voxel_count(); ++idx) perm = std::max(perm, std::abs(g2.value(idx) - g.value(idx)));
  }
  r.measure("view-order permutation difference", perm, 1e-9);
  r.seconds = since(t0);
  r.measure("runtime s", r.seconds, 30.0);
  r.detail = "1 voxel = " + fixed(1.0 / trunc, 2) + " in scaled units";
  r.finish();
  return r;
}

CheckResult check_ratio_gradient(std::uint64_t seed) {
  const auto t0 = Clock::now();
  CheckResult r;
  r.criterion = 4;
  r.name = "ratio-network gradient check";
  Rng rng = make_rng(seed, Stream::Verification, 4);
  const NetworkConfig cfg = desk_config().net;
  const RatioEnsemble ens = random_ensemble(cfg, rng);
  const TsdfGrid grid = random_grid(cfg.grid_n, rng);
  PoseFeature4D pose;
  pose.centroid = Vec3(0.01, -0.02, 0.08);
  pose.yaw = 0.3;
  const PositionPrior box(Vec3(-0.04, -0.05, 0.05), Vec3(0.05, 0.03, 0.12));
  const ObservationRatio ratio(ens, grid, pose, box);
  std::uniform_real_distribution<double> u(-0.95, 0.95);
  const double h = 1e-5;
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Vec3 x = box_bijection(Vec3(u(rng), u(rng), u(rng)), box);
    const Vec4 q = random_unit(rng);
    const bool success = i % 2 == 0;
    const auto g = ratio.grad_wrt_hand(success, x, q);
    Eigen::Matrix<double, 7, 1> an, fd;
    for (int k = 0; k < 7; ++k) {
      Vec3 xp = x, xm = x;
      Vec4 qp = q, qm = q;
      if (k < 3) {
        xp[k] += h;
        xm[k] -= h;
        an[k] = g.gradient.position[k];
      } else {
        qp[k - 3] += h;
        qm[k - 3] -= h;
        an[k] = g.gradient.orientation[k - 3];
      }
      fd[k] = (ratio.log_ratio(success, xp, qp) - ratio.log_ratio(success, xm, qm)) / (2 * h);
    }
    worst = std::max(worst, (an - fd).norm() / std::max(fd.norm(), 1e-8));
  }
  r.measure("grad_wrt_hand vs central FD, relative", worst, 1e-4);
  r.seconds = since(t0);
  r.measure("runtime s", r.seconds, 60.0);
  r.detail = "100 points, random weights, 4 members";
  r.finish();
  return r;
}

CheckResult check_tractable_oracle(const ProjectConfig& config, const TractableOptions& t,
                                   const VerifyOptions& o) {
  const auto t0 = Clock::now();
  CheckResult r;
  r.criterion = 5;
  r.name = "tractable-task oracle";
  ProjectConfig cfg = config;
  cfg.seed = o.seed;
  cfg.validate();
  note(o, "criterion 5: generating " + std::to_string(t.episodes) + " episodes");
  GenerateStats stats;
  std::vector<EpisodeRecord> data = generate_episodes(cfg, cfg.seed, 0, t.episodes, o.threads, &stats);
  note(o, "criterion 5: training (" + fixed(since(t0), 1) + " s)");
  TrainSummary summary;
  const RatioEnsemble ensemble = train_ensemble(cfg, data, o.threads, &summary, o.log);
  double best_val = 0.0;
  for (double v : summary.best_validation) best_val += v / static_cast<double>(summary.best_validation.size());

  // Ratio error on joint tuples of unseen episodes.
  note(o, "criterion 5: evaluating (" + fixed(since(t0), 1) + " s)");
  const auto heldout = generate_episodes(cfg, cfg.seed, std::uint64_t{1} << 32, t.heldout_episodes, o.threads);
  double abs_sum = 0.0, optimal_abs = 0.0;
  std::size_t tuples = 0;
  for (const auto& ep : heldout) {
    const HandPrior prior = hand_prior(cfg, ep.aabb);
    const ObservationRatio ratio(ensemble, episode_grid(ep), ep.pose, prior.position);
    Rng er = make_rng(cfg.seed, Stream::Verification, 500 + ep.id);
    const double evidence = evidence_success_probability(cfg, ep.latents, prior, er, t.evidence_samples);
    for (const auto& g : ep.grasps) {
      const double p = marginal_success_probability(cfg, g.hand, ep.latents);
      const double truth = true_log_ratio(g.success, p, evidence);
      abs_sum += std::abs(ratio.log_ratio(g.success, g.hand) - truth);
      optimal_abs += std::abs(truth);
      ++tuples;
    }
  }
  const double mean_abs = abs_sum / static_cast<double>(tuples);
  r.measure("mean |log r_hat - log r_true| nats", mean_abs, 0.2);

  // Reliability on a balanced joint / marginal set.
  const auto calib = generate_episodes(cfg, cfg.seed, (std::uint64_t{1} << 32) + 1000000, t.calibration_episodes, o.threads);
  std::vector<double> predicted;
  std::vector<int> labels;
  Rng perm_rng = make_rng(cfg.seed, Stream::Verification, 5);
  for (const auto& ep : calib) {
    const HandPrior prior = hand_prior(cfg, ep.aabb);
    const ObservationRatio ratio(ensemble, episode_grid(ep), ep.pose, prior.position);
    const auto perm = derangement(ep.grasps.size(), perm_rng);
    for (std::size_t i = 0; i < ep.grasps.size(); ++i) {
      const bool s = ep.grasps[i].success;
      predicted.push_back(sigmoid(ratio.log_ratio(s, ep.grasps[i].hand)));
      labels.push_back(1);
      predicted.push_back(sigmoid(ratio.log_ratio(s, ep.grasps[perm[i]].hand)));
      labels.push_back(0);
    }
  }
  const auto bins = reliability_bins(predicted, labels, 10);
  double worst_bin = 0.0;
  std::ostringstream bin_text;
  for (const auto& b : bins) {
    worst_bin = std::max(worst_bin, std::abs(b.observed - b.mean_predicted));
    bin_text << " " << fixed(b.mean_predicted, 3) << "/" << fixed(b.observed, 3);
  }
  r.measure("worst decile |observed - predicted|", worst_bin, 0.05);

  // Label-shuffled control: S independent of h, so joint and marginal tuples
  // are exchangeable and the best loss is log 2.
  note(o, "criterion 5: shuffled control (" + fixed(since(t0), 1) + " s)");
  data.resize(std::min<std::size_t>(data.size(), static_cast<std::size_t>(t.shuffled_episodes)));
  {
    std::vector<bool> s;
    for (const auto& ep : data)
      for (const auto& g : ep.grasps) s.push_back(g.success);
    Rng shuffle = make_rng(cfg.seed, Stream::Verification, 6);
    std::shuffle(s.begin(), s.end(), shuffle);
    std::size_t k = 0;
    for (auto& ep : data)
      for (auto& g : ep.grasps) g.success = s[k++];
  }
  TrainConfig tc = cfg.train;
  tc.members = 1;
  tc.epochs = t.shuffled_epochs;
  tc.threads = o.threads;
  const TrainResult control = train(data, cfg.net, tc, cfg.seed ^ 0x5bd1e995ULL);
  const double final_val = control.log.back().validation_loss;
  r.measure("shuffled control |val loss - log 2|", std::abs(final_val - std::log(2.0)), 0.02);
  data.clear();
  data.shrink_to_fit();

  r.seconds = since(t0);
  r.measure("runtime s", r.seconds, 1800.0);
  std::ostringstream d;
  d << t.episodes << " episodes x " << cfg.grasps_per_episode << " grasps, " << tuples
    << " held-out tuples (mean |log r_true| " << fixed(optimal_abs / static_cast<double>(tuples), 3)
    << "), evidence from " << t.evidence_samples << " samples; mean best validation loss "
    << fixed(best_val) << "; shuffled val loss " << fixed(final_val) << "; deciles pred/obs" << bin_text.str();
  r.detail = d.str();
  r.finish();
  return r;
}

CheckResult check_map_optimizer(std::uint64_t seed) {
  const auto t0 = Clock::now();
  CheckResult r;
  r.criterion = 6;
  r.name = "MAP optimizer oracle";
  const OptimizerConfig cfg;  // 1000 starts, 300 steps, 0.005 / 0.008
  double worst_pos = 0.0, worst_rot = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Rng setup = make_rng(seed, Stream::Verification, 600 + trial);
    std::uniform_real_distribution<double> u(-0.03, 0.03);
    const Vec3 target(u(setup), u(setup), 0.1 + u(setup));
    const Vec4 mode = random_unit(setup);
    PosteriorModel m;
    m.prior.position = PositionPrior(Vec3(-0.05, -0.05, 0.05), Vec3(0.05, 0.05, 0.15));
    m.prior.orientation = make_orientation_prior({mode}, 8.0);
    m.ratio = std::make_shared<AnalyticLogRatio>(std::vector<AnalyticLogRatio::Bump>{{target, 0.02, 0.0}});
    Rng rng = make_rng(seed, Stream::Verification, 700 + trial);
    const OptimizationReport rep = optimize(m, PosteriorMode::Map, rng, cfg);
    worst_pos = std::max(worst_pos, (rep.best.position - target).norm());
    worst_rot = std::max(worst_rot, geodesic_distance(rep.best.orientation, UnitQuaternion::from_unit(mode)));
  }
  r.measure("position error m", worst_pos, 2e-3);
  r.measure("geodesic orientation error rad", worst_rot, 0.05);
  r.seconds = since(t0);
  r.measure("runtime s", r.seconds, 300.0);
  r.detail = "20 posteriors: Gaussian position bump (sigma 2 cm) x single PS mode (kappa 8)";
  r.finish();
  return r;
}

CheckResult check_benchmark(const ProjectConfig& config, const BenchmarkOptions& b, const VerifyOptions& o) {
  const auto t0 = Clock::now();
  CheckResult r;
  r.criterion = 7;
  r.name = "end-to-end desk benchmark";
  ProjectConfig cfg = config;
  cfg.seed = o.seed;
  cfg.validate();
  note(o, "criterion 7: generating " + std::to_string(b.episodes) + " episodes");
  RatioEnsemble ensemble;
  {
    const auto data = generate_episodes(cfg, cfg.seed, 0, b.episodes, o.threads);
    note(o, "criterion 7: training (" + fixed(since(t0), 1) + " s)");
    ensemble = train_ensemble(cfg, data, o.threads, nullptr, o.log);
  }
  note(o, "criterion 7: benchmark (" + fixed(since(t0), 1) + " s)");
  const BenchmarkReport rep = cmd_benchmark(cfg, ensemble, b.rounds, o.threads, o.log);
  r.measure("MAP rate - prior baseline rate", rep.map.rate() - rep.baseline.rate(), 0.20, false);
  r.measure("MAP rate - MLE rate", rep.map.rate() - rep.mle.rate(), -0.03, false);

  // Replay a prefix of the rounds and compare outcomes exactly.
  const std::size_t replay = std::min<std::size_t>(10, b.rounds);
  const BenchmarkReport again = cmd_benchmark(cfg, ensemble, replay, o.threads);
  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < replay; ++i) {
    for (int k = 0; k < 3; ++k) {
      if (again.rounds[i].success[k] != rep.rounds[i].success[k] ||
          again.rounds[i].probability[k] != rep.rounds[i].probability[k]) {
        ++mismatches;
      }
    }
  }
  r.measure("replayed-round mismatches", static_cast<double>(mismatches), 0.0);
  r.seconds = since(t0);
  r.measure("runtime s", r.seconds, 1800.0);
  std::ostringstream d;
  for (const MethodStats* s : {&rep.map, &rep.mle, &rep.baseline}) {
    const Interval w = s->wilson();
    d << s->name << " " << s->successes << "/" << s->rounds << " = " << fixed(s->rate(), 3) << " [" << fixed(w.low, 3)
      << ", " << fixed(w.high, 3) << "] (collision " << s->collision_infeasible << ", slip " << s->grasp_slip << "); ";
  }
  d << "MAP prior log-density >= MLE in " << fixed(rep.map_prior_dominates, 3) << " of rounds; "
    << b.episodes << " training episodes";
  r.detail = d.str();
  r.finish();
  return r;
}

CheckResult check_ensemble_identity(std::uint64_t seed) {
  const auto t0 = Clock::now();
  CheckResult r;
  r.criterion = 8;
  r.name = "ensemble identity";
  Rng rng = make_rng(seed, Stream::Verification, 8);
  const NetworkConfig cfg = desk_config().net;
  const ClassifierParams member = init_classifier(cfg, rng, false);
  RatioEnsemble ens;
  ens.members.assign(kEnsembleSize, member);
  const TsdfGrid grid = random_grid(cfg.grid_n, rng);
  PoseFeature4D pose;
  const PositionPrior box(Vec3(-0.05, -0.05, 0.05), Vec3(0.05, 0.05, 0.12));
  const ObservationRatio ratio(ens, grid, pose, box);
  HandPrior prior;
  prior.position = box;
  prior.orientation = build_orientation_prior(8.0);
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const ProductPoint h = prior_sample(rng, prior);
    const bool s = i % 2 == 1;
    worst = std::max(worst, std::abs(ratio.log_ratio(s, h) - ratio.member_log_ratio(0, s, h)));
  }
  r.measure("4 identical members vs member", worst, 0.0);
  const double values[] = {0.0, 0.0, 0.0, std::log(3.0)};
  r.measure("log-mean-exp {0,0,0,log 3} - log 1.5", std::abs(log_mean_exp(values) - std::log(1.5)), 1e-12);
  r.seconds = since(t0);
  r.finish();
  return r;
}

CheckResult check_determinism(const VerifyOptions& o) {
  const auto t0 = Clock::now();
  CheckResult r;
  r.criterion = 9;
  r.name = "determinism";
  ProjectConfig cfg = desk_config();
  cfg.seed = o.seed;
  cfg.episodes = 24;
  cfg.grasps_per_episode = 6;
  cfg.train.epochs = 2;
  const fs::path root = o.work_dir.empty() ? fs::temp_directory_path() / ("gsbi-verify-" + std::to_string(o.seed))
                                           : fs::path(o.work_dir);
  std::string bytes[2][3];
  for (int run = 0; run < 2; ++run) {
    const fs::path dir = root / ("run" + std::to_string(run));
    fs::create_directories(dir);
    const std::string data = (dir / "episodes.gsbi").string();
    const std::string weights = (dir / "ensemble.gsbw").string();
    cmd_generate(cfg, data, o.threads);
    cmd_train(cfg, data, weights, o.threads);
    bytes[run][0] = read_bytes(data);
    bytes[run][1] = read_bytes(weights);
    bytes[run][2] = read_bytes(weights + ".log");
  }
  const char* names[] = {"dataset", "weights", "training log"};
  for (int k = 0; k < 3; ++k) {
    r.measure(std::string(names[k]) + " byte differences",
              bytes[0][k] == bytes[1][k] && !bytes[0][k].empty() ? 0.0 : 1.0, 0.0);
  }
  std::error_code ec;
  if (o.work_dir.empty()) fs::remove_all(root, ec);
  r.seconds = since(t0);
  r.detail = "generate + train twice at seed " + std::to_string(o.seed) + " (" + std::to_string(bytes[0][0].size()) +
             " dataset bytes, " + std::to_string(bytes[0][1].size()) + " weight bytes)";
  r.finish();
  return r;
}

CheckResult check_gradient_mutation(std::uint64_t seed) {
  const auto t0 = Clock::now();
  CheckResult r;
  r.criterion = 2;
  r.name = "gradient mutation sanity";
  const CheckResult mutated =
      check_power_spherical(seed, [](const Vec4& q, const PowerSpherical& d) { return -ps_log_density_grad(q, d); });
  double fd_error = 0.0;
  for (const auto& m : mutated.measurements)
    if (m.name.starts_with("log-density gradient")) fd_error = m.value;
  r.measure("sign-flipped gradient FD error", fd_error, 1e-5, false);
  r.measure("mutated suite passes", mutated.passed ? 1.0 : 0.0, 0.0);
  r.seconds = since(t0);
  r.finish();
  return r;
}

std::vector<CheckResult> run_verification(const VerifyOptions& o) {
  std::vector<CheckResult> out;
  auto emit = [&](CheckResult r) {
    out.push_back(std::move(r));
    if (o.log) write_check(*o.log, out.back());
  };
  auto skip = [&](int criterion, const char* name) {
    CheckResult r;
    r.criterion = criterion;
    r.name = name;
    r.skipped = true;
    r.detail = "needs --full";
    emit(r);
  };
  emit(check_manifold(o.seed));
  emit(check_power_spherical(o.seed));
  emit(check_gradient_mutation(o.seed));
  emit(check_tsdf_sphere());
  emit(check_ratio_gradient(o.seed));
  if (o.full) {
    emit(check_tractable_oracle(tractable_config(), TractableOptions{}, o));
  } else {
    skip(5, "tractable-task oracle");
  }
  emit(check_map_optimizer(o.seed));
  if (o.full) {
    emit(check_benchmark(desk_config(), BenchmarkOptions{}, o));
  } else {
    skip(7, "end-to-end desk benchmark");
  }
  emit(check_ensemble_identity(o.seed));
  if (o.full) {
    emit(check_determinism(o));
  } else {
    skip(9, "determinism");
  }
  return out;
}

bool all_passed(const std::vector<CheckResult>& results) {
  return std::all_of(results.begin(), results.end(), [](const CheckResult& r) { return r.skipped || r.passed; });
}

void write_check(std::ostream& os, const CheckResult& r) {
  os << (r.skipped ? "SKIP" : r.passed ? "PASS" : "FAIL") << " criterion " << r.criterion << " " << r.name << ":";
  for (std::size_t i = 0; i < r.measurements.size(); ++i) {
    const Measurement& m = r.measurements[i];
    os << (i ? "," : "") << " " << m.name << " " << std::setprecision(4) << m.value
       << (m.upper_bound ? " <= " : " >= ") << m.tolerance << (m.passed ? "" : " (failed)");
  }
  os << " [" << std::fixed << std::setprecision(1) << r.seconds << " s]" << std::defaultfloat;
  if (!r.detail.empty()) os << " -- " << r.detail;
  os << '\n';
}

}  // namespace gsbi
