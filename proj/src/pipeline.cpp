#include "gsbi/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numbers>
#include <ostream>
#include <sstream>
#include <thread>

#include "gsbi/error.hpp"

namespace gsbi {
namespace {

constexpr std::size_t kGenerateChunk = 32;
constexpr std::uint64_t kOutcomeOffset = std::uint64_t{1} << 48;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_number(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used == value.size() && std::isfinite(v)) return v;
  } catch (const std::exception&) {
  }
  fail(ErrorKind::InvalidInput, "scene spec: bad number for " + key + ": '" + value + "'");
}

std::uint64_t outcome_index(std::uint64_t round) { return kOutcomeOffset + round; }

// Workers pull indices in order; results land in their own slot.
template <typename F>
void parallel_for(std::size_t count, int threads, F&& body) {
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        body(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int n = std::clamp(threads, 1, static_cast<int>(std::max<std::size_t>(count, 1)));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

GenerateSummary cmd_generate(const ProjectConfig& config, const std::string& out_path, int threads,
                             std::ostream* log) {
  config.validate();
  GenerateSummary summary;
  summary.config_hash = data_config_hash(config);
  const std::size_t total = static_cast<std::size_t>(config.episodes);
  DatasetWriter writer(out_path, summary.config_hash, total);
  for (std::size_t first = 0; first < total; first += kGenerateChunk) {
    const std::size_t count = std::min(kGenerateChunk, total - first);
    const auto chunk = generate_episodes(config, config.seed, first, count, threads, &summary.stats);
    for (const auto& e : chunk) writer.append(e);
    if (log) *log << "generate: " << first + count << "/" << total << " episodes\n" << std::flush;
  }
  writer.finish();
  const GenerateStats& s = summary.stats;
  summary.balance_sigma = s.grasps ? std::sqrt(s.bernoulli_variance) / static_cast<double>(s.grasps) : 0.0;
  summary.balance_ok = std::abs(s.observed_rate() - s.expected_rate()) <= 3.0 * summary.balance_sigma + 1e-12;
  if (log) {
    *log << std::fixed << std::setprecision(4) << "generate: " << s.grasps << " grasps, success rate "
         << s.observed_rate() << " (expected " << s.expected_rate() << " +- " << 3.0 * summary.balance_sigma
         << " at 3 sigma, " << (summary.balance_ok ? "ok" : "OUTSIDE") << "), " << s.redraws
         << " empty scenes redrawn\n" << std::defaultfloat;
  }
  return summary;
}

RatioEnsemble train_ensemble(const ProjectConfig& config, std::span<const EpisodeRecord> episodes,
                             int threads, TrainSummary* summary, std::ostream* log) {
  TrainConfig tc = config.train;
  tc.threads = threads;
  std::mutex mutex;
  const TrainResult r = train(episodes, config.net, tc, config.seed, [&](const EpochLog& e) {
    if (!log) return;
    std::lock_guard<std::mutex> lock(mutex);
    *log << "train: member " << e.member << " epoch " << e.epoch << " loss " << e.train_loss
         << " validation " << e.validation_loss << '\n' << std::flush;
  });
  if (summary) {
    summary->log = r.log;
    summary->train_scenes = r.train_scenes;
    summary->validation_scenes = r.validation_scenes;
    summary->skipped_scenes = r.skipped_scenes;
    summary->best_validation.assign(r.members.size(), std::numeric_limits<double>::infinity());
    for (const EpochLog& e : r.log) {
      double& b = summary->best_validation[static_cast<std::size_t>(e.member)];
      b = std::min(b, e.validation_loss);
    }
  }
  RatioEnsemble ensemble;
  ensemble.members = r.members;
  return ensemble;
}

TrainSummary cmd_train(const ProjectConfig& config, const std::string& dataset_path,
                       const std::string& out_weights, int threads, std::ostream* log) {
  config.validate();
  const auto episodes = load_dataset(dataset_path, data_config_hash(config));
  TrainSummary summary;
  const RatioEnsemble ensemble = train_ensemble(config, episodes, threads, &summary, log);
  save_ensemble(out_weights, ensemble);
  summary.log_path = out_weights + ".log";
  std::ofstream os(summary.log_path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot write " + summary.log_path);
  os << "member\tepoch\ttrain_loss\tvalidation_loss\n" << std::setprecision(9);
  for (const EpochLog& e : summary.log) {
    os << e.member << '\t' << e.epoch << '\t' << e.train_loss << '\t' << e.validation_loss << '\n';
  }
  if (!os.flush()) fail(ErrorKind::Io, "failed writing " + summary.log_path);
  return summary;
}

LatentState parse_scene_spec(const std::string& text) {
  LatentState z;
  z.shape.kind = ShapeKind::Box;
  z.shape.dims = Vec3(0.025, 0.02, 0.03);
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorKind::InvalidInput, "scene spec line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "shape") {
      if (value == "box") z.shape.kind = ShapeKind::Box;
      else if (value == "cylinder") z.shape.kind = ShapeKind::Cylinder;
      else if (value == "sphere") z.shape.kind = ShapeKind::Sphere;
      else fail(ErrorKind::InvalidInput, "scene spec: unknown shape '" + value + "'");
    } else if (key == "dims") {
      std::istringstream parts(value);
      std::string item;
      int i = 0;
      while (std::getline(parts, item, ',')) {
        if (i >= 3) fail(ErrorKind::InvalidInput, "scene spec: dims takes three values");
        z.shape.dims[i++] = parse_number(key, trim(item));
      }
      if (i != 3) fail(ErrorKind::InvalidInput, "scene spec: dims takes three values");
    } else if (key == "object_x") {
      z.object_x = parse_number(key, value);
    } else if (key == "object_y") {
      z.object_y = parse_number(key, value);
    } else if (key == "object_yaw_deg") {
      z.object_yaw = parse_number(key, value) * std::numbers::pi / 180.0;
    } else if (key == "table_x") {
      z.table_x = parse_number(key, value);
    } else if (key == "table_y") {
      z.table_y = parse_number(key, value);
    } else if (key == "table_yaw_deg") {
      z.table_yaw_deg = parse_number(key, value);
    } else if (key == "friction") {
      z.friction = parse_number(key, value);
    } else if (key == "torque") {
      z.finger_torque = parse_number(key, value);
    } else if (key == "noise_seed") {
      z.noise_seed = static_cast<std::uint64_t>(parse_number(key, value));
    } else {
      fail(ErrorKind::InvalidInput, "scene spec line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
  }
  if (z.shape.kind == ShapeKind::Cylinder) z.shape.dims.y() = z.shape.dims.x();
  if (z.shape.kind == ShapeKind::Sphere) z.shape.dims = Vec3::Constant(z.shape.dims.x());
  if (!(z.shape.dims.array() > 0.0).all()) fail(ErrorKind::InvalidInput, "scene spec: dims must be positive");
  return z;
}

namespace {

InferResult infer_observed(const ProjectConfig& config, const RatioEnsemble& ensemble,
                           const LatentState& z, const Observation& obs, PosteriorMode mode,
                           std::uint64_t request_index) {
  const PosteriorModel model =
      make_posterior(config, ensemble, obs.grid, obs.collision_grid, obs.pose, obs.aabb);
  Rng rng = make_rng(config.seed, Stream::Inference, 2 * request_index + (mode == PosteriorMode::Mle ? 1 : 0));
  InferResult r;
  r.latents = z;
  r.report = plan_with_retry(model, mode, rng, config.optimizer);
  r.success_probability = analytic_success_prob(r.report.best, z, config.world, config.surrogate);
  return r;
}

}  // namespace

InferResult cmd_infer(const ProjectConfig& config, const RatioEnsemble& ensemble,
                      const LatentState& scene, PosteriorMode mode, std::uint64_t request_index) {
  config.validate();
  const Observation obs = observe(config, scene, true);
  return infer_observed(config, ensemble, scene, obs, mode, request_index);
}

InferResult cmd_infer_episode(const ProjectConfig& config, const RatioEnsemble& ensemble,
                              std::uint64_t episode, PosteriorMode mode) {
  config.validate();
  const SceneDraw d = draw_scene(config, config.seed, Stream::Latents, episode, true);
  return infer_observed(config, ensemble, d.latents, d.observation, mode, episode);
}

void write_infer(std::ostream& os, const InferResult& r, bool with_trace) {
  std::ostringstream report;
  write_report(report, r.report);
  std::string text = report.str();
  if (!with_trace) text = text.substr(0, text.find('\n') + 1);
  os << text;
  os << "surrogate success_probability=" << std::setprecision(17) << r.success_probability << '\n';
}

BenchmarkReport cmd_benchmark(const ProjectConfig& config, const RatioEnsemble& ensemble,
                              std::size_t n_rounds, int threads, std::ostream* log) {
  config.validate();
  ensemble.validate();
  BenchmarkReport report;
  report.rounds.resize(n_rounds);
  std::atomic<std::size_t> done{0};
  std::mutex log_mutex;
  parallel_for(n_rounds, threads, [&](std::size_t i) {
    const std::uint64_t round = i;
    const SceneDraw d = draw_scene(config, config.seed, Stream::Benchmark, round, true);
    const Observation& obs = d.observation;
    const PosteriorModel model =
        make_posterior(config, ensemble, obs.grid, obs.collision_grid, obs.pose, obs.aabb);
    BenchmarkRound& out = report.rounds[i];
    out.round = round;
    out.shape = d.latents.shape.kind;
    ProductPoint pose[3];
    for (int k = 0; k < 2; ++k) {
      const PosteriorMode mode = k == 0 ? PosteriorMode::Map : PosteriorMode::Mle;
      Rng rng = make_rng(config.seed, Stream::Inference, 3 * round + k);
      const OptimizationReport r = plan_with_retry(model, mode, rng, config.optimizer);
      pose[k] = r.best;
      out.infeasible[k] = r.infeasible;
    }
    {
      Rng rng = make_rng(config.seed, Stream::Inference, 3 * round + 2);
      for (int attempt = 0; attempt <= config.optimizer.max_retries; ++attempt) {
        pose[2] = prior_sample(rng, model.prior);
        out.infeasible[2] = model.collides(pose[2]);
        if (!out.infeasible[2]) break;
      }
    }
    Rng outcome = make_rng(config.seed, Stream::Outcomes, outcome_index(round));
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(outcome);
    for (int k = 0; k < 3; ++k) {
      out.probability[k] = analytic_success_prob(pose[k], d.latents, config.world, config.surrogate);
      out.success[k] = !out.infeasible[k] && u < out.probability[k];
    }
    out.map_prior_log_density = prior_log_density(pose[0], model.prior);
    out.mle_prior_log_density = prior_log_density(pose[1], model.prior);
    const std::size_t n = ++done;
    if (log && (n % 10 == 0 || n == n_rounds)) {
      std::lock_guard<std::mutex> lock(log_mutex);
      *log << "benchmark: " << n << "/" << n_rounds << " rounds\n" << std::flush;
    }
  });

  MethodStats* stats[3] = {&report.map, &report.mle, &report.baseline};
  std::size_t dominates = 0;
  for (const BenchmarkRound& r : report.rounds) {
    for (int k = 0; k < 3; ++k) {
      MethodStats& s = *stats[k];
      ++s.rounds;
      if (r.success[k]) ++s.successes;
      else if (r.infeasible[k]) ++s.collision_infeasible;
      else ++s.grasp_slip;
    }
    if (r.map_prior_log_density >= r.mle_prior_log_density) ++dominates;
  }
  report.map_prior_dominates = n_rounds ? static_cast<double>(dominates) / static_cast<double>(n_rounds) : 0.0;
  return report;
}

void write_benchmark(std::ostream& os, const BenchmarkReport& r) {
  os << std::fixed << std::setprecision(4);
  os << "method  rounds  successes  rate    wilson95_low  wilson95_high  collision_infeasible  grasp_slip\n";
  for (const MethodStats* s : {&r.map, &r.mle, &r.baseline}) {
    const Interval w = s->wilson();
    os << std::left << std::setw(8) << s->name << std::right << std::setw(6) << s->rounds
       << std::setw(11) << s->successes << "  " << s->rate() << "  " << std::setw(12) << w.low
       << "  " << std::setw(13) << w.high << "  " << std::setw(20) << s->collision_infeasible
       << "  " << std::setw(10) << s->grasp_slip << '\n';
  }
  os << "map_prior_log_density_ge_mle " << r.map_prior_dominates << '\n';
  os << std::defaultfloat;
}

}  // namespace gsbi
