#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "gsbi/config.hpp"
#include "gsbi/dataset.hpp"
#include "gsbi/oracle.hpp"
#include "gsbi/posterior.hpp"
#include "gsbi/ratio_net.hpp"

namespace gsbi {

// Library side of the CLI verbs. Every verb is a pure function of the config
// (including its seed) and its input files.

struct GenerateSummary {
  GenerateStats stats;
  std::uint64_t config_hash = 0;
  /// Observed success rate lies within expected rate +- 3 binomial sigma.
  bool balance_ok = false;
  double balance_sigma = 0.0;
};

/// config.episodes episodes of config.grasps_per_episode grasps into `out_path`.
/// `log` receives progress and the label-balance line.
GenerateSummary cmd_generate(const ProjectConfig& config, const std::string& out_path, int threads,
                             std::ostream* log = nullptr);

struct TrainSummary {
  std::vector<EpochLog> log;
  std::size_t train_scenes = 0;
  std::size_t validation_scenes = 0;
  std::size_t skipped_scenes = 0;
  std::vector<double> best_validation;  // per member
  std::string log_path;
};

/// Trains the ensemble on `dataset_path` (the config hash must match) and
/// writes the weights plus a training curve at `out_weights` + ".log".
TrainSummary cmd_train(const ProjectConfig& config, const std::string& dataset_path,
                       const std::string& out_weights, int threads, std::ostream* log = nullptr);
RatioEnsemble train_ensemble(const ProjectConfig& config, std::span<const EpisodeRecord> episodes,
                             int threads, TrainSummary* summary = nullptr, std::ostream* log = nullptr);

/// Scene description for inference: `key = value` lines over the latents
/// (shape, dims, object_x, object_y, object_yaw_deg, table_x, table_y,
/// table_yaw_deg, friction, torque, noise_seed).
LatentState parse_scene_spec(const std::string& text);

struct InferResult {
  LatentState latents;
  OptimizationReport report;
  double success_probability = 0.0;  // surrogate at the returned pose, true latents
};

/// Inference on an explicit scene.
InferResult cmd_infer(const ProjectConfig& config, const RatioEnsemble& ensemble,
                      const LatentState& scene, PosteriorMode mode, std::uint64_t request_index = 0);
/// Inference on the scene of dataset episode `episode` under config.seed.
InferResult cmd_infer_episode(const ProjectConfig& config, const RatioEnsemble& ensemble,
                              std::uint64_t episode, PosteriorMode mode);
void write_infer(std::ostream& os, const InferResult& r, bool with_trace);

struct MethodStats {
  std::string name;
  std::size_t rounds = 0;
  std::size_t successes = 0;
  std::size_t collision_infeasible = 0;  // every attempt collided
  std::size_t grasp_slip = 0;            // feasible pose, grasp failed

  double rate() const { return rounds ? static_cast<double>(successes) / static_cast<double>(rounds) : 0.0; }
  Interval wilson() const { return wilson_interval(successes, rounds); }
};

struct BenchmarkRound {
  std::uint64_t round = 0;
  ShapeKind shape = ShapeKind::Box;
  // map, mle, prior baseline
  bool success[3] = {false, false, false};
  bool infeasible[3] = {false, false, false};
  double probability[3] = {0.0, 0.0, 0.0};
  double map_prior_log_density = 0.0;
  double mle_prior_log_density = 0.0;
};

struct BenchmarkReport {
  MethodStats map{"map"};
  MethodStats mle{"mle"};
  MethodStats baseline{"prior"};
  std::vector<BenchmarkRound> rounds;
  /// Fraction of rounds where the MAP pose has at least the MLE pose's prior
  /// log-density.
  double map_prior_dominates = 0.0;
};

/// n_rounds fresh scenes from the Benchmark stream. MAP and MLE run
/// plan_with_retry; the baseline draws prior samples under the same collision
/// retry budget. Every pose is executed through the surrogate with a shared
/// uniform draw per round.
BenchmarkReport cmd_benchmark(const ProjectConfig& config, const RatioEnsemble& ensemble,
                              std::size_t n_rounds, int threads, std::ostream* log = nullptr);
void write_benchmark(std::ostream& os, const BenchmarkReport& r);

}  // namespace gsbi
