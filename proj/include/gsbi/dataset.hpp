#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gsbi/config.hpp"
#include "gsbi/distributions.hpp"
#include "gsbi/episode.hpp"
#include "gsbi/random.hpp"
#include "gsbi/tsdf.hpp"

namespace gsbi {

/// Rendered, noised and fused observation of one scene.
struct Observation {
  std::vector<CameraView> views;
  std::vector<DepthImage> images;
  TsdfGrid grid;            // network resolution
  TsdfGrid collision_grid;  // empty unless requested
  PoseFeature4D pose;
  Aabb aabb;
};

/// Throws ErrorKind::EmptyScene when no object voxels survive the table mask.
Observation observe(const ProjectConfig& config, const LatentState& z, bool with_collision_grid);

HandPrior hand_prior(const ProjectConfig& config, const Aabb& aabb);

struct SceneDraw {
  LatentState latents;
  Observation observation;
};

/// Latents from (seed, stream, index), observed. Scenes whose object leaves no
/// voxels are redrawn from the next latent sub-stream, so the result depends
/// only on (config, seed, stream, index).
SceneDraw draw_scene(const ProjectConfig& config, std::uint64_t seed, Stream stream,
                     std::uint64_t index, bool with_collision_grid, std::size_t* redraws = nullptr);

/// Episode `index` of the dataset defined by (config, seed), drawn from the
/// Latents stream.
/// `probabilities` receives the surrogate success probability of each grasp.
EpisodeRecord generate_episode(const ProjectConfig& config, std::uint64_t seed, std::uint64_t index,
                               std::vector<double>* probabilities = nullptr,
                               std::size_t* redraws = nullptr);

struct GenerateStats {
  std::size_t episodes = 0;
  std::size_t grasps = 0;
  std::size_t successes = 0;
  double probability_sum = 0.0;   // sum of surrogate probabilities p
  double bernoulli_variance = 0.0;  // sum of p (1 - p)
  std::size_t redraws = 0;

  double expected_rate() const { return grasps ? probability_sum / static_cast<double>(grasps) : 0.0; }
  double observed_rate() const { return grasps ? static_cast<double>(successes) / static_cast<double>(grasps) : 0.0; }
};

using ProgressCallback = std::function<void(std::size_t done, std::size_t total)>;

/// Episodes first .. first + count - 1 on a pool of `threads` workers, in
/// index order. `stats` accumulates.
std::vector<EpisodeRecord> generate_episodes(const ProjectConfig& config, std::uint64_t seed,
                                             std::uint64_t first, std::size_t count, int threads,
                                             GenerateStats* stats = nullptr,
                                             const ProgressCallback& progress = {});

// Dataset file: "GSBI-DATA" u32 version, u64 config hash, u64 episode count,
// then per episode a u64 byte length and the record payload.
struct DatasetHeader {
  std::uint32_t version = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t episodes = 0;
};

/// The stored network grid of an episode.
TsdfGrid episode_grid(const EpisodeRecord& e);

void write_episode(std::ostream& os, const EpisodeRecord& e);
EpisodeRecord read_episode(std::istream& is);

/// Streams episodes into `path` + ".partial", renaming on success.
class DatasetWriter {
 public:
  DatasetWriter(const std::string& path, std::uint64_t config_hash, std::uint64_t episodes);
  ~DatasetWriter();
  void append(const EpisodeRecord& e);
  void finish();

 private:
  std::string path_;
  std::string partial_;
  std::uint64_t expected_ = 0;
  std::uint64_t written_ = 0;
  std::unique_ptr<std::ofstream> os_;
  bool finished_ = false;
};

DatasetHeader read_dataset_header(std::istream& is);
/// Reads every record; when `expected_hash` is set, a mismatch is a schema
/// error.
std::vector<EpisodeRecord> load_dataset(const std::string& path,
                                        std::optional<std::uint64_t> expected_hash = std::nullopt,
                                        DatasetHeader* header = nullptr);

}  // namespace gsbi
