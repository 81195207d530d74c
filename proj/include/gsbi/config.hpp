#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "gsbi/manifold.hpp"
#include "gsbi/ratio_net.hpp"
#include "gsbi/scene.hpp"
#include "gsbi/tsdf.hpp"

namespace gsbi {

struct OptimizerConfig {
  int n_init = 1000;
  int n_steps = 300;
  StepSizes steps;
  int max_retries = 3;
  bool descend_all = false;  // descend from every start instead of the best one
};

struct ProjectConfig {
  WorldParams world;
  int grid_n = 40;
  int collision_grid_n = 120;
  TsdfParams tsdf;
  CameraParams camera;
  NoiseParams noise;
  LatentPriorParams latents;
  SurrogateParams surrogate;
  double prior_kappa = 8.0;
  NetworkConfig net;
  TrainConfig train;
  OptimizerConfig optimizer;
  int episodes = 100;
  int grasps_per_episode = 10;
  std::uint64_t seed = 0;

  /// Throws ErrorKind::InvalidInput naming the first out-of-range key.
  void validate() const;
};

/// Flat key=value view of a ProjectConfig. Keys are dotted lower-case names;
/// `#` starts a comment.
class ConfigSchema {
 public:
  struct Field {
    std::string key;
    bool affects_data = false;  // part of the dataset config hash
    std::function<std::string(const ProjectConfig&)> get;
    std::function<void(ProjectConfig&, const std::string&)> set;
  };

  static const std::vector<Field>& fields();
  static const Field* find(const std::string& key);
};

/// Applies `key=value` lines over `base`. Unknown keys and malformed values
/// are rejected with the line number.
ProjectConfig parse_config(const std::string& text, ProjectConfig base = {});
ProjectConfig load_config(const std::string& path, ProjectConfig base = {});

/// GSBI_<KEY> with dots as underscores, upper case (e.g. GSBI_TRAIN_EPOCHS).
void apply_env_overrides(ProjectConfig& config, const std::function<const char*(const char*)>& getenv);
std::string env_name(const std::string& key);

void set_value(ProjectConfig& config, const std::string& key, const std::string& value);
std::string to_text(const ProjectConfig& config);

/// FNV-1a over the canonical text of the keys that shape generated data.
std::uint64_t data_config_hash(const ProjectConfig& config);

/// Scaled-down preset: 320x240 views, narrower encoder, fewer epochs.
ProjectConfig desk_config();

/// Preset for the analytic-ratio task: a single box size so the pose feature
/// determines the object up to noise.
ProjectConfig tractable_config();

}  // namespace gsbi
