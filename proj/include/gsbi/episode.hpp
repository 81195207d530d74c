#pragma once

#include <cstdint>
#include <vector>

#include "gsbi/manifold.hpp"
#include "gsbi/scene.hpp"
#include "gsbi/tsdf.hpp"

namespace gsbi {

struct GraspAttempt {
  ProductPoint hand;
  bool success = false;
};

/// One simulated scene: latents, the network-resolution grid (values only),
/// its pose feature and object bounds, and the grasps tried on it.
struct EpisodeRecord {
  std::uint64_t id = 0;
  LatentState latents;
  int grid_n = 0;
  double grid_size = 0.0;
  Vec3 grid_origin = Vec3::Zero();
  std::vector<float> voxels;
  PoseFeature4D pose;
  Aabb aabb;
  std::vector<GraspAttempt> grasps;
};

}  // namespace gsbi
