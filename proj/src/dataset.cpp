#include "gsbi/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "gsbi/binary_io.hpp"
#include "gsbi/error.hpp"

namespace gsbi {

namespace {

constexpr std::uint32_t kDatasetVersion = 1;
constexpr int kMaxRedraws = 64;

void put_vec(std::ostream& os, const Vec3& v) {
  for (int i = 0; i < 3; ++i) io::write<double>(os, v[i]);
}

Vec3 get_vec(std::istream& is) {
  Vec3 v;
  for (int i = 0; i < 3; ++i) v[i] = io::read<double>(is);
  return v;
}

}  // namespace

HandPrior hand_prior(const ProjectConfig& config, const Aabb& aabb) {
  HandPrior p;
  p.position = PositionPrior(aabb.low, aabb.high);
  p.orientation = build_orientation_prior(config.prior_kappa);
  return p;
}

Observation observe(const ProjectConfig& config, const LatentState& z, bool with_collision_grid) {
  const WorldParams& world = config.world;
  const Scene scene = scene_from_latents(z, world);
  Observation obs;
  obs.views = camera_trajectory(config.camera.n_views, world.workspace_size, config.camera);
  for (std::size_t i = 0; i < obs.views.size(); ++i) {
    Rng noise = make_rng(z.noise_seed, Stream::DepthNoise, i);
    obs.images.push_back(apply_depth_noise(render_depth(scene, obs.views[i]), noise, config.noise));
  }
  obs.grid = fuse(obs.images, obs.views, config.grid_n, world.workspace_size, config.tsdf.truncation_voxels);
  obs.aabb = object_aabb(obs.grid, world.table_height, config.tsdf);
  obs.pose = extract_pose_feature(obs.grid, world.table_height, config.tsdf);
  if (with_collision_grid) {
    // Same metric band as the network grid.
    const double delta = config.tsdf.truncation_voxels * config.collision_grid_n / config.grid_n;
    obs.collision_grid = fuse(obs.images, obs.views, config.collision_grid_n, world.workspace_size, delta);
  }
  return obs;
}

SceneDraw draw_scene(const ProjectConfig& config, std::uint64_t seed, Stream stream,
                     std::uint64_t index, bool with_collision_grid, std::size_t* redraws) {
  for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
    Rng latent_rng = make_rng(seed, stream, index + (static_cast<std::uint64_t>(attempt) << 40));
    SceneDraw d;
    d.latents = sample_latents(latent_rng, config.world, config.latents);
    try {
      d.observation = observe(config, d.latents, with_collision_grid);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::EmptyScene) throw;
      if (redraws) ++*redraws;
      continue;
    }
    return d;
  }
  fail(ErrorKind::EmptyScene, "scene " + std::to_string(index) + ": no visible object after " +
                                  std::to_string(kMaxRedraws) + " draws");
}

EpisodeRecord generate_episode(const ProjectConfig& config, std::uint64_t seed, std::uint64_t index,
                               std::vector<double>* probabilities, std::size_t* redraws) {
  const SceneDraw d = draw_scene(config, seed, Stream::Latents, index, false, redraws);
  const LatentState& z = d.latents;
  const Observation& obs = d.observation;
  EpisodeRecord rec;
  rec.id = index;
  rec.latents = z;
  rec.grid_n = obs.grid.n();
  rec.grid_size = obs.grid.size();
  rec.grid_origin = obs.grid.origin();
  rec.voxels.assign(obs.grid.values().begin(), obs.grid.values().end());
  rec.pose = obs.pose;
  rec.aabb = obs.aabb;
  const HandPrior prior = hand_prior(config, obs.aabb);
  Rng grasp_rng = make_rng(seed, Stream::Grasps, index);
  Rng outcome_rng = make_rng(seed, Stream::Outcomes, index);
  if (probabilities) probabilities->clear();
  for (int k = 0; k < config.grasps_per_episode; ++k) {
    GraspAttempt g;
    g.hand = prior_sample(grasp_rng, prior);
    const GraspOutcome out = simulate_grasp(g.hand, z, outcome_rng, config.world, config.surrogate);
    g.success = out.success;
    if (probabilities) probabilities->push_back(out.success_probability);
    rec.grasps.push_back(g);
  }
  return rec;
}

TsdfGrid episode_grid(const EpisodeRecord& e) {
  TsdfGrid g(e.grid_n, e.grid_size, e.grid_origin);
  if (e.voxels.size() != g.voxel_count()) {
    fail(ErrorKind::Schema, "episode " + std::to_string(e.id) + ": voxel count does not match the grid");
  }
  std::copy(e.voxels.begin(), e.voxels.end(), g.mutable_values().begin());
  // Only values are stored; treat every voxel as observed.
  std::fill(g.mutable_weights().begin(), g.mutable_weights().end(), 1.0);
  return g;
}

std::vector<EpisodeRecord> generate_episodes(const ProjectConfig& config, std::uint64_t seed,
                                             std::uint64_t first, std::size_t count, int threads,
                                             GenerateStats* stats, const ProgressCallback& progress) {
  config.validate();
  std::vector<EpisodeRecord> out(count);
  std::vector<std::vector<double>> probs(count);
  std::vector<std::size_t> redraws(count, 0);
  std::atomic<std::size_t> next{0}, done{0};
  std::mutex progress_mutex;
  std::vector<std::exception_ptr> errors(count);
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        out[i] = generate_episode(config, seed, first + i, &probs[i], &redraws[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
      const std::size_t d = ++done;
      if (progress) {
        std::lock_guard<std::mutex> lock(progress_mutex);
        progress(d, count);
      }
    }
  };
  const int n_threads = std::clamp(threads, 1, static_cast<int>(std::max<std::size_t>(count, 1)));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  if (stats) {
    for (std::size_t i = 0; i < count; ++i) {
      ++stats->episodes;
      stats->redraws += redraws[i];
      for (std::size_t k = 0; k < out[i].grasps.size(); ++k) {
        ++stats->grasps;
        stats->successes += out[i].grasps[k].success ? 1 : 0;
        stats->probability_sum += probs[i][k];
        stats->bernoulli_variance += probs[i][k] * (1.0 - probs[i][k]);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

void write_episode(std::ostream& os, const EpisodeRecord& e) {
  const LatentState& z = e.latents;
  io::write<std::uint64_t>(os, e.id);
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(z.shape.kind));
  put_vec(os, z.shape.dims);
  for (double v : {z.table_x, z.table_y, z.table_yaw_deg, z.object_x, z.object_y, z.object_yaw,
                   z.finger_torque, z.friction, z.spin_ratio}) {
    io::write<double>(os, v);
  }
  io::write<std::uint64_t>(os, z.noise_seed);
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(e.grid_n));
  io::write<double>(os, e.grid_size);
  put_vec(os, e.grid_origin);
  io::write<std::uint64_t>(os, e.voxels.size());
  for (float v : e.voxels) io::write<float>(os, v);
  put_vec(os, e.pose.centroid);
  io::write<double>(os, e.pose.yaw);
  io::write<std::uint8_t>(os, e.pose.degenerate ? 1 : 0);
  put_vec(os, e.aabb.low);
  put_vec(os, e.aabb.high);
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(e.grasps.size()));
  for (const GraspAttempt& g : e.grasps) {
    put_vec(os, g.hand.position);
    const Vec4 q = g.hand.orientation.coeffs();
    for (int i = 0; i < 4; ++i) io::write<double>(os, q[i]);
    io::write<std::uint8_t>(os, g.success ? 1 : 0);
  }
}

EpisodeRecord read_episode(std::istream& is) {
  EpisodeRecord e;
  LatentState& z = e.latents;
  e.id = io::read<std::uint64_t>(is);
  const auto kind = io::read<std::uint32_t>(is);
  if (kind > 2) fail(ErrorKind::Schema, "unknown shape kind " + std::to_string(kind));
  z.shape.kind = static_cast<ShapeKind>(kind);
  z.shape.dims = get_vec(is);
  for (double* v : {&z.table_x, &z.table_y, &z.table_yaw_deg, &z.object_x, &z.object_y, &z.object_yaw,
                    &z.finger_torque, &z.friction, &z.spin_ratio}) {
    *v = io::read<double>(is);
  }
  z.noise_seed = io::read<std::uint64_t>(is);
  e.grid_n = static_cast<int>(io::read<std::uint32_t>(is));
  e.grid_size = io::read<double>(is);
  e.grid_origin = get_vec(is);
  const auto n_vox = io::read<std::uint64_t>(is);
  const std::uint64_t side = static_cast<std::uint64_t>(e.grid_n);
  if (e.grid_n < 1 || e.grid_n > 1024 || n_vox != side * side * side) {
    fail(ErrorKind::Schema, "voxel count does not match the grid size");
  }
  e.voxels.resize(n_vox);
  for (auto& v : e.voxels) v = io::read<float>(is);
  e.pose.centroid = get_vec(is);
  e.pose.yaw = io::read<double>(is);
  e.pose.degenerate = io::read<std::uint8_t>(is) != 0;
  e.aabb.low = get_vec(is);
  e.aabb.high = get_vec(is);
  if (!((e.aabb.low.array() < e.aabb.high.array()).all())) fail(ErrorKind::Schema, "empty object bounds");
  const auto n_grasps = io::read<std::uint32_t>(is);
  if (n_grasps > 1u << 20) fail(ErrorKind::Schema, "implausible grasp count");
  for (std::uint32_t k = 0; k < n_grasps; ++k) {
    GraspAttempt g;
    g.hand.position = get_vec(is);
    Vec4 q;
    for (int i = 0; i < 4; ++i) q[i] = io::read<double>(is);
    g.hand.orientation = UnitQuaternion::from_unit(q);
    g.success = io::read<std::uint8_t>(is) != 0;
    e.grasps.push_back(g);
  }
  return e;
}

DatasetWriter::DatasetWriter(const std::string& path, std::uint64_t config_hash, std::uint64_t episodes)
    : path_(path), partial_(path + ".partial"), expected_(episodes) {
  os_ = std::make_unique<std::ofstream>(partial_, std::ios::binary | std::ios::trunc);
  if (!*os_) fail(ErrorKind::Io, "cannot open " + partial_ + " for writing");
  io::write_magic(*os_, "GSBI-DATA");
  io::write<std::uint32_t>(*os_, kDatasetVersion);
  io::write<std::uint64_t>(*os_, config_hash);
  io::write<std::uint64_t>(*os_, episodes);
}

DatasetWriter::~DatasetWriter() = default;

void DatasetWriter::append(const EpisodeRecord& e) {
  if (finished_) fail(ErrorKind::InvalidInput, "dataset already finished");
  std::ostringstream ss(std::ios::binary);
  write_episode(ss, e);
  const std::string payload = std::move(ss).str();
  io::write<std::uint64_t>(*os_, payload.size());
  os_->write(payload.data(), static_cast<std::streamsize>(payload.size()));
  os_->flush();
  if (!*os_) fail(ErrorKind::Io, "write to " + partial_ + " failed");
  ++written_;
}

void DatasetWriter::finish() {
  if (written_ != expected_) {
    fail(ErrorKind::InvalidInput, "dataset declared " + std::to_string(expected_) + " episodes, wrote " +
                                      std::to_string(written_));
  }
  os_->close();
  if (!*os_) fail(ErrorKind::Io, "closing " + partial_ + " failed");
  std::error_code ec;
  std::filesystem::rename(partial_, path_, ec);
  if (ec) fail(ErrorKind::Io, "cannot rename " + partial_ + ": " + ec.message());
  finished_ = true;
}

DatasetHeader read_dataset_header(std::istream& is) {
  io::expect_magic(is, "GSBI-DATA");
  DatasetHeader h;
  h.version = io::read<std::uint32_t>(is);
  if (h.version != kDatasetVersion) fail(ErrorKind::Schema, "unsupported dataset version " + std::to_string(h.version));
  h.config_hash = io::read<std::uint64_t>(is);
  h.episodes = io::read<std::uint64_t>(is);
  return h;
}

std::vector<EpisodeRecord> load_dataset(const std::string& path, std::optional<std::uint64_t> expected_hash,
                                        DatasetHeader* header) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Io, "cannot open dataset " + path);
  const DatasetHeader h = read_dataset_header(is);
  if (expected_hash && *expected_hash != h.config_hash) {
    std::ostringstream msg;
    msg << "dataset " << path << " was generated with config hash " << std::hex << h.config_hash
        << ", current config hashes to " << *expected_hash;
    fail(ErrorKind::Schema, msg.str());
  }
  if (header) *header = h;
  std::vector<EpisodeRecord> out;
  for (std::uint64_t i = 0; i < h.episodes; ++i) {
    try {
      const auto len = io::read<std::uint64_t>(is);
      if (len > (1ull << 32)) fail(ErrorKind::Schema, "implausible record length");
      std::string payload(len, '\0');
      is.read(payload.data(), static_cast<std::streamsize>(len));
      if (!is) fail(ErrorKind::Schema, "truncated record");
      std::istringstream rs(payload, std::ios::binary);
      EpisodeRecord e = read_episode(rs);
      if (rs.peek() != std::char_traits<char>::eof()) fail(ErrorKind::Schema, "trailing bytes in record");
      out.push_back(std::move(e));
    } catch (const Error& e) {
      fail(ErrorKind::Schema, "dataset " + path + ", record " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace gsbi
