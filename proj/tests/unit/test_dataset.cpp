#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "gsbi/dataset.hpp"
#include "gsbi/error.hpp"
#include "gsbi/pipeline.hpp"

using namespace gsbi;
namespace fs = std::filesystem;

namespace {

ProjectConfig small_config() {
  ProjectConfig c = desk_config();
  c.seed = 5;
  c.episodes = 6;
  c.grasps_per_episode = 5;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

fs::path scratch(const char* name) {
  const fs::path d = fs::temp_directory_path() / "gsbi-unit-dataset";
  fs::create_directories(d);
  return d / name;
}

}  // namespace

TEST_CASE("episode record round trip") {
  const ProjectConfig c = small_config();
  const EpisodeRecord e = generate_episode(c, c.seed, 3);
  std::stringstream ss;
  write_episode(ss, e);
  const EpisodeRecord back = read_episode(ss);
  CHECK(back.id == e.id);
  CHECK(back.voxels == e.voxels);
  REQUIRE(back.grasps.size() == e.grasps.size());
  for (std::size_t i = 0; i < e.grasps.size(); ++i) {
    CHECK(back.grasps[i].success == e.grasps[i].success);
    CHECK(back.grasps[i].hand.position == e.grasps[i].hand.position);
    CHECK(back.grasps[i].hand.orientation.coeffs() == e.grasps[i].hand.orientation.coeffs());
  }
  CHECK(back.pose.centroid == e.pose.centroid);
  CHECK(back.latents.friction == e.latents.friction);
}

TEST_CASE("generate writes a self-describing, byte-stable file") {
  const ProjectConfig c = small_config();
  const auto a = scratch("a.gsbi"), b = scratch("b.gsbi");
  const GenerateSummary s = cmd_generate(c, a.string(), 1);
  cmd_generate(c, b.string(), 2);
  CHECK(s.stats.episodes == 6);
  CHECK(s.stats.grasps == 30);
  CHECK(slurp(a) == slurp(b));

  DatasetHeader h;
  const auto eps = load_dataset(a.string(), data_config_hash(c), &h);
  CHECK(h.episodes == 6);
  CHECK(eps.size() == 6);
  for (const auto& e : eps) CHECK(e.grasps.size() == 5);

  ProjectConfig other = c;
  other.surrogate.bias += 1.0;
  try {
    load_dataset(a.string(), data_config_hash(other));
    FAIL("expected a hash mismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Schema);
  }
}

TEST_CASE("truncated dataset is rejected naming the record") {
  const ProjectConfig c = small_config();
  const auto a = scratch("t.gsbi");
  cmd_generate(c, a.string(), 1);
  const std::string bytes = slurp(a);
  {
    std::ofstream os(a, std::ios::binary | std::ios::trunc);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 100));
  }
  try {
    load_dataset(a.string());
    FAIL("expected a schema error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Schema);
    CHECK(std::string(e.what()).find("5") != std::string::npos);
  }
}

TEST_CASE("label balance within 3 binomial sigma") {
  ProjectConfig c = desk_config();
  c.seed = 17;
  GenerateStats stats;
  generate_episodes(c, c.seed, 0, 40, 1, &stats);
  const double sigma = std::sqrt(stats.bernoulli_variance);
  CHECK(std::abs(static_cast<double>(stats.successes) - stats.probability_sum) <= 3.0 * sigma);
  CHECK(stats.grasps == 40u * c.grasps_per_episode);
}

TEST_CASE("episode grid restores the stored values") {
  const ProjectConfig c = small_config();
  const EpisodeRecord e = generate_episode(c, c.seed, 0);
  const TsdfGrid g = episode_grid(e);
  REQUIRE(g.voxel_count() == e.voxels.size());
  for (std::size_t i = 0; i < e.voxels.size(); i += 97) CHECK(g.value(i) == static_cast<double>(e.voxels[i]));
  EpisodeRecord bad = e;
  bad.voxels.pop_back();
  CHECK_THROWS_AS(episode_grid(bad), Error);
}
