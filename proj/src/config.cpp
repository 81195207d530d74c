#include "gsbi/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "gsbi/error.hpp"

namespace gsbi {

namespace {

using Field = ConfigSchema::Field;

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    fail(ErrorKind::InvalidInput, key + ": expected a number, got '" + s + "'");
  }
  return v;
}

template <typename I>
I parse_integer(const std::string& key, const std::string& s) {
  I v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    fail(ErrorKind::InvalidInput, key + ": expected an integer, got '" + s + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  fail(ErrorKind::InvalidInput, key + ": expected true or false, got '" + s + "'");
}

template <typename Ref>
Field real(std::string key, bool data, Ref ref) {
  return Field{key, data,
               [ref](const ProjectConfig& c) { return format_double(ref(const_cast<ProjectConfig&>(c))); },
               [ref, key](ProjectConfig& c, const std::string& s) { ref(c) = parse_double(key, s); }};
}

template <typename Ref>
Field integer(std::string key, bool data, Ref ref) {
  return Field{key, data,
               [ref](const ProjectConfig& c) { return std::to_string(ref(const_cast<ProjectConfig&>(c))); },
               [ref, key](ProjectConfig& c, const std::string& s) {
                 using I = std::remove_reference_t<decltype(ref(c))>;
                 ref(c) = parse_integer<I>(key, s);
               }};
}

template <typename Ref>
Field boolean(std::string key, bool data, Ref ref) {
  return Field{key, data,
               [ref](const ProjectConfig& c) {
                 return std::string(ref(const_cast<ProjectConfig&>(c)) ? "true" : "false");
               },
               [ref, key](ProjectConfig& c, const std::string& s) { ref(c) = parse_bool(key, s); }};
}

std::vector<Field> build_fields() {
  std::vector<Field> f;
  const bool D = true, N = false;
  f.push_back(real("world.workspace_size", D, [](ProjectConfig& c) -> double& { return c.world.workspace_size; }));
  f.push_back(real("world.table_height", D, [](ProjectConfig& c) -> double& { return c.world.table_height; }));
  f.push_back(real("world.table_half_size", D, [](ProjectConfig& c) -> double& { return c.world.table_half_size; }));
  f.push_back(real("world.table_thickness", D, [](ProjectConfig& c) -> double& { return c.world.table_thickness; }));

  f.push_back(integer("grid.n", D, [](ProjectConfig& c) -> int& { return c.grid_n; }));
  f.push_back(integer("grid.collision_n", N, [](ProjectConfig& c) -> int& { return c.collision_grid_n; }));
  f.push_back(real("tsdf.truncation_voxels", D, [](ProjectConfig& c) -> double& { return c.tsdf.truncation_voxels; }));
  f.push_back(real("tsdf.table_margin_voxels", D, [](ProjectConfig& c) -> double& { return c.tsdf.table_margin_voxels; }));
  f.push_back(real("tsdf.isotropy_tolerance", D, [](ProjectConfig& c) -> double& { return c.tsdf.isotropy_tolerance; }));

  f.push_back(integer("camera.n_views", D, [](ProjectConfig& c) -> int& { return c.camera.n_views; }));
  f.push_back(real("camera.radius", D, [](ProjectConfig& c) -> double& { return c.camera.radius; }));
  f.push_back(real("camera.polar_deg", D, [](ProjectConfig& c) -> double& { return c.camera.polar_deg; }));
  f.push_back(integer("camera.width", D, [](ProjectConfig& c) -> int& { return c.camera.width; }));
  f.push_back(integer("camera.height", D, [](ProjectConfig& c) -> int& { return c.camera.height; }));
  f.push_back(real("camera.hfov_deg", D, [](ProjectConfig& c) -> double& { return c.camera.horizontal_fov_deg; }));

  f.push_back(real("noise.sigma", D, [](ProjectConfig& c) -> double& { return c.noise.sigma; }));
  f.push_back(real("noise.bias_scale", D, [](ProjectConfig& c) -> double& { return c.noise.bias_scale; }));
  f.push_back(real("noise.bias_frequency", D, [](ProjectConfig& c) -> double& { return c.noise.bias_frequency; }));

  f.push_back(real("latent.table_xy_std", D, [](ProjectConfig& c) -> double& { return c.latents.table_xy_std; }));
  f.push_back(real("latent.table_yaw_deg", D, [](ProjectConfig& c) -> double& { return c.latents.table_yaw_deg; }));
  f.push_back(real("latent.object_xy_half_range", D, [](ProjectConfig& c) -> double& { return c.latents.object_xy_half_range; }));
  f.push_back(real("latent.torque_lo", D, [](ProjectConfig& c) -> double& { return c.latents.torque.lo; }));
  f.push_back(real("latent.torque_hi", D, [](ProjectConfig& c) -> double& { return c.latents.torque.hi; }));
  f.push_back(real("latent.friction_lo", D, [](ProjectConfig& c) -> double& { return c.latents.friction.lo; }));
  f.push_back(real("latent.friction_hi", D, [](ProjectConfig& c) -> double& { return c.latents.friction.hi; }));
  f.push_back(real("latent.spin_ratio_mean", D, [](ProjectConfig& c) -> double& { return c.latents.spin_ratio_mean; }));
  f.push_back(real("latent.spin_ratio_std", D, [](ProjectConfig& c) -> double& { return c.latents.spin_ratio_std; }));
  f.push_back(boolean("latent.use_box", D, [](ProjectConfig& c) -> bool& { return c.latents.use_box; }));
  f.push_back(boolean("latent.use_cylinder", D, [](ProjectConfig& c) -> bool& { return c.latents.use_cylinder; }));
  f.push_back(boolean("latent.use_sphere", D, [](ProjectConfig& c) -> bool& { return c.latents.use_sphere; }));
  f.push_back(real("latent.box_half_xy_lo", D, [](ProjectConfig& c) -> double& { return c.latents.box_half_xy.lo; }));
  f.push_back(real("latent.box_half_xy_hi", D, [](ProjectConfig& c) -> double& { return c.latents.box_half_xy.hi; }));
  f.push_back(real("latent.box_half_y_lo", D, [](ProjectConfig& c) -> double& { return c.latents.box_half_y.lo; }));
  f.push_back(real("latent.box_half_y_hi", D, [](ProjectConfig& c) -> double& { return c.latents.box_half_y.hi; }));
  f.push_back(real("latent.box_half_z_lo", D, [](ProjectConfig& c) -> double& { return c.latents.box_half_z.lo; }));
  f.push_back(real("latent.box_half_z_hi", D, [](ProjectConfig& c) -> double& { return c.latents.box_half_z.hi; }));
  f.push_back(real("latent.cylinder_radius_lo", D, [](ProjectConfig& c) -> double& { return c.latents.cylinder_radius.lo; }));
  f.push_back(real("latent.cylinder_radius_hi", D, [](ProjectConfig& c) -> double& { return c.latents.cylinder_radius.hi; }));
  f.push_back(real("latent.cylinder_half_height_lo", D, [](ProjectConfig& c) -> double& { return c.latents.cylinder_half_height.lo; }));
  f.push_back(real("latent.cylinder_half_height_hi", D, [](ProjectConfig& c) -> double& { return c.latents.cylinder_half_height.hi; }));
  f.push_back(real("latent.sphere_radius_lo", D, [](ProjectConfig& c) -> double& { return c.latents.sphere_radius.lo; }));
  f.push_back(real("latent.sphere_radius_hi", D, [](ProjectConfig& c) -> double& { return c.latents.sphere_radius.hi; }));

  f.push_back(real("surrogate.w_align", D, [](ProjectConfig& c) -> double& { return c.surrogate.w_align; }));
  f.push_back(real("surrogate.w_center", D, [](ProjectConfig& c) -> double& { return c.surrogate.w_center; }));
  f.push_back(real("surrogate.center_scale", D, [](ProjectConfig& c) -> double& { return c.surrogate.center_scale; }));
  f.push_back(real("surrogate.w_friction", D, [](ProjectConfig& c) -> double& { return c.surrogate.w_friction; }));
  f.push_back(real("surrogate.w_torque", D, [](ProjectConfig& c) -> double& { return c.surrogate.w_torque; }));
  f.push_back(real("surrogate.bias", D, [](ProjectConfig& c) -> double& { return c.surrogate.bias; }));

  f.push_back(real("prior.kappa", D, [](ProjectConfig& c) -> double& { return c.prior_kappa; }));

  f.push_back(Field{"net.channels", N,
                    [](const ProjectConfig& c) {
                      std::string s;
                      for (std::size_t i = 0; i < c.net.channels.size(); ++i) {
                        s += (i ? "," : "") + std::to_string(c.net.channels[i]);
                      }
                      return s;
                    },
                    [](ProjectConfig& c, const std::string& s) {
                      std::stringstream ss(s);
                      std::string part;
                      std::vector<int> v;
                      while (std::getline(ss, part, ',')) v.push_back(parse_integer<int>("net.channels", part));
                      if (v.size() != 4) fail(ErrorKind::InvalidInput, "net.channels: expected 4 comma-separated values");
                      std::copy(v.begin(), v.end(), c.net.channels.begin());
                    }});
  f.push_back(integer("net.embedding", N, [](ProjectConfig& c) -> int& { return c.net.embedding; }));
  f.push_back(integer("net.hidden", N, [](ProjectConfig& c) -> int& { return c.net.hidden; }));

  f.push_back(integer("train.members", N, [](ProjectConfig& c) -> int& { return c.train.members; }));
  f.push_back(integer("train.epochs", N, [](ProjectConfig& c) -> int& { return c.train.epochs; }));
  f.push_back(integer("train.batch_size", N, [](ProjectConfig& c) -> int& { return c.train.batch_size; }));
  f.push_back(real("train.learning_rate", N, [](ProjectConfig& c) -> double& { return c.train.learning_rate; }));
  f.push_back(real("train.beta1", N, [](ProjectConfig& c) -> double& { return c.train.beta1; }));
  f.push_back(real("train.beta2", N, [](ProjectConfig& c) -> double& { return c.train.beta2; }));
  f.push_back(real("train.epsilon", N, [](ProjectConfig& c) -> double& { return c.train.epsilon; }));
  f.push_back(real("train.validation_fraction", N, [](ProjectConfig& c) -> double& { return c.train.validation_fraction; }));

  f.push_back(integer("opt.n_init", N, [](ProjectConfig& c) -> int& { return c.optimizer.n_init; }));
  f.push_back(integer("opt.n_steps", N, [](ProjectConfig& c) -> int& { return c.optimizer.n_steps; }));
  f.push_back(real("opt.step_position", N, [](ProjectConfig& c) -> double& { return c.optimizer.steps.position; }));
  f.push_back(real("opt.step_orientation", N, [](ProjectConfig& c) -> double& { return c.optimizer.steps.orientation; }));
  f.push_back(integer("opt.max_retries", N, [](ProjectConfig& c) -> int& { return c.optimizer.max_retries; }));
  f.push_back(boolean("opt.descend_all", N, [](ProjectConfig& c) -> bool& { return c.optimizer.descend_all; }));

  f.push_back(integer("data.episodes", N, [](ProjectConfig& c) -> int& { return c.episodes; }));
  f.push_back(integer("data.grasps_per_episode", D, [](ProjectConfig& c) -> int& { return c.grasps_per_episode; }));
  f.push_back(integer("seed", N, [](ProjectConfig& c) -> std::uint64_t& { return c.seed; }));
  return f;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) fail(ErrorKind::InvalidInput, "config " + key + ": " + what);
}

void require_range(const Range& r, const std::string& key, double lo_min) {
  require(r.lo >= lo_min && r.lo <= r.hi, key, "need " + format_double(lo_min) + " <= lo <= hi");
}

}  // namespace

const std::vector<Field>& ConfigSchema::fields() {
  static const std::vector<Field> f = build_fields();
  return f;
}

const Field* ConfigSchema::find(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

void ProjectConfig::validate() const {
  require(world.workspace_size > 0, "world.workspace_size", "must be positive");
  require(world.table_height >= 0 && world.table_height < world.workspace_size, "world.table_height",
          "must lie inside the workspace");
  require(world.table_half_size > 0 && world.table_thickness > 0, "world.table_half_size", "must be positive");
  require(grid_n >= 8 && grid_n <= 256, "grid.n", "must lie in [8, 256]");
  require(collision_grid_n >= 8 && collision_grid_n <= 512, "grid.collision_n", "must lie in [8, 512]");
  require(tsdf.truncation_voxels > 0, "tsdf.truncation_voxels", "must be positive");
  require(tsdf.table_margin_voxels >= 0, "tsdf.table_margin_voxels", "must be non-negative");
  require(tsdf.isotropy_tolerance >= 0 && tsdf.isotropy_tolerance < 1, "tsdf.isotropy_tolerance", "must lie in [0, 1)");
  require(camera.n_views >= 1 && camera.n_views <= 64, "camera.n_views", "must lie in [1, 64]");
  require(camera.radius > 0, "camera.radius", "must be positive");
  require(camera.polar_deg > 0 && camera.polar_deg < 90, "camera.polar_deg", "must lie in (0, 90)");
  require(camera.width >= 8 && camera.height >= 8 && camera.width <= 8192 && camera.height <= 8192,
          "camera.width", "image size must lie in [8, 8192]");
  require(camera.horizontal_fov_deg > 1 && camera.horizontal_fov_deg < 179, "camera.hfov_deg", "must lie in (1, 179)");
  require(noise.sigma >= 0 && noise.bias_scale >= 0 && noise.bias_scale < 0.5, "noise.sigma",
          "sigma >= 0 and bias_scale in [0, 0.5)");
  require(noise.bias_frequency >= 0, "noise.bias_frequency", "must be non-negative");
  require(latents.table_xy_std >= 0, "latent.table_xy_std", "must be non-negative");
  require(latents.table_yaw_deg >= 0 && latents.table_yaw_deg <= 180, "latent.table_yaw_deg", "must lie in [0, 180]");
  require(latents.object_xy_half_range <= world.workspace_size, "latent.object_xy_half_range",
          "must not exceed the workspace size");
  require_range(latents.torque, "latent.torque", 0.0);
  require_range(latents.friction, "latent.friction", 0.0);
  require(latents.spin_ratio_std >= 0, "latent.spin_ratio_std", "must be non-negative");
  require(latents.use_box || latents.use_cylinder || latents.use_sphere, "latent.use_box", "enable at least one shape");
  require_range(latents.box_half_xy, "latent.box_half_xy", 1e-3);
  if (latents.box_half_y.lo > 0 || latents.box_half_y.hi > 0) require_range(latents.box_half_y, "latent.box_half_y", 1e-3);
  require_range(latents.box_half_z, "latent.box_half_z", 1e-3);
  require_range(latents.cylinder_radius, "latent.cylinder_radius", 1e-3);
  require_range(latents.cylinder_half_height, "latent.cylinder_half_height", 1e-3);
  require_range(latents.sphere_radius, "latent.sphere_radius", 1e-3);
  require(surrogate.center_scale > 0, "surrogate.center_scale", "must be positive");
  require(prior_kappa >= 0, "prior.kappa", "must be non-negative");
  require(net.grid_n == grid_n, "net", "network grid size must equal grid.n");
  net.validate();
  require(train.members >= 1 && train.members <= 64, "train.members", "must lie in [1, 64]");
  require(train.epochs >= 1, "train.epochs", "must be positive");
  require(train.batch_size >= 2, "train.batch_size", "must be at least 2");
  require(train.learning_rate > 0, "train.learning_rate", "must be positive");
  require(train.beta1 >= 0 && train.beta1 < 1 && train.beta2 >= 0 && train.beta2 < 1, "train.beta1",
          "betas must lie in [0, 1)");
  require(train.epsilon > 0, "train.epsilon", "must be positive");
  require(train.validation_fraction >= 0 && train.validation_fraction < 1, "train.validation_fraction",
          "must lie in [0, 1)");
  require(optimizer.n_init >= 1, "opt.n_init", "must be positive");
  require(optimizer.n_steps >= 0, "opt.n_steps", "must be non-negative");
  require(optimizer.steps.position >= 0 && optimizer.steps.orientation >= 0, "opt.step_position",
          "step sizes must be non-negative");
  require(optimizer.max_retries >= 0 && optimizer.max_retries <= 100, "opt.max_retries", "must lie in [0, 100]");
  require(episodes >= 1, "data.episodes", "must be positive");
  require(grasps_per_episode >= 2, "data.grasps_per_episode", "negative sampling needs at least 2");
}

void set_value(ProjectConfig& config, const std::string& key, const std::string& value) {
  const Field* f = ConfigSchema::find(key);
  if (!f) fail(ErrorKind::InvalidInput, "unknown config key '" + key + "'");
  f->set(config, value);
  if (key == "grid.n") config.net.grid_n = config.grid_n;
}

ProjectConfig parse_config(const std::string& text, ProjectConfig base) {
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
      fail(ErrorKind::InvalidInput, "config line " + std::to_string(line_no) + ": expected key=value");
    }
    try {
      set_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      fail(e.kind(), "config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

ProjectConfig load_config(const std::string& path, ProjectConfig base) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::Io, "cannot open config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string env_name(const std::string& key) {
  std::string s = "GSBI_";
  for (char c : key) s += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

void apply_env_overrides(ProjectConfig& config, const std::function<const char*(const char*)>& getenv) {
  for (const auto& f : ConfigSchema::fields()) {
    const std::string name = env_name(f.key);
    if (const char* v = getenv(name.c_str())) {
      try {
        set_value(config, f.key, trim(v));
      } catch (const Error& e) {
        fail(e.kind(), name + ": " + e.what());
      }
    }
  }
}

std::string to_text(const ProjectConfig& config) {
  std::string s;
  for (const auto& f : ConfigSchema::fields()) s += f.key + " = " + f.get(config) + "\n";
  return s;
}

std::uint64_t data_config_hash(const ProjectConfig& config) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& f : ConfigSchema::fields()) {
    if (!f.affects_data) continue;
    const std::string line = f.key + "=" + f.get(config) + "\n";
    for (unsigned char c : line) {
      h ^= c;
      h *= 1099511628211ull;
    }
  }
  return h;
}

ProjectConfig desk_config() {
  ProjectConfig c;
  c.camera.width = 320;
  c.camera.height = 240;
  c.net.channels = {8, 16, 32, 64};
  c.train.epochs = 12;
  return c;
}

ProjectConfig tractable_config() {
  ProjectConfig c = desk_config();
  c.latents.use_cylinder = false;
  c.latents.use_sphere = false;
  c.latents.box_half_xy = {0.032, 0.032};
  c.latents.box_half_y = {0.018, 0.018};
  c.latents.box_half_z = {0.03, 0.03};
  c.latents.object_xy_half_range = 0.08;
  c.train.epochs = 10;
  return c;
}

}  // namespace gsbi
