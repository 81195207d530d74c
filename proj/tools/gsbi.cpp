// gsbi: generate | train | infer | benchmark | verify
//
// Config precedence: preset < --config file < GSBI_* environment < --set < --seed/--threads.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gsbi/config.hpp"
#include "gsbi/error.hpp"
#include "gsbi/pipeline.hpp"
#include "gsbi/verify.hpp"

using namespace gsbi;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kUsage = 2, kIo = 3, kDegenerate = 4 };

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput:
      return kUsage;
    case ErrorKind::Io:
    case ErrorKind::Schema:
      return kIo;
    case ErrorKind::DegeneratePosterior:
      return kDegenerate;
    default:
      return kCheckFailed;
  }
}

struct Global {
  std::string preset = "desk";
  std::string config_path;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  int threads = 0;
  std::string out;
  bool json = false;
};

ProjectConfig resolve_config(const Global& g, const CLI::App& app) {
  ProjectConfig c;
  if (g.preset == "desk") {
    c = desk_config();
  } else if (g.preset == "tractable") {
    c = tractable_config();
  } else {
    fail(ErrorKind::InvalidInput, "unknown preset '" + g.preset + "' (desk, tractable)");
  }
  if (!g.config_path.empty()) c = load_config(g.config_path, c);
  apply_env_overrides(c, [](const char* k) { return std::getenv(k); });
  for (const auto& kv : g.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) fail(ErrorKind::InvalidInput, "--set expects key=value, got '" + kv + "'");
    set_value(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (app.count("--seed")) c.seed = g.seed;
  c.validate();
  return c;
}

int thread_count(const Global& g) {
  if (g.threads > 0) return g.threads;
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

json pose_json(const ProductPoint& p) {
  const Vec4& q = p.orientation.coeffs();
  return {{"position", {p.position.x(), p.position.y(), p.position.z()}}, {"quaternion_xyzw", {q[0], q[1], q[2], q[3]}}};
}

json infer_json(const InferResult& r, bool with_trace) {
  const OptimizationReport& o = r.report;
  json j = pose_json(o.best);
  j["mode"] = to_string(o.mode);
  j["objective"] = o.best_objective;
  j["ratio_term"] = o.best_terms.ratio_term;
  j["prior_term"] = o.best_terms.prior_term;
  j["n_starts"] = o.n_starts;
  j["n_steps"] = o.n_steps;
  j["best_step"] = o.best_step;
  j["retries_used"] = o.retries_used;
  j["collision"] = o.collision;
  j["infeasible"] = o.infeasible;
  j["success_probability"] = r.success_probability;
  if (with_trace) j["trace"] = o.trace;
  return j;
}

json stats_json(const MethodStats& s) {
  const Interval w = s.wilson();
  return {{"rounds", s.rounds},
          {"successes", s.successes},
          {"rate", s.rate()},
          {"wilson95", {w.low, w.high}},
          {"collision_infeasible", s.collision_infeasible},
          {"grasp_slip", s.grasp_slip}};
}

json check_json(const CheckResult& r) {
  json m = json::array();
  for (const auto& x : r.measurements)
    m.push_back({{"name", x.name}, {"value", x.value}, {"tolerance", x.tolerance},
                 {"bound", x.upper_bound ? "upper" : "lower"}, {"passed", x.passed}});
  return {{"criterion", r.criterion}, {"name", r.name},
          {"status", r.skipped ? "skip" : r.passed ? "pass" : "fail"},
          {"seconds", r.seconds}, {"measurements", m}, {"detail", r.detail}};
}

std::string read_text(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::Io, "cannot open " + path);
  std::ostringstream s;
  s << is.rdbuf();
  return s.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grasp planning by simulation-based Bayesian inference"};
  app.require_subcommand(1);
  Global g;
  app.add_option("--preset", g.preset, "Base configuration: desk or tractable")->capture_default_str();
  app.add_option("--config", g.config_path, "key=value config file");
  app.add_option("--set", g.sets, "Override one config key (key=value), repeatable");
  app.add_option("--seed", g.seed, "Master seed");
  app.add_option("--threads", g.threads, "Worker threads (default: all cores)");
  app.add_option("--out", g.out, "Output path");
  app.add_flag("--json", g.json, "Machine-readable JSON on stdout");

  auto* gen = app.add_subcommand("generate", "Simulate episodes into a dataset file");
  int episodes = -1, grasps = -1;
  gen->add_option("--episodes", episodes, "Number of episodes");
  gen->add_option("--grasps", grasps, "Grasp attempts per episode");

  auto* tr = app.add_subcommand("train", "Train the ratio ensemble on a dataset");
  std::string dataset;
  tr->add_option("dataset", dataset, "Dataset file")->required();

  auto* inf = app.add_subcommand("infer", "Plan a grasp on one scene");
  std::string weights, scene_path, mode_text = "map";
  std::int64_t episode = -1;
  bool trace = false;
  inf->add_option("--weights", weights, "Ensemble weight file")->required();
  auto* scene_opt = inf->add_option("--scene", scene_path, "Scene spec file (key = value)");
  inf->add_option("--episode", episode, "Scene of dataset episode N under the config seed")->excludes(scene_opt);
  inf->add_option("--mode", mode_text, "map or mle")->capture_default_str();
  inf->add_flag("--trace", trace, "Include every optimizer iterate");

  auto* bench = app.add_subcommand("benchmark", "MAP, MLE and prior baseline on fresh scenes");
  std::size_t rounds = 200;
  bench->add_option("--weights", weights, "Ensemble weight file")->required();
  bench->add_option("--rounds", rounds, "Number of scenes")->capture_default_str();

  auto* ver = app.add_subcommand("verify", "Run the acceptance oracle suite");
  bool full = false;
  std::string work_dir;
  ver->add_flag("--full", full, "Include the training-based checks (long)");
  ver->add_option("--work-dir", work_dir, "Scratch directory for file artifacts");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    ProjectConfig config = resolve_config(g, app);
    const int threads = thread_count(g);
    std::ostream* log = g.json ? &std::cerr : &std::cout;

    if (gen->parsed()) {
      if (episodes >= 0) config.episodes = episodes;
      if (grasps >= 0) config.grasps_per_episode = grasps;
      config.validate();
      if (g.out.empty()) fail(ErrorKind::InvalidInput, "generate: --out is required");
      const GenerateSummary s = cmd_generate(config, g.out, threads, &std::cerr);
      if (g.json) {
        std::cout << json{{"path", g.out},
                          {"episodes", s.stats.episodes},
                          {"grasps", s.stats.grasps},
                          {"successes", s.stats.successes},
                          {"expected_rate", s.stats.expected_rate()},
                          {"observed_rate", s.stats.observed_rate()},
                          {"balance_sigma", s.balance_sigma},
                          {"balance_ok", s.balance_ok},
                          {"config_hash", s.config_hash}}
                         .dump(2)
                  << '\n';
      } else {
        *log << "wrote " << s.stats.episodes << " episodes to " << g.out << '\n';
      }
      return kOk;
    }

    if (tr->parsed()) {
      if (g.out.empty()) fail(ErrorKind::InvalidInput, "train: --out is required");
      const TrainSummary s = cmd_train(config, dataset, g.out, threads, &std::cerr);
      if (g.json) {
        std::cout << json{{"weights", g.out}, {"log", s.log_path}, {"train_scenes", s.train_scenes},
                          {"validation_scenes", s.validation_scenes}, {"skipped_scenes", s.skipped_scenes},
                          {"best_validation", s.best_validation}}
                         .dump(2)
                  << '\n';
      } else {
        *log << "wrote " << g.out << " and " << s.log_path << '\n';
      }
      return kOk;
    }

    if (inf->parsed()) {
      const PosteriorMode mode = parse_mode(mode_text);
      const RatioEnsemble ensemble = load_ensemble(weights);
      InferResult r;
      if (!scene_path.empty()) {
        r = cmd_infer(config, ensemble, parse_scene_spec(read_text(scene_path)), mode);
      } else if (episode >= 0) {
        r = cmd_infer_episode(config, ensemble, static_cast<std::uint64_t>(episode), mode);
      } else {
        fail(ErrorKind::InvalidInput, "infer: one of --scene or --episode is required");
      }
      std::ostringstream text;
      if (g.json) {
        text << infer_json(r, trace).dump(2) << '\n';
      } else {
        write_infer(text, r, trace);
      }
      std::cout << text.str();
      if (!g.out.empty()) {
        std::ofstream os(g.out);
        if (!(os << text.str())) fail(ErrorKind::Io, "cannot write " + g.out);
      }
      return kOk;
    }

    if (bench->parsed()) {
      const RatioEnsemble ensemble = load_ensemble(weights);
      const BenchmarkReport r = cmd_benchmark(config, ensemble, rounds, threads, &std::cerr);
      const bool ok = r.map.rate() >= r.baseline.rate() + 0.20 && r.map.rate() >= r.mle.rate() - 0.03;
      std::ostringstream text;
      if (g.json) {
        text << json{{"map", stats_json(r.map)}, {"mle", stats_json(r.mle)}, {"prior", stats_json(r.baseline)},
                     {"map_prior_log_density_ge_mle", r.map_prior_dominates}, {"thresholds_met", ok}}
                    .dump(2)
             << '\n';
      } else {
        write_benchmark(text, r);
        text << "thresholds " << (ok ? "met" : "not met") << " (map >= prior + 0.20, map >= mle - 0.03)\n";
      }
      std::cout << text.str();
      if (!g.out.empty()) {
        std::ofstream os(g.out);
        if (!(os << text.str())) fail(ErrorKind::Io, "cannot write " + g.out);
      }
      return ok ? kOk : kCheckFailed;
    }

    if (ver->parsed()) {
      VerifyOptions o;
      o.seed = config.seed;
      o.threads = threads;
      o.full = full;
      o.work_dir = work_dir;
      o.log = g.json ? &std::cerr : &std::cout;
      const auto results = run_verification(o);
      const bool ok = all_passed(results);
      if (g.json) {
        json j = json::array();
        for (const auto& r : results) j.push_back(check_json(r));
        std::cout << json{{"passed", ok}, {"checks", j}}.dump(2) << '\n';
      } else {
        std::cout << (ok ? "all checks passed" : "verification FAILED") << '\n';
      }
      return ok ? kOk : kCheckFailed;
    }
  } catch (const Error& e) {
    std::cerr << "gsbi: " << to_string(e.kind()) << ": " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "gsbi: " << e.what() << '\n';
    return kCheckFailed;
  }
  return kUsage;
}
