#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "gsbi/config.hpp"
#include "gsbi/error.hpp"
#include "gsbi/pipeline.hpp"
#include "gsbi/verify.hpp"

namespace py = pybind11;
using namespace gsbi;

namespace {

UnitQuaternion quat(const Vec4& q) { return UnitQuaternion::from_unit(q); }

py::dict pose_dict(const ProductPoint& p) {
  py::dict d;
  d["position"] = Vec3(p.position);
  d["quaternion"] = Vec4(p.orientation.coeffs());
  return d;
}

py::dict infer_dict(const InferResult& r) {
  py::dict d = pose_dict(r.report.best);
  d["mode"] = std::string(to_string(r.report.mode));
  d["objective"] = r.report.best_objective;
  d["ratio_term"] = r.report.best_terms.ratio_term;
  d["prior_term"] = r.report.best_terms.prior_term;
  d["retries_used"] = r.report.retries_used;
  d["collision"] = r.report.collision;
  d["infeasible"] = r.report.infeasible;
  d["trace"] = r.report.trace;
  d["success_probability"] = r.success_probability;
  return d;
}

py::dict stats_dict(const MethodStats& s) {
  py::dict d;
  const Interval w = s.wilson();
  d["rounds"] = s.rounds;
  d["successes"] = s.successes;
  d["rate"] = s.rate();
  d["wilson95"] = py::make_tuple(w.low, w.high);
  d["collision_infeasible"] = s.collision_infeasible;
  d["grasp_slip"] = s.grasp_slip;
  return d;
}

py::dict check_dict(const CheckResult& r) {
  py::dict d;
  d["criterion"] = r.criterion;
  d["name"] = r.name;
  d["status"] = r.skipped ? "skip" : r.passed ? "pass" : "fail";
  d["seconds"] = r.seconds;
  d["detail"] = r.detail;
  py::list m;
  for (const auto& x : r.measurements) {
    py::dict e;
    e["name"] = x.name;
    e["value"] = x.value;
    e["tolerance"] = x.tolerance;
    e["upper_bound"] = x.upper_bound;
    e["passed"] = x.passed;
    m.append(e);
  }
  d["measurements"] = m;
  return d;
}

ProjectConfig make_config(const std::string& preset, const py::dict& overrides) {
  ProjectConfig c;
  if (preset == "desk") {
    c = desk_config();
  } else if (preset == "tractable") {
    c = tractable_config();
  } else {
    fail(ErrorKind::InvalidInput, "unknown preset '" + preset + "'");
  }
  for (const auto& kv : overrides) set_value(c, py::str(kv.first), py::str(kv.second));
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Grasp planning by simulation-based inference";

  py::register_exception<Error>(m, "GsbiError", PyExc_RuntimeError);

  py::class_<ProjectConfig>(m, "Config")
      .def(py::init([](const std::string& preset, const py::dict& overrides) { return make_config(preset, overrides); }),
           py::arg("preset") = "desk", py::arg("overrides") = py::dict())
      .def_static("from_text", [](const std::string& text) { return parse_config(text); })
      .def("set", [](ProjectConfig& c, const std::string& k, const std::string& v) { set_value(c, k, v); })
      .def("to_text", [](const ProjectConfig& c) { return to_text(c); })
      .def("data_hash", [](const ProjectConfig& c) { return data_config_hash(c); })
      .def_readwrite("seed", &ProjectConfig::seed)
      .def_readwrite("episodes", &ProjectConfig::episodes)
      .def_readwrite("grasps_per_episode", &ProjectConfig::grasps_per_episode);

  py::class_<RatioEnsemble>(m, "Ensemble")
      .def_static("load", &load_ensemble)
      .def("save", [](const RatioEnsemble& e, const std::string& p) { save_ensemble(p, e); })
      .def("__len__", [](const RatioEnsemble& e) { return e.members.size(); });

  m.def("project_to_tangent", [](const Vec4& q, const Vec4& v) { return project_to_tangent(q, v); });
  m.def("exp_map", [](const Vec4& q, const Vec4& t) { return Vec4(exp_map(quat(q), t).coeffs()); });
  m.def("geodesic_distance", [](const Vec4& a, const Vec4& b) { return geodesic_distance(quat(a), quat(b)); });
  m.def(
      "riemannian_step",
      [](const Vec3& x, const Vec4& q, const Vec3& gx, const Vec4& gq, double alpha_pos, double alpha_rot) {
        const ProductPoint p = riemannian_step({x, quat(q)}, HandGradient{gx, gq}, StepSizes{alpha_pos, alpha_rot});
        return py::make_tuple(Vec3(p.position), Vec4(p.orientation.coeffs()));
      },
      py::arg("position"), py::arg("quaternion"), py::arg("grad_position"), py::arg("grad_quaternion"),
      py::arg("alpha_pos") = 0.008, py::arg("alpha_rot") = 0.005);

  m.def("ps_log_density", [](const Vec4& q, const Vec4& mu, double kappa) {
    return ps_log_density(q, PowerSpherical(mu, kappa));
  });
  m.def("ps_log_density_grad", [](const Vec4& q, const Vec4& mu, double kappa) {
    return ps_log_density_grad(q, PowerSpherical(mu, kappa));
  });
  m.def(
      "ps_sample",
      [](const Vec4& mu, double kappa, std::size_t n, std::uint64_t seed) {
        Rng rng(seed);
        const PowerSpherical d(mu, kappa);
        Eigen::MatrixXd out(static_cast<Eigen::Index>(n), 4);
        for (std::size_t i = 0; i < n; ++i) out.row(static_cast<Eigen::Index>(i)) = ps_sample(rng, d).transpose();
        return out;
      },
      py::arg("mu"), py::arg("kappa"), py::arg("n"), py::arg("seed") = 0);
  m.def("orientation_prior_log_density",
        [](const Vec4& q, double kappa) { return mixture_log_density(q, build_orientation_prior(kappa)); },
        py::arg("q"), py::arg("kappa") = 8.0);
  m.def("log_mean_exp", [](const std::vector<double>& v) { return log_mean_exp(v); });
  m.def("wilson_interval", [](std::size_t k, std::size_t n) {
    const Interval w = wilson_interval(k, n);
    return py::make_tuple(w.low, w.high);
  });

  m.def(
      "generate",
      [](const ProjectConfig& c, const std::string& out, int threads) {
        py::gil_scoped_release release;
        const GenerateSummary s = cmd_generate(c, out, threads);
        py::gil_scoped_acquire acquire;
        py::dict d;
        d["episodes"] = s.stats.episodes;
        d["grasps"] = s.stats.grasps;
        d["successes"] = s.stats.successes;
        d["expected_rate"] = s.stats.expected_rate();
        d["balance_ok"] = s.balance_ok;
        d["config_hash"] = s.config_hash;
        return d;
      },
      py::arg("config"), py::arg("out"), py::arg("threads") = 1);
  m.def(
      "train",
      [](const ProjectConfig& c, const std::string& dataset, const std::string& out, int threads) {
        py::gil_scoped_release release;
        const TrainSummary s = cmd_train(c, dataset, out, threads);
        py::gil_scoped_acquire acquire;
        py::dict d;
        d["best_validation"] = s.best_validation;
        d["train_scenes"] = s.train_scenes;
        d["validation_scenes"] = s.validation_scenes;
        d["log_path"] = s.log_path;
        return d;
      },
      py::arg("config"), py::arg("dataset"), py::arg("out"), py::arg("threads") = 1);
  m.def(
      "infer",
      [](const ProjectConfig& c, const RatioEnsemble& e, std::uint64_t episode, const std::string& mode) {
        return infer_dict(cmd_infer_episode(c, e, episode, parse_mode(mode)));
      },
      py::arg("config"), py::arg("ensemble"), py::arg("episode"), py::arg("mode") = "map");
  m.def(
      "infer_scene",
      [](const ProjectConfig& c, const RatioEnsemble& e, const std::string& spec, const std::string& mode) {
        return infer_dict(cmd_infer(c, e, parse_scene_spec(spec), parse_mode(mode)));
      },
      py::arg("config"), py::arg("ensemble"), py::arg("scene_spec"), py::arg("mode") = "map");
  m.def(
      "benchmark",
      [](const ProjectConfig& c, const RatioEnsemble& e, std::size_t rounds, int threads) {
        BenchmarkReport r;
        {
          py::gil_scoped_release release;
          r = cmd_benchmark(c, e, rounds, threads);
        }
        py::dict d;
        d["map"] = stats_dict(r.map);
        d["mle"] = stats_dict(r.mle);
        d["prior"] = stats_dict(r.baseline);
        d["map_prior_log_density_ge_mle"] = r.map_prior_dominates;
        return d;
      },
      py::arg("config"), py::arg("ensemble"), py::arg("rounds") = 200, py::arg("threads") = 1);
  m.def(
      "verify",
      [](std::uint64_t seed, bool full, int threads) {
        VerifyOptions o;
        o.seed = seed;
        o.full = full;
        o.threads = threads;
        std::vector<CheckResult> results;
        {
          py::gil_scoped_release release;
          results = run_verification(o);
        }
        py::list out;
        for (const auto& r : results) out.append(check_dict(r));
        return out;
      },
      py::arg("seed") = 0, py::arg("full") = false, py::arg("threads") = 1);
}
