// One PASS/FAIL line per acceptance criterion, full protocol, fixed seed.
// Exit status 1 when any criterion fails. The lines are also written to
// acceptance_report.txt in the working directory.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <vector>

#include "gsbi/verify.hpp"

using namespace gsbi;

int main() {
  VerifyOptions o;
  o.seed = 20240607;
  o.threads = 1;
  o.full = true;
  o.work_dir = (std::filesystem::temp_directory_path() / "gsbi-acceptance").string();
  o.log = &std::cerr;

  std::vector<CheckResult> results;
  std::ofstream report("acceptance_report.txt");
  auto run = [&](CheckResult r) {
    std::ostringstream line;
    write_check(line, r);
    std::cout << line.str() << std::flush;
    report << line.str() << std::flush;
    results.push_back(std::move(r));
  };
  run(check_manifold(o.seed));
  run(check_power_spherical(o.seed));
  run(check_tsdf_sphere());
  run(check_ratio_gradient(o.seed));
  run(check_tractable_oracle(tractable_config(), TractableOptions{}, o));
  run(check_map_optimizer(o.seed));
  run(check_benchmark(desk_config(), BenchmarkOptions{}, o));
  run(check_ensemble_identity(o.seed));
  run(check_determinism(o));
  std::filesystem::remove_all(o.work_dir);

  int failed = 0;
  for (const auto& r : results) failed += r.passed ? 0 : 1;
  const std::string summary =
      failed ? "acceptance: " + std::to_string(failed) + " of 9 criteria failed" : "acceptance: all 9 criteria passed";
  std::cout << summary << '\n';
  report << summary << '\n';
  return failed ? 1 : 0;
}
