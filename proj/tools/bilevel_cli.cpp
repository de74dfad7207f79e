/* Copyright (c) 2026 The bilevel Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "bilevel/experiment.hpp"
#include "bilevel/trace.hpp"

namespace {

int do_run(const std::string& config_path, const std::string& seed_override,
           const std::string& out_override) {
  bilevel::ExperimentConfig cfg;
  try {
    cfg = bilevel::parse_config_file(config_path);
    if (!seed_override.empty()) cfg.seed = std::stoull(seed_override);
    if (!out_override.empty()) cfg.output = out_override;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 2;
  }
  const bilevel::ExperimentResult result = bilevel::run_experiment(cfg);
  if (result.exit_code == 0) {
    std::printf("%s\n", result.summary.c_str());
  } else {
    std::fprintf(stderr, "%s\n", result.summary.c_str());
  }
  return result.exit_code;
}

int do_compare(const std::string& path_a, const std::string& path_b, double target) {
  try {
    const auto trace_a = bilevel::read_trace_csv(path_a);
    const auto trace_b = bilevel::read_trace_csv(path_b);
    const auto report = bilevel::compare_runs(trace_a, trace_b, target);
    std::printf("%s\n", report.format(target).c_str());
    return 0;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deterministic distributed bilevel optimization experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string seed_override;
  std::string out_override;
  auto* run = app.add_subcommand("run", "run one experiment from a JSON config");
  run->add_option("--config", config_path, "JSON experiment config")->required();
  run->add_option("--seed", seed_override, "override the config seed");
  run->add_option("--out", out_override, "override the trace output path");

  std::string path_a;
  std::string path_b;
  double target = 0.0;
  auto* compare = app.add_subcommand("compare", "compare two traces by time-to-target");
  compare->add_option("--a", path_a, "first trace CSV")->required();
  compare->add_option("--b", path_b, "second trace CSV")->required();
  compare->add_option("--target", target, "target objective value F")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;  // usage problems fall under config errors
  }

  if (run->parsed()) return do_run(config_path, seed_override, out_override);
  return do_compare(path_a, path_b, target);
}
