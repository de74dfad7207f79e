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

#pragma once

#include <chrono>
#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bilevel/cpbo.hpp"
#include "bilevel/dataset.hpp"
#include "bilevel/engine.hpp"
#include "bilevel/problem.hpp"
#include "bilevel/trace.hpp"
#include "bilevel/types.hpp"

namespace bilevel {

/// Fully resolved experiment manifest. JSON keys are flat and match the
/// run-config fields; file values can be overridden by CLI flags.
struct ExperimentConfig {
  std::string algorithm;  // adbo | sdbo | cpbo
  std::string problem;    // toy_quadratic | hypercleaning | regcoef
  std::string output = "trace.csv";
  std::uint64_t seed = 0;

  // distributed run
  int workers = 18;          // N
  int active_target = 9;     // S
  int staleness_bound = 15;  // tau
  int lower_rounds = 1;      // K
  double lower_penalty = 1.0;
  double inner_eta_y = 0.1;
  double inner_eta_z = 0.1;
  double inner_eta_phi = 0.1;
  int maintenance_period = 10;      // k_pre
  std::int64_t freeze_after = 500;  // T1
  int plane_cap = 20;               // M
  double epsilon = 0.1;
  double eta_x = 0.0;  // 0 means "use the per-problem default"
  double eta_y = 0.0;
  double eta_v = 0.0;
  double eta_z = 0.0;
  double eta_lambda = 0.1;
  double eta_theta = 0.0;
  double c1_floor = 1e-6;
  double c2_floor = 1e-6;
  double lambda_max = 1e3;
  double theta_max = 1e3;
  double delay_mu_log = 3.5;
  double delay_sigma_log = 1.0;
  std::vector<int> stragglers;
  double straggler_multiplier = 4.0;
  std::int64_t max_iterations = 100000;
  double gap_tolerance = 1e-3;
  int local_steps = 1;
  bool warm_start_phi = false;

  // centralized run
  double phi_step = 0.1;

  // problem source (exactly one of dataset file / synthetic generator for
  // the data problems; the toy needs neither)
  std::vector<double> toy_a;
  std::vector<double> toy_b;
  std::vector<double> toy_c;
  std::string dataset_path;
  std::string dataset_format = "csv";
  bool csv_has_header = false;
  int synthetic_samples = 500;
  int synthetic_features = 20;
  std::uint64_t data_seed = 1234;
  double val_fraction = 0.5;
  double corruption_rate = 0.0;
  double c_reg = 1e-3;
};

namespace detail {

// Desk-tuned toy defaults; the dataset problems default to the published
// step-size row for image benchmarks.
inline void apply_step_defaults(ExperimentConfig& cfg) {
  const bool toy = cfg.problem == "toy_quadratic";
  if (cfg.eta_x == 0.0) cfg.eta_x = toy ? 0.05 : 0.001;
  if (cfg.eta_y == 0.0) cfg.eta_y = toy ? 0.05 : 0.02;
  if (cfg.eta_v == 0.0) cfg.eta_v = toy ? 0.05 : 0.001;
  if (cfg.eta_z == 0.0) cfg.eta_z = toy ? 0.05 : 0.02;
  if (cfg.eta_theta == 0.0) cfg.eta_theta = toy ? 0.5 : 0.001;
}

template <typename T>
T get_as(const nlohmann::json& value, const std::string& key) {
  try {
    return value.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

inline double get_step(const nlohmann::json& value, const std::string& key) {
  const double step = get_as<double>(value, key);
  if (step <= 0.0) throw ConfigError("config key '" + key + "' must be > 0");
  return step;
}

}  // namespace detail

inline ExperimentConfig parse_config_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig cfg;
  bool has_algorithm = false;
  bool has_problem = false;
  bool has_workers = false;
  bool explicit_synthetic = false;
  for (const auto& [key, value] : doc.items()) {
    if (key == "algorithm") {
      cfg.algorithm = detail::get_as<std::string>(value, key);
      has_algorithm = true;
    } else if (key == "problem") {
      cfg.problem = detail::get_as<std::string>(value, key);
      has_problem = true;
    } else if (key == "output") {
      cfg.output = detail::get_as<std::string>(value, key);
    } else if (key == "seed") {
      cfg.seed = detail::get_as<std::uint64_t>(value, key);
    } else if (key == "N") {
      cfg.workers = detail::get_as<int>(value, key);
      has_workers = true;
    } else if (key == "S") {
      cfg.active_target = detail::get_as<int>(value, key);
    } else if (key == "tau") {
      cfg.staleness_bound = detail::get_as<int>(value, key);
    } else if (key == "K") {
      cfg.lower_rounds = detail::get_as<int>(value, key);
    } else if (key == "mu") {
      cfg.lower_penalty = detail::get_as<double>(value, key);
    } else if (key == "inner_eta_y") {
      cfg.inner_eta_y = detail::get_as<double>(value, key);
    } else if (key == "inner_eta_z") {
      cfg.inner_eta_z = detail::get_as<double>(value, key);
    } else if (key == "inner_eta_phi") {
      cfg.inner_eta_phi = detail::get_as<double>(value, key);
    } else if (key == "k_pre") {
      cfg.maintenance_period = detail::get_as<int>(value, key);
    } else if (key == "T1") {
      cfg.freeze_after = detail::get_as<std::int64_t>(value, key);
    } else if (key == "M") {
      cfg.plane_cap = detail::get_as<int>(value, key);
    } else if (key == "epsilon") {
      cfg.epsilon = detail::get_as<double>(value, key);
    } else if (key == "eta_x") {
      cfg.eta_x = detail::get_step(value, key);
    } else if (key == "eta_y") {
      cfg.eta_y = detail::get_step(value, key);
    } else if (key == "eta_v") {
      cfg.eta_v = detail::get_step(value, key);
    } else if (key == "eta_z") {
      cfg.eta_z = detail::get_step(value, key);
    } else if (key == "eta_lambda") {
      cfg.eta_lambda = detail::get_step(value, key);
    } else if (key == "eta_theta") {
      cfg.eta_theta = detail::get_step(value, key);
    } else if (key == "c1_floor") {
      cfg.c1_floor = detail::get_as<double>(value, key);
    } else if (key == "c2_floor") {
      cfg.c2_floor = detail::get_as<double>(value, key);
    } else if (key == "lambda_max") {
      cfg.lambda_max = detail::get_as<double>(value, key);
    } else if (key == "theta_max") {
      cfg.theta_max = detail::get_as<double>(value, key);
    } else if (key == "delay_mu_log") {
      cfg.delay_mu_log = detail::get_as<double>(value, key);
    } else if (key == "delay_sigma_log") {
      cfg.delay_sigma_log = detail::get_as<double>(value, key);
    } else if (key == "stragglers") {
      cfg.stragglers = detail::get_as<std::vector<int>>(value, key);
    } else if (key == "straggler_multiplier") {
      cfg.straggler_multiplier = detail::get_as<double>(value, key);
    } else if (key == "max_iterations") {
      cfg.max_iterations = detail::get_as<std::int64_t>(value, key);
    } else if (key == "gap_tolerance") {
      cfg.gap_tolerance = detail::get_as<double>(value, key);
    } else if (key == "local_steps") {
      cfg.local_steps = detail::get_as<int>(value, key);
    } else if (key == "warm_start_phi") {
      cfg.warm_start_phi = detail::get_as<bool>(value, key);
    } else if (key == "phi_step") {
      cfg.phi_step = detail::get_as<double>(value, key);
    } else if (key == "toy_a") {
      cfg.toy_a = detail::get_as<std::vector<double>>(value, key);
    } else if (key == "toy_b") {
      cfg.toy_b = detail::get_as<std::vector<double>>(value, key);
    } else if (key == "toy_c") {
      cfg.toy_c = detail::get_as<std::vector<double>>(value, key);
    } else if (key == "dataset_path") {
      cfg.dataset_path = detail::get_as<std::string>(value, key);
    } else if (key == "dataset_format") {
      cfg.dataset_format = detail::get_as<std::string>(value, key);
    } else if (key == "csv_has_header") {
      cfg.csv_has_header = detail::get_as<bool>(value, key);
    } else if (key == "synthetic_samples") {
      cfg.synthetic_samples = detail::get_as<int>(value, key);
      explicit_synthetic = true;
    } else if (key == "synthetic_features") {
      cfg.synthetic_features = detail::get_as<int>(value, key);
      explicit_synthetic = true;
    } else if (key == "data_seed") {
      cfg.data_seed = detail::get_as<std::uint64_t>(value, key);
    } else if (key == "val_fraction") {
      cfg.val_fraction = detail::get_as<double>(value, key);
    } else if (key == "corruption_rate") {
      cfg.corruption_rate = detail::get_as<double>(value, key);
    } else if (key == "c_reg") {
      cfg.c_reg = detail::get_as<double>(value, key);
    } else {
      throw ConfigError("unknown config key: " + key);
    }
  }

  if (!has_algorithm) throw ConfigError("missing required key: algorithm");
  if (!has_problem) throw ConfigError("missing required key: problem");
  if (cfg.algorithm != "adbo" && cfg.algorithm != "sdbo" && cfg.algorithm != "cpbo") {
    throw ConfigError("algorithm must be one of adbo, sdbo, cpbo");
  }
  if (cfg.problem != "toy_quadratic" && cfg.problem != "hypercleaning" &&
      cfg.problem != "regcoef") {
    throw ConfigError("problem must be one of toy_quadratic, hypercleaning, regcoef");
  }
  if (cfg.algorithm == "cpbo" && !has_workers) cfg.workers = 1;
  if (cfg.algorithm == "cpbo" && cfg.workers != 1) {
    throw ConfigError("cpbo is centralized; it requires N = 1");
  }
  if (cfg.workers < 1) throw ConfigError("N must be >= 1");
  if (cfg.active_target < 1) throw ConfigError("S must be >= 1");
  if (cfg.dataset_format != "csv" && cfg.dataset_format != "libsvm") {
    throw ConfigError("dataset_format must be csv or libsvm");
  }
  if (!cfg.dataset_path.empty() && explicit_synthetic) {
    throw ConfigError("give either dataset_path or synthetic_* keys, not both");
  }
  for (int s : cfg.stragglers) {
    if (s < 0 || s >= cfg.workers) throw ConfigError("straggler id out of range");
  }
  detail::apply_step_defaults(cfg);
  return cfg;
}

inline ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& err) {
    throw ConfigError(std::string("config is not valid JSON: ") + err.what());
  }
  return parse_config_json(doc);
}

inline nlohmann::json emit_config_json(const ExperimentConfig& cfg) {
  nlohmann::json doc;
  doc["algorithm"] = cfg.algorithm;
  doc["problem"] = cfg.problem;
  doc["output"] = cfg.output;
  doc["seed"] = cfg.seed;
  doc["N"] = cfg.workers;
  doc["S"] = cfg.active_target;
  doc["tau"] = cfg.staleness_bound;
  doc["K"] = cfg.lower_rounds;
  doc["mu"] = cfg.lower_penalty;
  doc["inner_eta_y"] = cfg.inner_eta_y;
  doc["inner_eta_z"] = cfg.inner_eta_z;
  doc["inner_eta_phi"] = cfg.inner_eta_phi;
  doc["k_pre"] = cfg.maintenance_period;
  doc["T1"] = cfg.freeze_after;
  doc["M"] = cfg.plane_cap;
  doc["epsilon"] = cfg.epsilon;
  doc["eta_x"] = cfg.eta_x;
  doc["eta_y"] = cfg.eta_y;
  doc["eta_v"] = cfg.eta_v;
  doc["eta_z"] = cfg.eta_z;
  doc["eta_lambda"] = cfg.eta_lambda;
  doc["eta_theta"] = cfg.eta_theta;
  doc["c1_floor"] = cfg.c1_floor;
  doc["c2_floor"] = cfg.c2_floor;
  doc["lambda_max"] = cfg.lambda_max;
  doc["theta_max"] = cfg.theta_max;
  doc["delay_mu_log"] = cfg.delay_mu_log;
  doc["delay_sigma_log"] = cfg.delay_sigma_log;
  doc["stragglers"] = cfg.stragglers;
  doc["straggler_multiplier"] = cfg.straggler_multiplier;
  doc["max_iterations"] = cfg.max_iterations;
  doc["gap_tolerance"] = cfg.gap_tolerance;
  doc["local_steps"] = cfg.local_steps;
  doc["warm_start_phi"] = cfg.warm_start_phi;
  doc["phi_step"] = cfg.phi_step;
  if (!cfg.toy_a.empty()) doc["toy_a"] = cfg.toy_a;
  if (!cfg.toy_b.empty()) doc["toy_b"] = cfg.toy_b;
  if (!cfg.toy_c.empty()) doc["toy_c"] = cfg.toy_c;
  if (!cfg.dataset_path.empty()) {
    doc["dataset_path"] = cfg.dataset_path;
    doc["dataset_format"] = cfg.dataset_format;
    doc["csv_has_header"] = cfg.csv_has_header;
  } else {
    doc["synthetic_samples"] = cfg.synthetic_samples;
    doc["synthetic_features"] = cfg.synthetic_features;
  }
  doc["data_seed"] = cfg.data_seed;
  doc["val_fraction"] = cfg.val_fraction;
  doc["corruption_rate"] = cfg.corruption_rate;
  doc["c_reg"] = cfg.c_reg;
  return doc;
}

inline std::shared_ptr<BilevelProblem> build_problem(const ExperimentConfig& cfg) {
  if (cfg.problem == "toy_quadratic") {
    const auto n = static_cast<std::size_t>(cfg.workers);
    std::vector<double> a = cfg.toy_a.empty() ? std::vector<double>(n, 1.0) : cfg.toy_a;
    std::vector<double> b = cfg.toy_b.empty() ? std::vector<double>(n, 0.0) : cfg.toy_b;
    std::vector<double> c = cfg.toy_c.empty() ? std::vector<double>(n, 0.1) : cfg.toy_c;
    if (a.size() != n || b.size() != n || c.size() != n) {
      throw ConfigError("toy_a/toy_b/toy_c must have length N");
    }
    return make_quadratic_toy(cfg.workers, a, b, c);
  }

  Dataset data;
  if (!cfg.dataset_path.empty()) {
    const DatasetFormat format = cfg.dataset_format == "csv" ? DatasetFormat::kCsv
                                                             : DatasetFormat::kLibsvm;
    data = load_dataset(cfg.dataset_path, format, cfg.csv_has_header);
    // Data problems run a binary logistic model with +-1 labels.
    for (Eigen::Index i = 0; i < data.labels.size(); ++i) {
      if (data.labels[i] == 0) data.labels[i] = -1;
    }
  } else {
    data = make_synthetic_binary(cfg.synthetic_samples, cfg.synthetic_features,
                                 cfg.data_seed);
  }
  tag_validation_split(data, cfg.val_fraction, cfg.data_seed);
  if (cfg.corruption_rate > 0.0) {
    data = corrupt_labels(data, cfg.corruption_rate, cfg.data_seed).first;
  }
  auto shards = partition_dataset(data, cfg.workers, cfg.data_seed);
  if (cfg.problem == "hypercleaning") {
    return make_hypercleaning(std::move(shards), cfg.c_reg);
  }
  return make_regcoef(std::move(shards));
}

inline RunConfig build_run_config(const ExperimentConfig& cfg) {
  RunConfig run;
  run.active_target = cfg.active_target;
  run.staleness_bound = cfg.staleness_bound;
  run.lower.rounds = cfg.lower_rounds;
  run.lower.penalty = cfg.lower_penalty;
  run.lower.step_y = cfg.inner_eta_y;
  run.lower.step_z = cfg.inner_eta_z;
  run.lower.step_dual = cfg.inner_eta_phi;
  run.maintenance_period = cfg.maintenance_period;
  run.freeze_after = cfg.freeze_after;
  run.plane_cap = cfg.plane_cap;
  run.epsilon = cfg.epsilon;
  run.steps.eta_x = cfg.eta_x;
  run.steps.eta_y = cfg.eta_y;
  run.steps.eta_v = cfg.eta_v;
  run.steps.eta_z = cfg.eta_z;
  run.steps.eta_lambda = cfg.eta_lambda;
  run.steps.eta_theta = cfg.eta_theta;
  run.schedule.eta_lambda = cfg.eta_lambda;
  run.schedule.eta_theta = cfg.eta_theta;
  run.schedule.floor_c1 = cfg.c1_floor;
  run.schedule.floor_c2 = cfg.c2_floor;
  run.bounds.lambda_max = cfg.lambda_max;
  run.bounds.theta_max = cfg.theta_max;
  run.delay.mu_log = cfg.delay_mu_log;
  run.delay.sigma_log = cfg.delay_sigma_log;
  if (!cfg.stragglers.empty()) {
    run.delay.multipliers.assign(static_cast<std::size_t>(cfg.workers), 1.0);
    for (int s : cfg.stragglers) {
      run.delay.multipliers[static_cast<std::size_t>(s)] = cfg.straggler_multiplier;
    }
  }
  run.max_iterations = cfg.max_iterations;
  run.gap_tolerance = cfg.gap_tolerance;
  run.seed = cfg.seed;
  run.local_steps = cfg.local_steps;
  run.warm_start_phi = cfg.warm_start_phi;
  return run;
}

inline CpboConfig build_cpbo_config(const ExperimentConfig& cfg) {
  CpboConfig run;
  run.phi_rounds = cfg.lower_rounds;
  run.phi_step = cfg.phi_step;
  run.freeze_after = cfg.freeze_after;
  run.maintenance_period = cfg.maintenance_period;
  run.plane_cap = cfg.plane_cap;
  run.epsilon = cfg.epsilon;
  run.eta_x = cfg.eta_x;
  run.eta_y = cfg.eta_y;
  run.eta_lambda = cfg.eta_lambda;
  run.lambda_max = cfg.lambda_max;
  run.max_iterations = cfg.max_iterations;
  run.grad_tolerance = cfg.gap_tolerance;
  return run;
}

struct ExperimentResult {
  int exit_code = 0;
  std::vector<TraceRow> trace;
  std::string summary;
};

/// Runs the configured experiment and writes the trace CSV. Exit codes:
/// 0 success, 1 solver divergence (partial trace preserved), 2 config or
/// I/O failure (no trace).
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  ExperimentResult result;
  const auto started = std::chrono::steady_clock::now();
  try {
    const auto problem = build_problem(cfg);
    try {
      if (cfg.algorithm == "adbo") {
        result.trace = run_adbo(*problem, build_run_config(cfg));
      } else if (cfg.algorithm == "sdbo") {
        result.trace = run_sdbo(*problem, build_run_config(cfg));
      } else {
        result.trace = run_cpbo(*problem, build_cpbo_config(cfg));
      }
    } catch (const SolverDivergence& err) {
      result.trace = err.partial_trace;
      result.exit_code = 1;
      result.summary = std::string("diverged: ") + err.what();
    }
    write_trace_csv(cfg.output, result.trace);
  } catch (const DivergenceError& err) {
    result.exit_code = 1;
    result.summary = std::string("diverged: ") + err.what();
    return result;
  } catch (const std::exception& err) {
    result.exit_code = 2;
    result.summary = std::string("error: ") + err.what();
    return result;
  }
  const auto elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started);
  if (result.exit_code == 0) {
    char buf[256];
    const TraceRow last = result.trace.empty() ? TraceRow{} : result.trace.back();
    std::snprintf(buf, sizeof(buf),
                  "final F=%.6g gap_sq=%.6g vtime=%.6g wall=%.3fs rows=%zu",
                  last.upper, last.gap_sq, last.vtime, elapsed.count(),
                  result.trace.size());
    result.summary = buf;
  }
  return result;
}

/// First virtual time at which the trace's F drops to the target, if any.
inline std::optional<double> time_to_target(const std::vector<TraceRow>& trace,
                                            double target) {
  for (const auto& row : trace) {
    if (row.upper <= target) return row.vtime;
  }
  return std::nullopt;
}

struct CompareReport {
  bool a_reached = false;
  bool b_reached = false;
  double a_time = 0.0;
  double b_time = 0.0;
  double ratio = 0.0;  // a_time / b_time, meaningful when both reached

  std::string format(double target) const {
    char buf[256];
    if (!a_reached || !b_reached) {
      std::snprintf(buf, sizeof(buf),
                    "target F=%.6g: A %s, B %s", target,
                    a_reached ? "reached" : "unreached",
                    b_reached ? "reached" : "unreached");
      return buf;
    }
    std::snprintf(buf, sizeof(buf),
                  "target F=%.6g: A at vtime=%.6g, B at vtime=%.6g, ratio A/B=%.6g",
                  target, a_time, b_time, ratio);
    return buf;
  }
};

inline CompareReport compare_runs(const std::vector<TraceRow>& a,
                                  const std::vector<TraceRow>& b, double target) {
  CompareReport report;
  const auto ta = time_to_target(a, target);
  const auto tb = time_to_target(b, target);
  report.a_reached = ta.has_value();
  report.b_reached = tb.has_value();
  if (ta) report.a_time = *ta;
  if (tb) report.b_time = *tb;
  if (ta && tb && *tb != 0.0) report.ratio = *ta / *tb;
  return report;
}

}  // namespace bilevel
