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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bilevel/cutplane.hpp"
#include "bilevel/lower_level.hpp"
#include "bilevel/problem.hpp"
#include "bilevel/rng.hpp"
#include "bilevel/saddle.hpp"
#include "bilevel/trace.hpp"
#include "bilevel/types.hpp"

namespace bilevel {

/// Log-normal (communication + computation) delay in virtual-time units,
/// with optional per-worker multipliers for stragglers.
struct DelayModel {
  double mu_log = 3.5;
  double sigma_log = 1.0;
  std::vector<double> multipliers;  // empty means all ones

  double multiplier(int worker) const {
    if (multipliers.empty()) return 1.0;
    return multipliers[static_cast<std::size_t>(worker)];
  }

  void validate(int num_workers) const {
    if (sigma_log < 0.0) throw ConfigError("DelayModel: sigma_log must be >= 0");
    if (!multipliers.empty() &&
        multipliers.size() != static_cast<std::size_t>(num_workers)) {
      throw ConfigError("DelayModel: need one multiplier per worker");
    }
    for (double m : multipliers) {
      if (m <= 0.0) throw ConfigError("DelayModel: multipliers must be > 0");
    }
  }
};

/// duration = multiplier_i * exp(Normal(mu_log, sigma_log)). Each call
/// consumes exactly one normal draw, so streams stay aligned across
/// configurations.
inline double sample_delay(const DelayModel& model, int worker, Rng& rng) {
  const double n = rng.normal();
  return model.multiplier(worker) * std::exp(model.mu_log + model.sigma_log * n);
}

/// Per-worker cache of the master variables as of the worker's last
/// activation (t_hat), plus the in-flight completion time. The lambda list
/// is additionally refreshed whenever plane maintenance broadcasts to all
/// workers, so it always pairs with the current polytope.
struct WorkerSnapshot {
  Vector v;
  Vector z;
  Vector lambda;
  Vector theta;
  std::int64_t t_hat = 0;
  double completion_time = 0.0;
};

struct RunConfig {
  int active_target = 9;            // S
  int staleness_bound = 15;         // tau
  LowerConfig lower;                // K, mu, inner step sizes
  int maintenance_period = 10;      // k_pre
  std::int64_t freeze_after = 500;  // T1: no plane updates once t >= T1
  int plane_cap = 20;               // M
  double epsilon = 0.1;             // relaxation level in h <= epsilon
  StepSizes steps;
  RegSchedule schedule;
  DualBounds bounds;
  DelayModel delay;
  std::int64_t max_iterations = 100000;
  double gap_tolerance = 1e-3;
  std::uint64_t seed = 0;
  int local_steps = 1;         // worker gradient steps per dispatch
  bool warm_start_phi = false; // reuse the previous phi run as the next init

  void validate(int num_workers) const {
    if (active_target < 1 || active_target > num_workers) {
      throw ConfigError("RunConfig: need 1 <= S <= N");
    }
    if (staleness_bound < 1) throw ConfigError("RunConfig: tau must be >= 1");
    if (maintenance_period < 1) throw ConfigError("RunConfig: k_pre must be >= 1");
    if (freeze_after < 0) throw ConfigError("RunConfig: T1 must be >= 0");
    if (plane_cap < 1) throw ConfigError("RunConfig: M must be >= 1");
    if (epsilon <= 0.0) throw ConfigError("RunConfig: epsilon must be > 0");
    if (max_iterations < 1) throw ConfigError("RunConfig: need at least one iteration");
    if (gap_tolerance < 0.0) throw ConfigError("RunConfig: gap tolerance must be >= 0");
    if (local_steps < 1) throw ConfigError("RunConfig: local_steps must be >= 1");
    lower.validate();
    steps.validate();
    schedule.validate();
    delay.validate(num_workers);
  }
};

/// Picks the S earliest completions among the in-flight workers, plus every
/// worker whose staleness would reach tau at the iteration being formed
/// (the master waits for those). Returns worker ids in ascending order.
inline std::vector<int> select_active(const std::vector<WorkerSnapshot>& workers,
                                      int active_target, int staleness_bound,
                                      std::int64_t next_iteration) {
  const int n = static_cast<int>(workers.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int lhs, int rhs) {
    const double tl = workers[static_cast<std::size_t>(lhs)].completion_time;
    const double tr = workers[static_cast<std::size_t>(rhs)].completion_time;
    if (tl != tr) return tl < tr;
    return lhs < rhs;
  });
  std::vector<bool> chosen(static_cast<std::size_t>(n), false);
  for (int k = 0; k < active_target && k < n; ++k) {
    chosen[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = true;
  }
  for (int i = 0; i < n; ++i) {
    if (next_iteration - workers[static_cast<std::size_t>(i)].t_hat >= staleness_bound) {
      chosen[static_cast<std::size_t>(i)] = true;
    }
  }
  std::vector<int> active;
  for (int i = 0; i < n; ++i) {
    if (chosen[static_cast<std::size_t>(i)]) active.push_back(i);
  }
  return active;
}

/// One (or `local_steps`) gradient-descent steps of worker i on its local
/// block of the regularized Lagrangian, driven entirely by the stale
/// snapshot: theta and lambda enter from the snapshot, never from the
/// master's current state.
inline std::pair<Vector, Vector> worker_step(const BilevelProblem& problem, int i,
                                             const WorkerSnapshot& snapshot,
                                             Vector x, Vector y,
                                             const StepSizes& steps,
                                             const Polytope& polytope,
                                             int local_steps = 1,
                                             std::int64_t t_for_error = -1) {
  if (snapshot.lambda.size() != polytope.size()) {
    throw ShapeError("worker_step: snapshot duals do not match polytope");
  }
  for (int step = 0; step < local_steps; ++step) {
    const Vector gx = problem.upper_grad_x(i, x, y) + snapshot.theta;
    Vector gy = problem.upper_grad_y(i, x, y);
    for (int l = 0; l < polytope.size(); ++l) {
      gy += snapshot.lambda[l] *
            polytope.planes[static_cast<std::size_t>(l)].b[static_cast<std::size_t>(i)];
    }
    x -= steps.eta_x * gx;
    y -= steps.eta_y * gy;
  }
  if (!x.allFinite() || !y.allFinite()) {
    throw DivergenceError("worker " + std::to_string(i) + " diverged at iteration " +
                          std::to_string(t_for_error));
  }
  return {std::move(x), std::move(y)};
}

/// Gauss-Seidel master update. Expects state.x / state.y to already hold
/// the fresh worker results for the active set; updates v with the old
/// (z, lambda, theta), z with the new v, each lambda with the new (v, z),
/// then theta (active workers only) and projects the duals. Bumps state.t.
/// Returns the pre-update lambda, which the drop rule needs later.
inline Vector master_step(PrimalDualState& state, const std::vector<int>& active,
                          const Polytope& polytope, const BilevelProblem& problem,
                          const StepSizes& steps, const RegSchedule& schedule,
                          const DualBounds& bounds) {
  state.check_against(polytope);
  if (active.empty()) throw ConfigError("master_step: empty active set");
  const Vector lambda_prev = state.lambda;

  state.v -= steps.eta_v *
             grad_block(VarBlock::kV, 0, state, polytope, problem, schedule);
  state.z -= steps.eta_z *
             grad_block(VarBlock::kZ, 0, state, polytope, problem, schedule);

  const double c1 = reg_c1(schedule, state.t);
  Vector lambda_next = state.lambda;
  for (int l = 0; l < polytope.size(); ++l) {
    const double slack = plane_slack(polytope.planes[static_cast<std::size_t>(l)],
                                     state.v, state.y, state.z);
    lambda_next[l] += steps.eta_lambda * (slack - c1 * state.lambda[l]);
  }
  state.lambda = std::move(lambda_next);

  const double c2 = reg_c2(schedule, state.t);
  for (int i : active) {
    auto& th = state.theta[static_cast<std::size_t>(i)];
    th += steps.eta_theta *
          ((state.x[static_cast<std::size_t>(i)] - state.v) - c2 * th);
  }

  state = project_duals(std::move(state), bounds);

  if (!state.v.allFinite() || !state.z.allFinite() || !state.lambda.allFinite()) {
    throw DivergenceError("master update diverged at iteration " +
                          std::to_string(state.t + 1));
  }
  for (const auto& th : state.theta) {
    if (!th.allFinite()) {
      throw DivergenceError("master update diverged at iteration " +
                            std::to_string(state.t + 1));
    }
  }
  state.t += 1;
  return lambda_prev;
}

struct MaintenanceResult {
  bool ran = false;
  int dropped = 0;
  bool added = false;
};

/// Plane maintenance, guarded by ((t+1) mod k_pre == 0 and t < T1) where t
/// is the pre-update iteration counter (state.t is already t+1 here):
/// recompute phi(v), drop planes whose duals were zero at the two most
/// recent iterations, and append a separating plane when the current point
/// violates h <= epsilon. The caller must then refresh every worker's
/// cached lambda list.
inline MaintenanceResult plane_maintenance(PrimalDualState& state, Polytope& polytope,
                                           const BilevelProblem& problem,
                                           const RunConfig& cfg,
                                           const Vector& lambda_prev,
                                           PhiInit* warm_init = nullptr) {
  MaintenanceResult result;
  const std::int64_t t_before = state.t - 1;
  if (state.t % cfg.maintenance_period != 0 || t_before >= cfg.freeze_after) {
    return result;
  }
  result.ran = true;

  const int before = polytope.size();
  auto [kept, duals] = drop_inactive(polytope, lambda_prev, state.lambda);
  result.dropped = before - kept.size();
  polytope = std::move(kept);
  state.lambda = std::move(duals);

  const PhiInit init = warm_init != nullptr ? *warm_init : PhiInit{};
  PhiResult phi;
  const HGradient hg =
      h_gradient(problem, state.v, state.y, state.z, cfg.lower, init, &phi);
  if (warm_init != nullptr && cfg.warm_start_phi) {
    warm_init->y0 = phi.y_stack;
    warm_init->z0 = phi.z_out;
    warm_init->dual0 = phi.dual_out;
  }
  result.added = add_if_violated(polytope, state.lambda, state.v, state.y,
                                 state.z, hg, cfg.epsilon);
  return result;
}

namespace detail {

inline TraceRow make_trace_row(const PrimalDualState& state, const Polytope& polytope,
                               const BilevelProblem& problem, const RunConfig& cfg,
                               double vtime, const std::vector<int>& active,
                               const PhiInit& phi_init) {
  TraceRow row;
  row.t = state.t;
  row.vtime = vtime;
  row.upper = upper_sum(problem, state.x, state.y);
  row.h = h_value(problem, state.v, state.y, state.z, cfg.lower, phi_init);
  row.gap_sq = stationarity_gap_sq(state, polytope, problem);
  row.planes = polytope.size();
  row.c1 = reg_c1(cfg.schedule, state.t - 1);
  row.active = active;
  return row;
}

inline void check_staleness(const std::vector<WorkerSnapshot>& workers,
                            std::int64_t t, int staleness_bound) {
  for (std::size_t i = 0; i < workers.size(); ++i) {
    if (t - workers[i].t_hat > staleness_bound) {
      throw std::logic_error("staleness bound violated for worker " +
                             std::to_string(i) + " at iteration " +
                             std::to_string(t));
    }
  }
}

}  // namespace detail

/// Asynchronous run: a deterministic discrete-event simulation of the
/// parameter-server loop. Every worker is always computing against its last
/// snapshot; the master consumes the S earliest completions (plus forced
/// near-stale workers), applies the Gauss-Seidel update, maintains the
/// polytope on schedule and redispatches exactly the consumed workers.
inline std::vector<TraceRow> run_adbo(const BilevelProblem& problem,
                                      const RunConfig& cfg,
                                      PrimalDualState* final_state = nullptr,
                                      Polytope* final_polytope = nullptr) {
  const auto& dims = problem.dims();
  cfg.validate(dims.num_workers);
  const auto n = static_cast<std::size_t>(dims.num_workers);

  PrimalDualState state = PrimalDualState::zeros(dims);
  Polytope polytope;
  polytope.cap = cfg.plane_cap;
  PhiInit warm_init;

  std::vector<Rng> rngs;
  rngs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) rngs.emplace_back(cfg.seed, i);

  std::vector<WorkerSnapshot> workers(n);
  for (std::size_t i = 0; i < n; ++i) {
    workers[i].v = state.v;
    workers[i].z = state.z;
    workers[i].lambda = state.lambda;
    workers[i].theta = state.theta[i];
    workers[i].t_hat = 0;
    workers[i].completion_time =
        sample_delay(cfg.delay, static_cast<int>(i), rngs[i]);
  }

  std::vector<TraceRow> trace;
  double vtime = 0.0;
  try {
    while (state.t < cfg.max_iterations) {
      const std::vector<int> active =
          select_active(workers, cfg.active_target, cfg.staleness_bound, state.t + 1);
      double decision = vtime;
      for (int i : active) {
        decision = std::max(decision, workers[static_cast<std::size_t>(i)].completion_time);
      }
      vtime = decision;

      for (int i : active) {
        const auto wi = static_cast<std::size_t>(i);
        auto [x_new, y_new] =
            worker_step(problem, i, workers[wi], state.x[wi], state.y[wi],
                        cfg.steps, polytope, cfg.local_steps, state.t + 1);
        state.x[wi] = std::move(x_new);
        state.y[wi] = std::move(y_new);
      }

      const Vector lambda_prev = master_step(state, active, polytope, problem,
                                             cfg.steps, cfg.schedule, cfg.bounds);

      // Regular broadcast: refresh the active workers' snapshots.
      for (int i : active) {
        auto& w = workers[static_cast<std::size_t>(i)];
        w.v = state.v;
        w.z = state.z;
        w.lambda = state.lambda;
        w.theta = state.theta[static_cast<std::size_t>(i)];
        w.t_hat = state.t;
      }

      const MaintenanceResult maint = plane_maintenance(
          state, polytope, problem, cfg, lambda_prev, &warm_init);
      if (maint.ran) {
        // Maintenance broadcast reaches every worker, not only the active set.
        for (auto& w : workers) w.lambda = state.lambda;
      }

      for (int i : active) {
        auto& w = workers[static_cast<std::size_t>(i)];
        w.completion_time = vtime + sample_delay(cfg.delay, i, rngs[static_cast<std::size_t>(i)]);
      }

      detail::check_staleness(workers, state.t, cfg.staleness_bound);
      trace.push_back(detail::make_trace_row(state, polytope, problem, cfg, vtime,
                                             active, warm_init));
      if (trace.back().gap_sq <= cfg.gap_tolerance) break;
    }
  } catch (const DivergenceError& err) {
    throw SolverDivergence(err.what(), std::move(trace));
  }
  if (final_state != nullptr) *final_state = std::move(state);
  if (final_polytope != nullptr) *final_polytope = std::move(polytope);
  return trace;
}

/// Synchronous baseline: every worker is active each iteration and the
/// barrier costs the maximum of the per-worker delays.
inline std::vector<TraceRow> run_sdbo(const BilevelProblem& problem,
                                      const RunConfig& cfg,
                                      PrimalDualState* final_state = nullptr,
                                      Polytope* final_polytope = nullptr) {
  const auto& dims = problem.dims();
  cfg.validate(dims.num_workers);
  const auto n = static_cast<std::size_t>(dims.num_workers);

  PrimalDualState state = PrimalDualState::zeros(dims);
  Polytope polytope;
  polytope.cap = cfg.plane_cap;
  PhiInit warm_init;

  std::vector<Rng> rngs;
  rngs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) rngs.emplace_back(cfg.seed, i);

  std::vector<int> active(n);
  for (std::size_t i = 0; i < n; ++i) active[i] = static_cast<int>(i);

  std::vector<TraceRow> trace;
  double vtime = 0.0;
  try {
    while (state.t < cfg.max_iterations) {
      double barrier = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        barrier = std::max(barrier,
                           sample_delay(cfg.delay, static_cast<int>(i), rngs[i]));
      }
      vtime += barrier;

      for (std::size_t i = 0; i < n; ++i) {
        WorkerSnapshot snap;
        snap.v = state.v;
        snap.z = state.z;
        snap.lambda = state.lambda;
        snap.theta = state.theta[i];
        snap.t_hat = state.t;
        auto [x_new, y_new] =
            worker_step(problem, static_cast<int>(i), snap, state.x[i], state.y[i],
                        cfg.steps, polytope, cfg.local_steps, state.t + 1);
        state.x[i] = std::move(x_new);
        state.y[i] = std::move(y_new);
      }

      const Vector lambda_prev = master_step(state, active, polytope, problem,
                                             cfg.steps, cfg.schedule, cfg.bounds);
      plane_maintenance(state, polytope, problem, cfg, lambda_prev, &warm_init);

      trace.push_back(detail::make_trace_row(state, polytope, problem, cfg, vtime,
                                             active, warm_init));
      if (trace.back().gap_sq <= cfg.gap_tolerance) break;
    }
  } catch (const DivergenceError& err) {
    throw SolverDivergence(err.what(), std::move(trace));
  }
  if (final_state != nullptr) *final_state = std::move(state);
  if (final_polytope != nullptr) *final_polytope = std::move(polytope);
  return trace;
}

}  // namespace bilevel
