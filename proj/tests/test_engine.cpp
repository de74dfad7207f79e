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

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>

#include "bilevel/engine.hpp"
#include "bilevel/problem.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using bilevel::DelayModel;
using bilevel::Polytope;
using bilevel::PrimalDualState;
using bilevel::RunConfig;
using bilevel::StepSizes;
using bilevel::TraceRow;
using bilevel::Vector;
using bilevel::WorkerSnapshot;

namespace {

Vector scalar(double v) { return Vector::Constant(1, v); }

RunConfig toy_config(int workers) {
  RunConfig cfg;
  cfg.active_target = std::max(1, workers / 2);
  cfg.staleness_bound = 5;
  cfg.steps = {0.05, 0.05, 0.05, 0.05, 0.1, 0.5};
  cfg.schedule.eta_lambda = 0.1;
  cfg.schedule.eta_theta = 0.5;
  cfg.max_iterations = 5000;
  cfg.gap_tolerance = 1e-3;
  cfg.seed = 7;
  return cfg;
}

std::shared_ptr<bilevel::BilevelProblem> flat_toy(int workers) {
  return bilevel::make_quadratic_toy(workers, std::vector<double>(workers, 1.0),
                                     std::vector<double>(workers, 0.0),
                                     std::vector<double>(workers, 0.1));
}

}  // namespace

TEST_CASE("sample_delay: degenerate, scaled and heavy-tailed cases") {
  bilevel::Rng rng(1);
  DelayModel constant;
  constant.mu_log = std::log(2.0);
  constant.sigma_log = 0.0;
  CHECK(bilevel::sample_delay(constant, 0, rng) == Catch::Approx(2.0));

  DelayModel straggler = constant;
  straggler.multipliers = {1.0, 4.0};
  CHECK(bilevel::sample_delay(straggler, 1, rng) == Catch::Approx(8.0));

  DelayModel heavy;  // LN(3.5, 1): mean = exp(3.5 + 0.5)
  double sum = 0.0;
  bilevel::Rng mc(99);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) sum += bilevel::sample_delay(heavy, 0, mc);
  const double mean = sum / draws;
  CHECK(mean == Catch::Approx(std::exp(4.0)).epsilon(0.05));
}

TEST_CASE("select_active picks earliest completions plus forced workers") {
  std::vector<WorkerSnapshot> workers(4);
  const double times[] = {3.0, 1.0, 2.0, 5.0};
  for (int i = 0; i < 4; ++i) {
    workers[static_cast<std::size_t>(i)].completion_time = times[i];
    workers[static_cast<std::size_t>(i)].t_hat = 10;
  }

  SECTION("order statistics") {
    const auto active = bilevel::select_active(workers, 2, 100, 11);
    CHECK(active == std::vector<int>{1, 2});
  }

  SECTION("staleness forcing overrides completion order") {
    workers[3].t_hat = 11 - 7;  // staleness would reach tau = 7
    const auto active = bilevel::select_active(workers, 2, 7, 11);
    CHECK(active == std::vector<int>{1, 2, 3});
  }

  SECTION("S = N selects everyone") {
    const auto active = bilevel::select_active(workers, 4, 100, 11);
    CHECK(active == std::vector<int>{0, 1, 2, 3});
  }
}

TEST_CASE("worker_step follows the stale snapshot") {
  // grad G_x at x=0 is 2 (a = -1), theta snapshot adds 1.
  auto toy = bilevel::make_quadratic_toy(1, {-1.0}, {0.0}, {1.0});
  StepSizes steps;
  steps.eta_x = 0.1;
  steps.eta_y = 0.1;
  WorkerSnapshot snap;
  snap.theta = scalar(1.0);
  snap.lambda = Vector::Zero(0);
  Polytope empty;

  const auto [x1, y1] = bilevel::worker_step(*toy, 0, snap, scalar(0.0),
                                             scalar(0.0), steps, empty);
  CHECK(x1[0] == Catch::Approx(-0.3));

  // At the local minimizer with zero duals nothing moves.
  WorkerSnapshot idle;
  idle.theta = scalar(0.0);
  idle.lambda = Vector::Zero(0);
  const auto [x2, y2] = bilevel::worker_step(*toy, 0, idle, scalar(-1.0),
                                             scalar(0.0), steps, empty);
  CHECK(x2[0] == Catch::Approx(-1.0));
  CHECK(y2[0] == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("master_step: Gauss-Seidel order and the second branches") {
  auto zero = fixtures::zero_centered_toy(2);
  bilevel::RegSchedule schedule;
  schedule.eta_lambda = 0.1;
  schedule.eta_theta = 0.1;
  StepSizes steps;
  steps.eta_lambda = 0.1;
  bilevel::DualBounds bounds;

  SECTION("all master gradients zero leaves v, z, theta in place") {
    PrimalDualState state = PrimalDualState::zeros(zero->dims());
    state.v = scalar(0.4);
    state.x = {scalar(0.4), scalar(0.4)};
    Polytope empty;
    bilevel::master_step(state, {0, 1}, empty, *zero, steps, schedule, bounds);
    CHECK(state.v[0] == Catch::Approx(0.4));
    CHECK(state.z[0] == Catch::Approx(0.0).margin(1e-15));
    CHECK(state.theta[0].norm() == 0.0);
    CHECK(state.t == 1);
  }

  SECTION("lambda ascends on the fresh slack") {
    PrimalDualState state = PrimalDualState::zeros(zero->dims(), 1);
    state.v = scalar(2.0);
    state.x = {scalar(2.0), scalar(2.0)};
    Polytope polytope;
    bilevel::CuttingPlane plane;
    plane.a = scalar(1.0);
    plane.b = {Vector::Zero(1), Vector::Zero(1)};
    plane.c = Vector::Zero(1);
    plane.kappa = -1.0;
    polytope.planes.push_back(plane);
    const Vector lambda_prev =
        bilevel::master_step(state, {0, 1}, polytope, *zero, steps, schedule, bounds);
    CHECK(lambda_prev[0] == 0.0);
    CHECK(state.lambda[0] == Catch::Approx(0.1));
  }

  SECTION("theta of inactive workers never moves") {
    PrimalDualState state = PrimalDualState::zeros(zero->dims());
    state.x = {scalar(5.0), scalar(-3.0)};  // both differ from v
    Polytope empty;
    bilevel::master_step(state, {0}, empty, *zero, steps, schedule, bounds);
    CHECK(state.theta[0].norm() > 0.0);
    CHECK(state.theta[1].norm() == 0.0);
  }
}

TEST_CASE("plane_maintenance honors the guard and the add rule") {
  auto toy = fixtures::toy_two_workers();
  RunConfig cfg = toy_config(2);
  cfg.maintenance_period = 4;
  cfg.freeze_after = 100;
  cfg.epsilon = 0.1;
  cfg.lower.step_y = 0.5;

  // State at (v=1, y=(0,0), z=0): h = 5 > eps.
  PrimalDualState state = PrimalDualState::zeros(toy->dims());
  state.v = scalar(1.0);
  Polytope polytope;
  polytope.cap = cfg.plane_cap;

  SECTION("guard: wrong phase is a no-op") {
    state.t = 5;  // 5 mod 4 != 0
    const auto result =
        bilevel::plane_maintenance(state, polytope, *toy, cfg, state.lambda);
    CHECK_FALSE(result.ran);
    CHECK(polytope.size() == 0);
  }

  SECTION("guard: past T1 is a no-op") {
    state.t = 104;  // multiple of 4 but t-1 >= T1
    const auto result =
        bilevel::plane_maintenance(state, polytope, *toy, cfg, state.lambda);
    CHECK_FALSE(result.ran);
  }

  SECTION("violated point appends one plane with a zero dual") {
    state.t = 4;
    const auto result =
        bilevel::plane_maintenance(state, polytope, *toy, cfg, state.lambda);
    CHECK(result.ran);
    CHECK(result.added);
    REQUIRE(polytope.size() == 1);
    CHECK(state.lambda[0] == 0.0);
  }

  SECTION("feasible point with active duals changes nothing") {
    state.t = 4;
    state.v = scalar(0.0);  // phi(0) = 0 and the point is all zeros: h = 0
    const auto result =
        bilevel::plane_maintenance(state, polytope, *toy, cfg, state.lambda);
    CHECK(result.ran);
    CHECK_FALSE(result.added);
    CHECK(result.dropped == 0);
    CHECK(polytope.size() == 0);
  }
}

TEST_CASE("run_adbo converges on the toy within the budget") {
  auto toy = flat_toy(2);
  RunConfig cfg = toy_config(2);
  cfg.active_target = 1;
  const auto trace = bilevel::run_adbo(*toy, cfg);
  REQUIRE_FALSE(trace.empty());
  CHECK(trace.back().gap_sq <= 1e-3);
  CHECK(trace.back().t <= 5000);
  CHECK(trace.back().upper < 0.05);
}

TEST_CASE("degenerate equivalence: S=N with constant delays matches sdbo") {
  auto toy = flat_toy(3);
  RunConfig cfg = toy_config(3);
  cfg.active_target = 3;
  cfg.delay.sigma_log = 0.0;  // constant delays
  cfg.max_iterations = 200;
  cfg.gap_tolerance = 0.0;
  const auto async_trace = bilevel::run_adbo(*toy, cfg);
  const auto sync_trace = bilevel::run_sdbo(*toy, cfg);
  CHECK(bilevel::trace_to_csv(async_trace) == bilevel::trace_to_csv(sync_trace));
}

TEST_CASE("fixed seeds reproduce traces byte for byte") {
  auto toy = flat_toy(4);
  RunConfig cfg = toy_config(4);
  cfg.max_iterations = 300;
  cfg.gap_tolerance = 0.0;
  cfg.delay.multipliers = {1.0, 1.0, 4.0, 1.0};
  const auto a = bilevel::run_adbo(*toy, cfg);
  const auto b = bilevel::run_adbo(*toy, cfg);
  CHECK(bilevel::trace_to_csv(a) == bilevel::trace_to_csv(b));

  cfg.seed = 8;
  const auto c = bilevel::run_adbo(*toy, cfg);
  CHECK(bilevel::trace_to_csv(a) != bilevel::trace_to_csv(c));
}

TEST_CASE("every worker participates at least once per staleness window") {
  auto toy = flat_toy(5);
  RunConfig cfg = toy_config(5);
  cfg.active_target = 1;
  cfg.staleness_bound = 4;
  cfg.max_iterations = 200;
  cfg.gap_tolerance = 0.0;
  const auto trace = bilevel::run_adbo(*toy, cfg);
  REQUIRE(trace.size() == 200);
  for (std::size_t start = 0; start + 4 <= trace.size(); ++start) {
    std::set<int> seen;
    for (std::size_t k = start; k < start + 4; ++k) {
      seen.insert(trace[k].active.begin(), trace[k].active.end());
    }
    REQUIRE(seen.size() == 5);
  }
}

TEST_CASE("virtual time is monotone, strictly so without forced waits") {
  auto toy = flat_toy(4);
  RunConfig cfg = toy_config(4);
  cfg.active_target = 2;
  cfg.staleness_bound = 50;  // forcing never kicks in over this horizon
  cfg.max_iterations = 150;
  cfg.gap_tolerance = 0.0;
  const auto trace = bilevel::run_adbo(*toy, cfg);
  for (std::size_t i = 1; i < trace.size(); ++i) {
    REQUIRE(trace[i].vtime > trace[i - 1].vtime);
  }

  // With stragglers and tight staleness the clock may stall but never runs
  // backwards.
  cfg.staleness_bound = 3;
  cfg.delay.multipliers = {1.0, 1.0, 6.0, 6.0};
  const auto forced = bilevel::run_adbo(*toy, cfg);
  for (std::size_t i = 1; i < forced.size(); ++i) {
    REQUIRE(forced[i].vtime >= forced[i - 1].vtime);
  }
}

TEST_CASE("binding lower level grows and shrinks the polytope in-loop") {
  // Upper pulls y toward 1 while phi(v) stays near 0.02 c v: h binds.
  auto toy = bilevel::make_quadratic_toy(2, {1.0, 1.0}, {1.0, 1.0}, {1.0, 1.0});
  RunConfig cfg = toy_config(2);
  cfg.epsilon = 0.01;
  cfg.maintenance_period = 5;
  cfg.freeze_after = 1000000;
  cfg.max_iterations = 600;
  cfg.gap_tolerance = 0.0;
  PrimalDualState state;
  Polytope polytope;
  const auto trace = bilevel::run_adbo(*toy, cfg, &state, &polytope);
  int max_planes = 0;
  double max_h = 0.0;
  for (const auto& row : trace) {
    max_planes = std::max(max_planes, row.planes);
    max_h = std::max(max_h, row.h);
  }
  CHECK(max_planes >= 1);
  CHECK(max_planes <= cfg.plane_cap);
  // The planes pull the iterate back toward the feasible region.
  CHECK(trace.back().h < max_h);
  // Duals remain nonnegative after projection.
  for (Eigen::Index l = 0; l < state.lambda.size(); ++l) {
    CHECK(state.lambda[l] >= 0.0);
  }
}

TEST_CASE("local_steps composes single worker steps against one snapshot") {
  auto toy = bilevel::make_quadratic_toy(1, {-1.0}, {0.5}, {1.0});
  StepSizes steps;
  steps.eta_x = 0.1;
  steps.eta_y = 0.1;
  WorkerSnapshot snap;
  snap.theta = scalar(0.7);
  snap.lambda = Vector::Zero(0);
  Polytope empty;
  const auto two = bilevel::worker_step(*toy, 0, snap, scalar(0.0), scalar(0.0),
                                        steps, empty, 2);
  auto once = bilevel::worker_step(*toy, 0, snap, scalar(0.0), scalar(0.0),
                                   steps, empty, 1);
  const auto twice = bilevel::worker_step(*toy, 0, snap, once.first, once.second,
                                          steps, empty, 1);
  CHECK(two.first == twice.first);
  CHECK(two.second == twice.second);
  CHECK(two.first != once.first);
}

TEST_CASE("config validation rejects malformed runs") {
  auto toy = flat_toy(3);
  RunConfig cfg = toy_config(3);

  cfg.active_target = 4;  // S > N
  CHECK_THROWS_AS(bilevel::run_adbo(*toy, cfg), bilevel::ConfigError);

  cfg = toy_config(3);
  cfg.delay.multipliers = {1.0, 2.0};  // wrong count
  CHECK_THROWS_AS(bilevel::run_adbo(*toy, cfg), bilevel::ConfigError);

  cfg = toy_config(3);
  cfg.delay.multipliers = {1.0, -2.0, 1.0};
  CHECK_THROWS_AS(bilevel::run_adbo(*toy, cfg), bilevel::ConfigError);

  cfg = toy_config(3);
  cfg.epsilon = 0.0;
  CHECK_THROWS_AS(bilevel::run_adbo(*toy, cfg), bilevel::ConfigError);
}

TEST_CASE("single-worker runs degenerate cleanly") {
  auto toy = flat_toy(1);
  RunConfig cfg = toy_config(1);
  cfg.active_target = 1;
  const auto trace = bilevel::run_adbo(*toy, cfg);
  REQUIRE_FALSE(trace.empty());
  CHECK(trace.back().gap_sq <= 1e-3);
  for (const auto& row : trace) CHECK(row.active == std::vector<int>{0});
}

TEST_CASE("sdbo pays the synchronous barrier each iteration") {
  auto toy = flat_toy(3);
  RunConfig cfg = toy_config(3);
  cfg.active_target = 3;
  cfg.delay.mu_log = std::log(2.0);
  cfg.delay.sigma_log = 0.0;
  cfg.delay.multipliers = {0.5, 1.0, 2.5};  // delays (1, 2, 5)
  cfg.max_iterations = 4;
  cfg.gap_tolerance = 0.0;
  const auto trace = bilevel::run_sdbo(*toy, cfg);
  REQUIRE(trace.size() == 4);
  for (std::size_t i = 0; i < trace.size(); ++i) {
    CHECK(trace[i].vtime == Catch::Approx(5.0 * static_cast<double>(i + 1)));
  }

  // One straggler at 4x dominates the barrier.
  cfg.delay.multipliers = {1.0, 1.0, 4.0};
  const auto straggled = bilevel::run_sdbo(*toy, cfg);
  CHECK(straggled[0].vtime == Catch::Approx(8.0));
}

TEST_CASE("adbo and sdbo agree on the toy's limit") {
  auto toy = flat_toy(4);
  RunConfig cfg = toy_config(4);
  cfg.active_target = 2;
  cfg.max_iterations = 2000;
  cfg.gap_tolerance = 0.0;
  PrimalDualState async_state;
  PrimalDualState sync_state;
  const auto async_trace = bilevel::run_adbo(*toy, cfg, &async_state);
  const auto sync_trace = bilevel::run_sdbo(*toy, cfg, &sync_state);
  const double ga = async_trace.back().gap_sq;
  const double gs = sync_trace.back().gap_sq;
  CHECK(std::max(ga, gs) <= 10.0 * std::max(std::min(ga, gs), 1e-300));
  CHECK((async_state.v - sync_state.v).norm() <= 1e-2);
  for (int i = 0; i < 4; ++i) {
    CHECK((async_state.x[static_cast<std::size_t>(i)] -
           sync_state.x[static_cast<std::size_t>(i)])
              .norm() <= 1e-2);
  }
}

TEST_CASE("warm-started phi estimation runs deterministically") {
  auto toy = bilevel::make_quadratic_toy(2, {1.0, 1.0}, {1.0, 1.0}, {1.0, 1.0});
  RunConfig cfg = toy_config(2);
  cfg.epsilon = 0.01;
  cfg.maintenance_period = 5;
  cfg.freeze_after = 1000000;
  cfg.max_iterations = 300;
  cfg.gap_tolerance = 0.0;
  cfg.warm_start_phi = true;
  cfg.lower.rounds = 4;
  const auto warm_a = bilevel::run_adbo(*toy, cfg);
  const auto warm_b = bilevel::run_adbo(*toy, cfg);
  CHECK(bilevel::trace_to_csv(warm_a) == bilevel::trace_to_csv(warm_b));
  for (const auto& row : warm_a) REQUIRE(std::isfinite(row.h));

  // The switch genuinely changes the phi path once a maintenance ran.
  cfg.warm_start_phi = false;
  const auto cold = bilevel::run_adbo(*toy, cfg);
  CHECK(bilevel::trace_to_csv(cold) != bilevel::trace_to_csv(warm_a));
}

TEST_CASE("multiple local steps per dispatch run end to end") {
  auto toy = flat_toy(3);
  RunConfig cfg = toy_config(3);
  cfg.local_steps = 3;
  const auto trace = bilevel::run_adbo(*toy, cfg);
  REQUIRE_FALSE(trace.empty());
  CHECK(trace.back().gap_sq <= 1e-3);
}

TEST_CASE("divergence carries the partial trace") {
  auto toy = flat_toy(2);
  RunConfig cfg = toy_config(2);
  cfg.steps.eta_x = 1e120;  // x blows past the finite range quickly
  cfg.steps.eta_theta = 1e120;
  cfg.max_iterations = 500;
  cfg.gap_tolerance = 0.0;
  try {
    bilevel::run_adbo(*toy, cfg);
    FAIL("expected SolverDivergence");
  } catch (const bilevel::SolverDivergence& err) {
    CHECK(std::string(err.what()).find("diverged") != std::string::npos);
    CHECK_FALSE(err.partial_trace.empty());
    CHECK(std::isfinite(err.partial_trace.back().upper));
  }
}
