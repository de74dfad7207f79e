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

#include <cmath>

#include "bilevel/cpbo.hpp"
#include "bilevel/problem.hpp"
#include "support/oracles.hpp"

using bilevel::CentralPlane;
using bilevel::CpboConfig;
using bilevel::CpboState;
using bilevel::Vector;

namespace {

Vector scalar(double v) { return Vector::Constant(1, v); }

/// F = x^2 + y^2 with lower objective f = (y - x)^2.
std::shared_ptr<bilevel::BilevelProblem> central_toy() {
  return bilevel::make_quadratic_toy(1, {0.0}, {0.0}, {1.0});
}

CentralPlane constant_plane(double a, double b, double kappa) {
  CentralPlane plane;
  plane.a = scalar(a);
  plane.b = scalar(b);
  plane.kappa = kappa;
  return plane;
}

}  // namespace

TEST_CASE("centralized phi: hand-computed step, fixed point and limit") {
  auto toy = central_toy();
  // One step from y0 = 0 with eta = 0.25 at x = 2.
  const Vector one = bilevel::phi_estimate_centralized(*toy, scalar(2.0), 1, 0.25);
  CHECK(one[0] == Catch::Approx(1.0));

  const Vector zero = bilevel::phi_estimate_centralized(*toy, scalar(0.0), 1, 0.25);
  CHECK(zero.norm() == 0.0);

  // Many small steps approach argmin_y (y - x)^2 = x.
  const Vector limit =
      bilevel::phi_estimate_centralized(*toy, scalar(0.8), 500, 0.1);
  CHECK(limit[0] == Catch::Approx(0.8).margin(1e-3));
}

TEST_CASE("centralized h gradient matches finite differences") {
  auto toy = central_toy();
  for (int rounds : {1, 4}) {
    CpboConfig cfg;
    cfg.phi_rounds = rounds;
    cfg.phi_step = 0.2;
    bilevel::Rng rng(55);
    for (int trial = 0; trial < 30; ++trial) {
      const Vector x = oracle::random_vector(rng, 1);
      const Vector y = oracle::random_vector(rng, 1);
      const auto grad = bilevel::central_h_gradient(*toy, x, y, cfg);
      CHECK(grad.value ==
            Catch::Approx(bilevel::central_h_value(*toy, x, y, cfg)).margin(1e-12));
      const Vector dx_fd = oracle::central_diff_grad(
          [&](const Vector& p) { return bilevel::central_h_value(*toy, p, y, cfg); },
          x);
      REQUIRE(oracle::rel_err(dx_fd, grad.dx) < 1e-4);
      const Vector dy_fd = oracle::central_diff_grad(
          [&](const Vector& p) { return bilevel::central_h_value(*toy, x, p, cfg); },
          y);
      REQUIRE(oracle::rel_err(dy_fd, grad.dy) < 1e-4);
    }
  }
}

TEST_CASE("phase 1 without planes is plain gradient descent") {
  auto toy = central_toy();
  CpboConfig cfg;
  cfg.eta_x = 0.1;
  cfg.eta_y = 0.1;
  CpboState state = CpboState::zeros(toy->dims(), cfg.plane_cap);
  state.x = scalar(1.0);
  state.y = scalar(-2.0);
  bilevel::cpbo_phase1_step(state, *toy, cfg);
  // x: 1 - 0.1 * 2 * 1 = 0.8; y at the fresh x: -2 - 0.1 * 2 * (-2) = -1.6.
  CHECK(state.x[0] == Catch::Approx(0.8));
  CHECK(state.y[0] == Catch::Approx(-1.6));
  CHECK(state.t == 1);
}

TEST_CASE("phase 1 lambda clamps at zero on negative slack") {
  auto toy = central_toy();
  CpboConfig cfg;
  CpboState state = CpboState::zeros(toy->dims(), cfg.plane_cap);
  state.polytope.planes.push_back(constant_plane(0.0, 0.0, -1.0));
  state.lambda = Vector::Zero(1);
  bilevel::cpbo_phase1_step(state, *toy, cfg);
  CHECK(state.lambda[0] == 0.0);
}

TEST_CASE("penalty objective and gradients around the hinge") {
  auto toy = central_toy();
  CpboState state = CpboState::zeros(toy->dims(), 8);
  state.x = scalar(0.5);
  state.y = scalar(-0.25);

  SECTION("inactive hinge reduces to F") {
    state.polytope.planes.push_back(constant_plane(0.0, 0.0, -3.0));
    state.lambda = Vector::Constant(1, 2.0);
    CHECK(bilevel::cpbo_penalty_value(state, *toy) ==
          Catch::Approx(toy->upper_value(0, state.x, state.y)));
    const Vector gx = bilevel::cpbo_penalty_grad_x(state, *toy, state.x, state.y);
    CHECK(gx[0] == Catch::Approx(2.0 * state.x[0]));
  }

  SECTION("active hinge adds lambda slack^2") {
    state.polytope.planes.push_back(constant_plane(0.0, 0.0, 2.0));  // slack 2
    state.lambda = Vector::Constant(1, 0.5);
    CHECK(bilevel::cpbo_penalty_value(state, *toy) ==
          Catch::Approx(toy->upper_value(0, state.x, state.y) + 2.0));
  }

  SECTION("gradient is exactly F's at a zero-slack plane") {
    // slack = x - 0.5 = 0 at the state point.
    state.polytope.planes.push_back(constant_plane(1.0, 0.0, -0.5));
    state.lambda = Vector::Constant(1, 3.0);
    const Vector gx = bilevel::cpbo_penalty_grad_x(state, *toy, state.x, state.y);
    CHECK(gx[0] == Catch::Approx(2.0 * state.x[0]));
  }

  SECTION("finite differences across the kink") {
    state.polytope.planes.push_back(constant_plane(1.0, -0.5, 0.3));
    state.polytope.planes.push_back(constant_plane(-0.7, 0.2, -0.1));
    state.lambda = (Vector(2) << 0.8, 1.7).finished();
    bilevel::Rng rng(19);
    for (int trial = 0; trial < 40; ++trial) {
      // Half the trials sit right next to the first plane's boundary.
      Vector x = oracle::random_vector(rng, 1);
      Vector y = oracle::random_vector(rng, 1);
      if (trial % 2 == 0) {
        y[0] = (0.3 + x[0]) / 0.5 + rng.uniform(-1e-7, 1e-7);
      }
      const Vector gx = bilevel::cpbo_penalty_grad_x(state, *toy, x, y);
      const Vector gy = bilevel::cpbo_penalty_grad_y(state, *toy, x, y);
      CpboState probe = state;
      const Vector gx_fd = oracle::central_diff_grad(
          [&](const Vector& p) {
            probe.x = p;
            probe.y = y;
            return bilevel::cpbo_penalty_value(probe, *toy);
          },
          x);
      REQUIRE(oracle::rel_err(gx_fd, gx) < 1e-4);
      const Vector gy_fd = oracle::central_diff_grad(
          [&](const Vector& p) {
            probe.x = x;
            probe.y = p;
            return bilevel::cpbo_penalty_value(probe, *toy);
          },
          y);
      REQUIRE(oracle::rel_err(gy_fd, gy) < 1e-4);
    }
  }
}

TEST_CASE("phase 2 monotonically decreases the penalty objective") {
  auto toy = central_toy();
  CpboConfig cfg;
  cfg.eta_x = 0.1;
  cfg.eta_y = 0.1;
  CpboState state = CpboState::zeros(toy->dims(), 8);
  state.x = scalar(1.5);
  state.y = scalar(-1.0);
  state.polytope.planes.push_back(constant_plane(1.0, 0.4, 0.2));
  state.polytope.planes.push_back(constant_plane(-0.3, 0.9, -0.4));
  state.lambda = (Vector(2) << 0.6, 1.1).finished();
  double prev = bilevel::cpbo_penalty_value(state, *toy);
  for (int step = 0; step < 500; ++step) {
    bilevel::cpbo_phase2_step(state, *toy, cfg);
    const double now = bilevel::cpbo_penalty_value(state, *toy);
    REQUIRE(now <= prev + 1e-10);
    prev = now;
  }
}

TEST_CASE("maintenance drops doubly-zero duals and adds violated planes") {
  auto toy = central_toy();
  CpboConfig cfg;
  cfg.maintenance_period = 1;
  cfg.epsilon = 0.1;
  CpboState state = CpboState::zeros(toy->dims(), 8);
  state.x = scalar(2.0);
  state.y = scalar(3.0);  // h = (3 - phi(2))^2 > eps
  state.t = 1;

  state.polytope.planes.push_back(constant_plane(0.0, 0.0, -1.0));
  state.lambda = Vector::Zero(1);
  const Vector lambda_prev = Vector::Zero(1);

  CHECK(bilevel::cpbo_maintenance(state, *toy, cfg, lambda_prev));
  // The inert plane went away, the separating plane for (2, 3) came in.
  REQUIRE(state.polytope.size() == 1);
  CHECK(state.lambda[0] == 0.0);
  CHECK(bilevel::central_plane_slack(state.polytope.planes[0], state.x, state.y) >
        0.0);
}

TEST_CASE("run_cpbo solves the toy bilevel problem") {
  auto toy = central_toy();
  CpboConfig cfg;
  cfg.phi_rounds = 1;
  cfg.phi_step = 0.1;
  cfg.freeze_after = 100;
  cfg.maintenance_period = 10;
  cfg.epsilon = 0.1;
  cfg.eta_x = 0.1;
  cfg.eta_y = 0.1;
  cfg.eta_lambda = 0.1;
  cfg.max_iterations = 2000;
  cfg.grad_tolerance = 1e-8;
  CpboState state;
  const auto trace = bilevel::run_cpbo(*toy, cfg, &state);
  REQUIRE_FALSE(trace.empty());
  CHECK(std::hypot(state.x[0], state.y[0]) <= 1e-2);

  // Determinism: the solver is a pure function of its config.
  const auto again = bilevel::run_cpbo(*toy, cfg);
  CHECK(bilevel::trace_to_csv(trace) == bilevel::trace_to_csv(again));
}

TEST_CASE("successive plane additions give monotone optimal values") {
  // F = (x - 2)^2 + (y + 1)^2 with f = (y - x)^2 and K = 1, eta = 0.1:
  // phi(x) = 0.2 x, so the unconstrained optimum (2, -1) violates
  // h = (y - 0.2 x)^2 <= eps and cuts keep arriving. Each approximate
  // problem is solved exactly by the active-set QP oracle.
  auto toy = bilevel::make_quadratic_toy(1, {2.0}, {-1.0}, {1.0});
  CpboConfig cfg;
  cfg.phi_rounds = 1;
  cfg.phi_step = 0.1;
  cfg.epsilon = 1e-3;

  bilevel::Matrix Q = 2.0 * bilevel::Matrix::Identity(2, 2);
  const Vector q = (Vector(2) << -4.0, 2.0).finished();
  const double objective_const = 5.0;  // 2^2 + 1^2

  std::vector<CentralPlane> planes;
  std::vector<double> values;
  int additions = 0;
  for (int round = 0; round < 9; ++round) {
    bilevel::Matrix A(static_cast<Eigen::Index>(planes.size()), 2);
    Vector b(static_cast<Eigen::Index>(planes.size()));
    for (std::size_t l = 0; l < planes.size(); ++l) {
      A(static_cast<Eigen::Index>(l), 0) = planes[l].a[0];
      A(static_cast<Eigen::Index>(l), 1) = planes[l].b[0];
      b[static_cast<Eigen::Index>(l)] = planes[l].kappa;
    }
    const auto solution = oracle::solve_qp(Q, q, A, b);
    REQUIRE(solution.has_value());
    values.push_back(solution->value + objective_const);

    const Vector x = solution->point.segment(0, 1);
    const Vector y = solution->point.segment(1, 1);
    const auto grad = bilevel::central_h_gradient(*toy, x, y, cfg);
    if (grad.value <= cfg.epsilon) break;
    CentralPlane plane;
    plane.a = grad.dx;
    plane.b = grad.dy;
    plane.kappa = grad.value - cfg.epsilon - grad.dx.dot(x) - grad.dy.dot(y);
    planes.push_back(plane);
    ++additions;
  }
  REQUIRE(additions >= 5);
  for (std::size_t k = 1; k < values.size(); ++k) {
    REQUIRE(values[k] >= values[k - 1] - 1e-6);
  }
  // The relaxed optimum costs strictly more than the unconstrained one.
  CHECK(values.back() > values.front());
}

TEST_CASE("run_cpbo with T1 = 0 and no planes is pure descent on F") {
  // F = (x - 2)^2 + (y - 1)^2 keeps the optimum away from the zero start.
  auto toy = bilevel::make_quadratic_toy(1, {2.0}, {1.0}, {1.0});
  CpboConfig cfg;
  cfg.freeze_after = 0;
  cfg.eta_x = 0.2;
  cfg.eta_y = 0.2;
  cfg.max_iterations = 50;
  cfg.grad_tolerance = 0.0;
  const auto trace = bilevel::run_cpbo(*toy, cfg);
  REQUIRE(trace.size() == 50);
  for (std::size_t i = 1; i < trace.size(); ++i) {
    REQUIRE(trace[i].upper <= trace[i - 1].upper + 1e-12);
    REQUIRE(trace[i].planes == 0);
  }
}
