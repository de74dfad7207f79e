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

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bilevel/cutplane.hpp"
#include "bilevel/problem.hpp"
#include "bilevel/trace.hpp"
#include "bilevel/types.hpp"

namespace bilevel {

// The centralized solver treats an N=1 BilevelProblem as F(x, y) = G_1 and
// f(x, y') = g_1, with x standing in for the consensus variable.

/// Linear constraint a^T x + b^T y + kappa <= 0 over the joint (x, y) space.
struct CentralPlane {
  Vector a;  // n
  Vector b;  // m
  double kappa = 0.0;
};

struct CentralPolytope {
  std::vector<CentralPlane> planes;
  int cap = 20;

  int size() const { return static_cast<int>(planes.size()); }
};

inline double central_plane_slack(const CentralPlane& plane, const Vector& x,
                                  const Vector& y) {
  require_dim(x, plane.a.size(), "central plane x");
  require_dim(y, plane.b.size(), "central plane y");
  return plane.a.dot(x) + plane.b.dot(y) + plane.kappa;
}

struct CpboConfig {
  int phi_rounds = 1;      // K
  double phi_step = 0.1;   // inner GD step size
  std::int64_t freeze_after = 500;  // T1
  int maintenance_period = 10;      // k_pre
  int plane_cap = 20;
  double epsilon = 0.1;
  double eta_x = 0.1;
  double eta_y = 0.1;
  double eta_lambda = 0.1;
  double lambda_max = 1e3;
  std::int64_t max_iterations = 2000;
  double grad_tolerance = 1e-3;  // on ||grad_x||^2 + ||grad_y||^2 in phase 2

  void validate() const {
    if (phi_rounds < 1) throw ConfigError("CpboConfig: K must be >= 1");
    if (phi_step <= 0 || eta_x <= 0 || eta_y <= 0 || eta_lambda <= 0) {
      throw ConfigError("CpboConfig: step sizes must be > 0");
    }
    if (freeze_after < 0) throw ConfigError("CpboConfig: T1 must be >= 0");
    if (maintenance_period < 1) throw ConfigError("CpboConfig: k_pre must be >= 1");
    if (plane_cap < 1) throw ConfigError("CpboConfig: M must be >= 1");
    if (epsilon <= 0) throw ConfigError("CpboConfig: epsilon must be > 0");
    if (max_iterations < 1) throw ConfigError("CpboConfig: need at least one iteration");
  }
};

struct CpboState {
  Vector x;
  Vector y;
  Vector lambda;  // one dual per plane; frozen together with the polytope in phase 2
  CentralPolytope polytope;
  std::int64_t t = 0;

  static CpboState zeros(const ProblemDims& dims, int cap) {
    CpboState s;
    s.x = Vector::Zero(dims.upper_dim);
    s.y = Vector::Zero(dims.lower_dim);
    s.lambda = Vector::Zero(0);
    s.polytope.cap = cap;
    return s;
  }
};

namespace detail {

inline void check_centralized(const BilevelProblem& problem) {
  if (problem.dims().num_workers != 1) {
    throw ConfigError("centralized solver expects a single-worker problem");
  }
}

}  // namespace detail

/// K steps of gradient descent on the x-anchored linearization of the lower
/// objective: y_{k+1} = y_k - eta grad_y f~(x, y_k). With the anchor at the
/// passed x the linearized gradient collapses to grad_y f(x, y_k).
inline Vector phi_estimate_centralized(const BilevelProblem& problem,
                                       const Vector& x, int rounds, double step,
                                       Vector y0 = Vector()) {
  detail::check_centralized(problem);
  if (rounds < 1) throw ConfigError("phi_estimate_centralized: K must be >= 1");
  Vector y = y0.size() > 0 ? std::move(y0) : Vector::Zero(problem.dims().lower_dim);
  for (int k = 0; k < rounds; ++k) {
    y -= step * problem.lower_grad_y(0, x, y);
    if (!y.allFinite()) {
      throw DivergenceError("centralized phi diverged at round " + std::to_string(k));
    }
  }
  return y;
}

inline double central_h_value(const BilevelProblem& problem, const Vector& x,
                              const Vector& y, const CpboConfig& cfg) {
  return (y - phi_estimate_centralized(problem, x, cfg.phi_rounds, cfg.phi_step))
      .squaredNorm();
}

struct CentralHGradient {
  double value = 0.0;
  Vector dx;
  Vector dy;
};

/// h(x, y) = ||y - phi(x)||^2 with dx = -2 (dphi/dx)^T (y - phi(x)). For
/// K = 1 the Jacobian is exact (one linearized step); for K > 1 it falls
/// back to columnwise central differences.
inline CentralHGradient central_h_gradient(const BilevelProblem& problem,
                                           const Vector& x, const Vector& y,
                                           const CpboConfig& cfg) {
  detail::check_centralized(problem);
  const Vector phi = phi_estimate_centralized(problem, x, cfg.phi_rounds, cfg.phi_step);
  const Vector residual = y - phi;
  Matrix jac;
  if (cfg.phi_rounds == 1) {
    jac = -cfg.phi_step * problem.mixed_jac(0, x, Vector::Zero(problem.dims().lower_dim));
  } else {
    const double h = 1e-6 * (1.0 + x.norm());
    jac.resize(problem.dims().lower_dim, problem.dims().upper_dim);
    for (int col = 0; col < problem.dims().upper_dim; ++col) {
      Vector xp = x, xm = x;
      xp[col] += h;
      xm[col] -= h;
      jac.col(col) =
          (phi_estimate_centralized(problem, xp, cfg.phi_rounds, cfg.phi_step) -
           phi_estimate_centralized(problem, xm, cfg.phi_rounds, cfg.phi_step)) /
          (2.0 * h);
    }
  }
  CentralHGradient out;
  out.value = residual.squaredNorm();
  out.dx = -2.0 * jac.transpose() * residual;
  out.dy = 2.0 * residual;
  return out;
}

/// Phase-1 Gauss-Seidel sweep on the plain Lagrangian
/// L_p = F + sum_l lambda_l slack_l: x descends at (x^t, y^t, lambda^t),
/// y descends at (x^{t+1}, y^t, lambda^t), then each lambda ascends on the
/// fresh slack with a nonnegativity clamp. Bumps t and returns the
/// pre-ascent lambda for the drop rule.
inline Vector cpbo_phase1_step(CpboState& state, const BilevelProblem& problem,
                               const CpboConfig& cfg) {
  detail::check_centralized(problem);
  const Vector lambda_prev = state.lambda;

  Vector gx = problem.upper_grad_x(0, state.x, state.y);
  for (int l = 0; l < state.polytope.size(); ++l) {
    gx += state.lambda[l] * state.polytope.planes[static_cast<std::size_t>(l)].a;
  }
  state.x -= cfg.eta_x * gx;

  Vector gy = problem.upper_grad_y(0, state.x, state.y);
  for (int l = 0; l < state.polytope.size(); ++l) {
    gy += state.lambda[l] * state.polytope.planes[static_cast<std::size_t>(l)].b;
  }
  state.y -= cfg.eta_y * gy;

  for (int l = 0; l < state.polytope.size(); ++l) {
    const double slack = central_plane_slack(
        state.polytope.planes[static_cast<std::size_t>(l)], state.x, state.y);
    state.lambda[l] = std::min(
        std::max(state.lambda[l] + cfg.eta_lambda * slack, 0.0), cfg.lambda_max);
  }

  if (!state.x.allFinite() || !state.y.allFinite()) {
    throw DivergenceError("centralized phase-1 diverged at iteration " +
                          std::to_string(state.t + 1));
  }
  state.t += 1;
  return lambda_prev;
}

/// Squared-hinge penalty objective of phase 2:
/// L^_p = F + sum_l lambda_l [max(0, slack_l)]^2.
inline double cpbo_penalty_value(const CpboState& state,
                                 const BilevelProblem& problem) {
  double value = problem.upper_value(0, state.x, state.y);
  for (int l = 0; l < state.polytope.size(); ++l) {
    const double slack = central_plane_slack(
        state.polytope.planes[static_cast<std::size_t>(l)], state.x, state.y);
    value += state.lambda[l] * std::max(0.0, slack) * std::max(0.0, slack);
  }
  return value;
}

/// Gradient of the squared hinge is 2 lambda_l max(0, slack) (a_l | b_l),
/// continuous across slack = 0.
inline Vector cpbo_penalty_grad_x(const CpboState& state,
                                  const BilevelProblem& problem,
                                  const Vector& x, const Vector& y) {
  Vector g = problem.upper_grad_x(0, x, y);
  for (int l = 0; l < state.polytope.size(); ++l) {
    const auto& plane = state.polytope.planes[static_cast<std::size_t>(l)];
    const double slack = central_plane_slack(plane, x, y);
    if (slack > 0.0) g += 2.0 * state.lambda[l] * slack * plane.a;
  }
  return g;
}

inline Vector cpbo_penalty_grad_y(const CpboState& state,
                                  const BilevelProblem& problem,
                                  const Vector& x, const Vector& y) {
  Vector g = problem.upper_grad_y(0, x, y);
  for (int l = 0; l < state.polytope.size(); ++l) {
    const auto& plane = state.polytope.planes[static_cast<std::size_t>(l)];
    const double slack = central_plane_slack(plane, x, y);
    if (slack > 0.0) g += 2.0 * state.lambda[l] * slack * plane.b;
  }
  return g;
}

/// Phase-2 descent on the fixed-polytope penalty: x first, then y at the
/// fresh x. Returns the squared gradient norm used by the stopping rule.
inline double cpbo_phase2_step(CpboState& state, const BilevelProblem& problem,
                               const CpboConfig& cfg) {
  detail::check_centralized(problem);
  const Vector gx = cpbo_penalty_grad_x(state, problem, state.x, state.y);
  state.x -= cfg.eta_x * gx;
  const Vector gy = cpbo_penalty_grad_y(state, problem, state.x, state.y);
  state.y -= cfg.eta_y * gy;
  if (!state.x.allFinite() || !state.y.allFinite()) {
    throw DivergenceError("centralized phase-2 diverged at iteration " +
                          std::to_string(state.t + 1));
  }
  state.t += 1;
  return gx.squaredNorm() + gy.squaredNorm();
}

/// Drop/add maintenance against h(x, y) = ||y - phi(x)||^2, mirroring the
/// distributed rules; runs only in phase 1 under the (t+1) mod k_pre guard.
inline bool cpbo_maintenance(CpboState& state, const BilevelProblem& problem,
                             const CpboConfig& cfg, const Vector& lambda_prev) {
  if (state.t % cfg.maintenance_period != 0) return false;

  const auto drop = inactive_drop_mask(lambda_prev, state.lambda);
  std::vector<CentralPlane> kept;
  std::vector<double> kept_duals;
  for (int l = 0; l < state.polytope.size(); ++l) {
    if (drop[static_cast<std::size_t>(l)]) continue;
    kept.push_back(state.polytope.planes[static_cast<std::size_t>(l)]);
    kept_duals.push_back(state.lambda[l]);
  }
  state.polytope.planes = std::move(kept);
  state.lambda = Eigen::Map<Vector>(kept_duals.data(),
                                    static_cast<Eigen::Index>(kept_duals.size()));

  const CentralHGradient hg = central_h_gradient(problem, state.x, state.y, cfg);
  if (hg.value <= cfg.epsilon) return false;
  if (state.polytope.size() >= state.polytope.cap) {
    int evict = -1;
    for (Eigen::Index l = 0; l < state.lambda.size(); ++l) {
      if (std::abs(state.lambda[l]) <= kZeroDualTol) {
        evict = static_cast<int>(l);
        break;
      }
    }
    if (evict < 0) {
      BILEVEL_LOG_INFO("centralized polytope at cap %d with all duals active; skipping plane",
                       state.polytope.cap);
      return false;
    }
    state.polytope.planes.erase(state.polytope.planes.begin() + evict);
    Vector shrunk(state.lambda.size() - 1);
    shrunk << state.lambda.head(evict),
        state.lambda.tail(state.lambda.size() - evict - 1);
    state.lambda = std::move(shrunk);
  }

  CentralPlane plane;
  plane.a = hg.dx;
  plane.b = hg.dy;
  plane.kappa = hg.value - cfg.epsilon - hg.dx.dot(state.x) - hg.dy.dot(state.y);
  state.polytope.planes.push_back(std::move(plane));
  Vector grown(state.lambda.size() + 1);
  grown << state.lambda, 0.0;
  state.lambda = std::move(grown);
  return true;
}

/// Two-phase centralized run. Phase 1 (t < T1): primal-dual iterations with
/// periodic plane maintenance. Phase 2 (t >= T1): the polytope and duals
/// freeze and the iterates descend the squared-hinge penalty. Trace rows
/// use the same schema as the distributed engine, with vtime = t and an
/// empty active set.
inline std::vector<TraceRow> run_cpbo(const BilevelProblem& problem,
                                      const CpboConfig& cfg,
                                      CpboState* final_state = nullptr) {
  detail::check_centralized(problem);
  cfg.validate();
  CpboState state = CpboState::zeros(problem.dims(), cfg.plane_cap);
  std::vector<TraceRow> trace;
  try {
    while (state.t < cfg.max_iterations) {
      const bool phase1 = state.t < cfg.freeze_after;
      double grad_sq = 0.0;
      if (phase1) {
        const Vector lambda_prev = cpbo_phase1_step(state, problem, cfg);
        cpbo_maintenance(state, problem, cfg, lambda_prev);
        Vector gx = problem.upper_grad_x(0, state.x, state.y);
        Vector gy = problem.upper_grad_y(0, state.x, state.y);
        for (int l = 0; l < state.polytope.size(); ++l) {
          const auto& plane = state.polytope.planes[static_cast<std::size_t>(l)];
          gx += state.lambda[l] * plane.a;
          gy += state.lambda[l] * plane.b;
          const double slack = central_plane_slack(plane, state.x, state.y);
          grad_sq += slack * slack;
        }
        grad_sq += gx.squaredNorm() + gy.squaredNorm();
      } else {
        grad_sq = cpbo_phase2_step(state, problem, cfg);
      }

      TraceRow row;
      row.t = state.t;
      row.vtime = static_cast<double>(state.t);
      row.upper = problem.upper_value(0, state.x, state.y);
      row.h = central_h_value(problem, state.x, state.y, cfg);
      row.gap_sq = grad_sq;
      row.planes = state.polytope.size();
      row.c1 = 0.0;
      trace.push_back(std::move(row));

      if (!phase1 && grad_sq <= cfg.grad_tolerance) break;
    }
  } catch (const DivergenceError& err) {
    throw SolverDivergence(err.what(), std::move(trace));
  }
  if (final_state != nullptr) *final_state = std::move(state);
  return trace;
}

}  // namespace bilevel
