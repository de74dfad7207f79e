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
#include <limits>
#include <vector>

#include "bilevel/cutplane.hpp"
#include "bilevel/problem.hpp"
#include "bilevel/types.hpp"

namespace bilevel {

/// All primal and dual iterates of the saddle problem plus the master
/// iteration counter.
struct PrimalDualState {
  VectorList x;      // N local upper variables (n each)
  VectorList y;      // N local lower variables (m each)
  Vector v;          // consensus upper variable (n)
  Vector z;          // consensus lower variable (m)
  Vector lambda;     // one dual per cutting plane
  VectorList theta;  // N consensus duals (n each)
  std::int64_t t = 0;

  static PrimalDualState zeros(const ProblemDims& dims, int planes = 0) {
    PrimalDualState s;
    s.x.assign(static_cast<std::size_t>(dims.num_workers), Vector::Zero(dims.upper_dim));
    s.y.assign(static_cast<std::size_t>(dims.num_workers), Vector::Zero(dims.lower_dim));
    s.v = Vector::Zero(dims.upper_dim);
    s.z = Vector::Zero(dims.lower_dim);
    s.lambda = Vector::Zero(planes);
    s.theta.assign(static_cast<std::size_t>(dims.num_workers), Vector::Zero(dims.upper_dim));
    return s;
  }

  void check_against(const Polytope& polytope) const {
    if (lambda.size() != polytope.size()) {
      throw ShapeError("state: dual count does not match plane count");
    }
  }
};

struct StepSizes {
  double eta_x = 0.001;
  double eta_y = 0.02;
  double eta_v = 0.001;
  double eta_z = 0.02;
  double eta_lambda = 0.1;
  double eta_theta = 0.001;

  void validate() const {
    if (eta_x <= 0 || eta_y <= 0 || eta_v <= 0 || eta_z <= 0 ||
        eta_lambda <= 0 || eta_theta <= 0) {
      throw ConfigError("StepSizes: all step sizes must be > 0");
    }
  }
};

/// Decaying dual regularization weights,
///   c1(t) = max(1 / (eta_lambda (t+1)^{1/4}), floor_c1)
/// and likewise for c2 with eta_theta. Non-increasing in t.
struct RegSchedule {
  double eta_lambda = 0.1;
  double eta_theta = 0.001;
  double floor_c1 = 1e-6;
  double floor_c2 = 1e-6;

  void validate() const {
    if (eta_lambda <= 0 || eta_theta <= 0) {
      throw ConfigError("RegSchedule: eta_lambda and eta_theta must be > 0");
    }
    if (floor_c1 < 0 || floor_c2 < 0) {
      throw ConfigError("RegSchedule: floors must be >= 0");
    }
  }
};

inline double reg_c1(const RegSchedule& schedule, std::int64_t t) {
  if (t < 0) throw ConfigError("reg_c1: t must be >= 0");
  const double raw = 1.0 / (schedule.eta_lambda *
                            std::pow(static_cast<double>(t) + 1.0, 0.25));
  return std::max(raw, schedule.floor_c1);
}

inline double reg_c2(const RegSchedule& schedule, std::int64_t t) {
  if (t < 0) throw ConfigError("reg_c2: t must be >= 0");
  const double raw = 1.0 / (schedule.eta_theta *
                            std::pow(static_cast<double>(t) + 1.0, 0.25));
  return std::max(raw, schedule.floor_c2);
}

struct DualBounds {
  double lambda_max = 1e3;
  double theta_max = 1e3;
};

/// L_p = sum_i G_i + sum_l lambda_l slack_l + sum_i theta_i^T (x_i - v).
inline double lagrangian_value(const PrimalDualState& state,
                               const Polytope& polytope,
                               const BilevelProblem& problem) {
  state.check_against(polytope);
  double value = upper_sum(problem, state.x, state.y);
  for (int l = 0; l < polytope.size(); ++l) {
    value += state.lambda[l] *
             plane_slack(polytope.planes[static_cast<std::size_t>(l)], state.v,
                         state.y, state.z);
  }
  for (std::size_t i = 0; i < state.theta.size(); ++i) {
    value += state.theta[i].dot(state.x[i] - state.v);
  }
  return value;
}

/// L~_p = L_p - (c1^t / 2) sum_l lambda_l^2 - (c2^t / 2) sum_i ||theta_i||^2.
inline double reg_lagrangian_value(const PrimalDualState& state,
                                   const Polytope& polytope,
                                   const BilevelProblem& problem,
                                   const RegSchedule& schedule) {
  double value = lagrangian_value(state, polytope, problem);
  const double c1 = reg_c1(schedule, state.t);
  const double c2 = reg_c2(schedule, state.t);
  value -= 0.5 * c1 * state.lambda.squaredNorm();
  for (const auto& th : state.theta) value -= 0.5 * c2 * th.squaredNorm();
  return value;
}

enum class VarBlock { kX, kY, kV, kZ, kLambda, kTheta };

/// Closed-form block gradient of the regularized Lagrangian (or of the
/// plain L_p when `regularized` is false: only the lambda and theta blocks
/// differ). `index` selects the worker (x/y/theta) or plane (lambda) and is
/// ignored for the v/z blocks. The lambda block comes back as a 1-vector.
inline Vector grad_block(VarBlock block, int index, const PrimalDualState& state,
                         const Polytope& polytope, const BilevelProblem& problem,
                         const RegSchedule& schedule, bool regularized = true) {
  state.check_against(polytope);
  const auto& d = problem.dims();
  const auto widx = static_cast<std::size_t>(index);
  switch (block) {
    case VarBlock::kX: {
      if (index < 0 || index >= d.num_workers) throw ShapeError("grad x: bad worker");
      return problem.upper_grad_x(index, state.x[widx], state.y[widx]) +
             state.theta[widx];
    }
    case VarBlock::kY: {
      if (index < 0 || index >= d.num_workers) throw ShapeError("grad y: bad worker");
      Vector g = problem.upper_grad_y(index, state.x[widx], state.y[widx]);
      for (int l = 0; l < polytope.size(); ++l) {
        g += state.lambda[l] * polytope.planes[static_cast<std::size_t>(l)].b[widx];
      }
      return g;
    }
    case VarBlock::kV: {
      Vector g = Vector::Zero(d.upper_dim);
      for (int l = 0; l < polytope.size(); ++l) {
        g += state.lambda[l] * polytope.planes[static_cast<std::size_t>(l)].a;
      }
      for (const auto& th : state.theta) g -= th;
      return g;
    }
    case VarBlock::kZ: {
      Vector g = Vector::Zero(d.lower_dim);
      for (int l = 0; l < polytope.size(); ++l) {
        g += state.lambda[l] * polytope.planes[static_cast<std::size_t>(l)].c;
      }
      return g;
    }
    case VarBlock::kLambda: {
      if (index < 0 || index >= polytope.size()) throw ShapeError("grad lambda: bad plane");
      double g = plane_slack(polytope.planes[widx], state.v, state.y, state.z);
      if (regularized) g -= reg_c1(schedule, state.t) * state.lambda[index];
      return Vector::Constant(1, g);
    }
    case VarBlock::kTheta: {
      if (index < 0 || index >= d.num_workers) throw ShapeError("grad theta: bad worker");
      Vector g = state.x[widx] - state.v;
      if (regularized) g -= reg_c2(schedule, state.t) * state.theta[widx];
      return g;
    }
  }
  throw ShapeError("grad_block: unknown block");
}

/// Clamps each lambda to [0, lambda_max] and radially projects each theta_i
/// onto the ball of radius theta_max.
inline PrimalDualState project_duals(PrimalDualState state, const DualBounds& bounds) {
  for (Eigen::Index l = 0; l < state.lambda.size(); ++l) {
    state.lambda[l] = std::min(std::max(state.lambda[l], 0.0), bounds.lambda_max);
  }
  if (std::isfinite(bounds.theta_max)) {
    for (auto& th : state.theta) {
      const double norm = th.norm();
      if (norm > bounds.theta_max) th *= bounds.theta_max / norm;
    }
  }
  return state;
}

/// Squared stationarity gap: the squared norms of the UNregularized L_p
/// gradients summed over all six blocks. The stopping rule compares this
/// against the target tolerance.
inline double stationarity_gap_sq(const PrimalDualState& state,
                                  const Polytope& polytope,
                                  const BilevelProblem& problem) {
  state.check_against(polytope);
  const auto& d = problem.dims();
  const RegSchedule unused{};
  double total = 0.0;
  for (int i = 0; i < d.num_workers; ++i) {
    total += grad_block(VarBlock::kX, i, state, polytope, problem, unused, false)
                 .squaredNorm();
    total += grad_block(VarBlock::kY, i, state, polytope, problem, unused, false)
                 .squaredNorm();
    total += grad_block(VarBlock::kTheta, i, state, polytope, problem, unused, false)
                 .squaredNorm();
  }
  total += grad_block(VarBlock::kV, 0, state, polytope, problem, unused, false)
               .squaredNorm();
  total += grad_block(VarBlock::kZ, 0, state, polytope, problem, unused, false)
               .squaredNorm();
  for (int l = 0; l < polytope.size(); ++l) {
    total += grad_block(VarBlock::kLambda, l, state, polytope, problem, unused, false)
                 .squaredNorm();
  }
  return total;
}

}  // namespace bilevel
