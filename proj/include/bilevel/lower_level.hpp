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

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bilevel/log.hpp"
#include "bilevel/problem.hpp"
#include "bilevel/types.hpp"

namespace bilevel {

/// Settings for the K-round augmented-Lagrangian estimate of the
/// lower-level solution map phi(v). The Taylor anchor is always the v
/// passed to phi_estimate, which keeps the linearized objective exact at
/// the evaluation point.
struct LowerConfig {
  int rounds = 1;         // K
  double penalty = 1.0;   // mu
  double step_y = 0.1;    // eta_y
  double step_z = 0.1;    // eta_z
  double step_dual = 0.1; // eta_phi

  void validate() const {
    if (rounds < 1) throw ConfigError("LowerConfig: K must be >= 1");
    if (penalty <= 0.0 || step_y <= 0.0 || step_z <= 0.0 || step_dual <= 0.0) {
      throw ConfigError("LowerConfig: penalty and step sizes must be > 0");
    }
  }
};

/// Optional warm start for phi_estimate; empty members mean zeros.
struct PhiInit {
  VectorList y0;
  Vector z0;
  VectorList dual0;
};

struct PhiResult {
  VectorList y_stack;  // {y'_{i,K}}
  Vector z_out;        // z'_K
  VectorList dual_out; // {phi_{i,K}}, kept so callers can warm-start
  // d phi / d v as an (N*m + m) x n matrix; present when requested.
  std::optional<Matrix> jac_v;

  Vector stacked() const {
    const auto m = z_out.size();
    Vector out(static_cast<Eigen::Index>(y_stack.size()) * m + m);
    Eigen::Index at = 0;
    for (const auto& y : y_stack) {
      out.segment(at, m) = y;
      at += m;
    }
    out.segment(at, m) = z_out;
    return out;
  }
};

/// Gradient of the Taylor-linearized local lower objective,
/// grad_y g~_i(v, y') = lower_grad_y(v_bar, y') + mixed_jvp(v_bar, y', v - v_bar).
/// Equals lower_grad_y(v_bar, y') exactly when v == v_bar.
inline Vector taylor_lower_grad_y(const BilevelProblem& problem, int i,
                                  const Vector& v_bar, const Vector& v,
                                  const Vector& y) {
  require_dim(v, v_bar.size(), "taylor v");
  Vector grad = problem.lower_grad_y(i, v_bar, y);
  if ((v - v_bar).squaredNorm() > 0.0) {
    grad += problem.mixed_jvp(i, v_bar, y, v - v_bar);
  }
  return grad;
}

namespace detail {

inline void check_finite_round(const VectorList& ys, const Vector& z, int round) {
  for (const auto& y : ys) {
    if (!y.allFinite()) {
      throw DivergenceError("phi estimate diverged at round " + std::to_string(round));
    }
  }
  if (!z.allFinite()) {
    throw DivergenceError("phi estimate diverged at round " + std::to_string(round));
  }
}

}  // namespace detail

/// Runs K communication rounds of the penalized primal-dual scheme on the
/// linearized lower level and returns the stacked result. Round k+1:
///
///   y'_{i,k+1}   = y'_{i,k} - eta_y (grad_y g~_i + phi_{i,k} + mu (y'_{i,k} - z'_k))
///   z'_{k+1}     = z'_k - eta_z sum_i (-phi_{i,k} - mu (y'_{i,k} - z'_k))
///   phi_{i,k+1}  = phi_{i,k} + eta_phi (y'_{i,k+1} - z'_{k+1})
///
/// The master step deliberately reads the round-k worker values while the
/// dual step reads the fresh k+1 values; this ordering is part of the
/// contract and is preserved bit-exactly.
inline PhiResult phi_estimate(const BilevelProblem& problem, const Vector& v,
                              const LowerConfig& cfg, const PhiInit& init = {},
                              bool want_jacobian = false) {
  cfg.validate();
  const auto& d = problem.dims();
  require_dim(v, d.upper_dim, "phi v");
  const auto workers = static_cast<std::size_t>(d.num_workers);

  VectorList y(workers, Vector::Zero(d.lower_dim));
  VectorList dual(workers, Vector::Zero(d.lower_dim));
  Vector z = Vector::Zero(d.lower_dim);
  if (!init.y0.empty()) {
    require_count(init.y0.size(), workers, "phi init y0");
    y = init.y0;
  }
  if (!init.dual0.empty()) {
    require_count(init.dual0.size(), workers, "phi init dual0");
    dual = init.dual0;
  }
  if (init.z0.size() > 0) {
    require_dim(init.z0, d.lower_dim, "phi init z0");
    z = init.z0;
  }

  // Symbolic Jacobian through one round: the anchor is v, so the only
  // v-dependence of y'_{i,1} is the Taylor cross term, whose derivative is
  // the mixed second derivative of g_i; z'_1 does not depend on v at all.
  std::optional<Matrix> jac;
  if (want_jacobian && cfg.rounds == 1) {
    Matrix j = Matrix::Zero(static_cast<Eigen::Index>(workers + 1) * d.lower_dim,
                            d.upper_dim);
    for (std::size_t i = 0; i < workers; ++i) {
      j.middleRows(static_cast<Eigen::Index>(i) * d.lower_dim, d.lower_dim) =
          -cfg.step_y * problem.mixed_jac(static_cast<int>(i), v, y[i]);
    }
    jac = std::move(j);
  }

  for (int k = 0; k < cfg.rounds; ++k) {
    VectorList y_next(workers);
    Vector z_grad = Vector::Zero(d.lower_dim);
    for (std::size_t i = 0; i < workers; ++i) {
      // Anchor == v, so grad_y g~_i collapses to lower_grad_y(v, y).
      const Vector gy = problem.lower_grad_y(static_cast<int>(i), v, y[i]) +
                        dual[i] + cfg.penalty * (y[i] - z);
      y_next[i] = y[i] - cfg.step_y * gy;
      z_grad += -dual[i] - cfg.penalty * (y[i] - z);
    }
    const Vector z_next = z - cfg.step_z * z_grad;
    for (std::size_t i = 0; i < workers; ++i) {
      dual[i] += cfg.step_dual * (y_next[i] - z_next);
    }
    y = std::move(y_next);
    z = z_next;
    detail::check_finite_round(y, z, k);
  }

  if (want_jacobian && cfg.rounds > 1) {
    BILEVEL_LOG_INFO(
        "phi jacobian: K=%d > 1, falling back to columnwise finite differences",
        cfg.rounds);
    const double h = 1e-6 * (1.0 + v.norm());
    Matrix j(static_cast<Eigen::Index>(workers + 1) * d.lower_dim, d.upper_dim);
    for (int col = 0; col < d.upper_dim; ++col) {
      Vector v_plus = v;
      Vector v_minus = v;
      v_plus[col] += h;
      v_minus[col] -= h;
      const Vector s_plus = phi_estimate(problem, v_plus, cfg, init, false).stacked();
      const Vector s_minus = phi_estimate(problem, v_minus, cfg, init, false).stacked();
      j.col(col) = (s_plus - s_minus) / (2.0 * h);
    }
    jac = std::move(j);
  }

  PhiResult out;
  out.y_stack = std::move(y);
  out.z_out = std::move(z);
  out.dual_out = std::move(dual);
  out.jac_v = std::move(jac);
  return out;
}

namespace detail {

inline Vector stack_point(const VectorList& y, const Vector& z) {
  const auto m = z.size();
  Vector out(static_cast<Eigen::Index>(y.size()) * m + m);
  Eigen::Index at = 0;
  for (const auto& yi : y) {
    out.segment(at, m) = yi;
    at += m;
  }
  out.segment(at, m) = z;
  return out;
}

inline void check_h_point(const BilevelProblem& problem, const Vector& v,
                          const VectorList& y, const Vector& z) {
  const auto& d = problem.dims();
  require_dim(v, d.upper_dim, "h v");
  require_count(y.size(), static_cast<std::size_t>(d.num_workers), "h y list");
  for (const auto& yi : y) require_dim(yi, d.lower_dim, "h y_i");
  require_dim(z, d.lower_dim, "h z");
}

}  // namespace detail

/// h(v, {y_i}, z) = || [{y_i}; z] - phi(v) ||^2.
inline double h_value(const BilevelProblem& problem, const Vector& v,
                      const VectorList& y, const Vector& z,
                      const LowerConfig& cfg, const PhiInit& init = {}) {
  detail::check_h_point(problem, v, y, z);
  const PhiResult phi = phi_estimate(problem, v, cfg, init);
  return (detail::stack_point(y, z) - phi.stacked()).squaredNorm();
}

struct HGradient {
  double value = 0.0;
  Vector dv;      // -2 jac_v^T residual
  VectorList dy;  // 2 (y_i - phi_{y_i})
  Vector dz;      // 2 (z - phi_z)
};

inline HGradient h_gradient(const BilevelProblem& problem, const Vector& v,
                            const VectorList& y, const Vector& z,
                            const LowerConfig& cfg, const PhiInit& init = {},
                            PhiResult* phi_out = nullptr) {
  detail::check_h_point(problem, v, y, z);
  const PhiResult phi = phi_estimate(problem, v, cfg, init, /*want_jacobian=*/true);
  const Vector residual = detail::stack_point(y, z) - phi.stacked();
  if (phi_out != nullptr) *phi_out = phi;

  HGradient out;
  out.value = residual.squaredNorm();
  out.dv = -2.0 * phi.jac_v->transpose() * residual;
  const auto m = problem.dims().lower_dim;
  out.dy.reserve(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    out.dy.push_back(2.0 * residual.segment(static_cast<Eigen::Index>(i) * m, m));
  }
  out.dz = 2.0 * residual.tail(m);
  return out;
}

}  // namespace bilevel
