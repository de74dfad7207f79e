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

#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "bilevel/log.hpp"
#include "bilevel/lower_level.hpp"
#include "bilevel/types.hpp"

namespace bilevel {

// A dual multiplier counts as zero for the drop rule below this magnitude;
// exact-zero tests are brittle after projection.
inline constexpr double kZeroDualTol = 1e-12;

/// Linear constraint a^T v + sum_i b_i^T y_i + c^T z + kappa <= 0.
struct CuttingPlane {
  Vector a;      // n
  VectorList b;  // N vectors of length m
  Vector c;      // m
  double kappa = 0.0;
};

/// Ordered collection of cutting planes, capped at `cap` (M).
struct Polytope {
  std::vector<CuttingPlane> planes;
  int cap = 20;

  int size() const { return static_cast<int>(planes.size()); }
};

inline double plane_slack(const CuttingPlane& plane, const Vector& v,
                          const VectorList& y, const Vector& z) {
  require_dim(v, plane.a.size(), "plane v");
  require_count(y.size(), plane.b.size(), "plane y list");
  require_dim(z, plane.c.size(), "plane z");
  double slack = plane.a.dot(v) + plane.c.dot(z) + plane.kappa;
  for (std::size_t i = 0; i < y.size(); ++i) {
    require_dim(y[i], plane.b[i].size(), "plane y_i");
    slack += plane.b[i].dot(y[i]);
  }
  return slack;
}

/// Linearizes h at a violated point p = (v, {y_i}, z):
///
///   h(p) + grad h(p)^T (w - p) <= eps
///
/// rearranged to slack form with a = dh/dv, b_i = dh/dy_i, c = dh/dz and
/// kappa = h(p) - eps - grad h(p)^T p. By construction the slack at p equals
/// h(p) - eps > 0, and convexity of h puts every point of {h <= eps} on the
/// non-positive side.
inline CuttingPlane generate_plane(const Vector& v, const VectorList& y,
                                   const Vector& z, const HGradient& grad,
                                   double eps) {
  if (grad.value <= eps) {
    throw std::logic_error("generate_plane called for a feasible point");
  }
  CuttingPlane plane;
  plane.a = grad.dv;
  plane.b = grad.dy;
  plane.c = grad.dz;
  double at_point = plane.a.dot(v) + plane.c.dot(z);
  for (std::size_t i = 0; i < y.size(); ++i) at_point += plane.b[i].dot(y[i]);
  plane.kappa = grad.value - eps - at_point;
  return plane;
}

/// Shared drop rule: plane l goes iff its dual was (numerically) zero at
/// both checkpoints. Returns true at positions to drop.
inline std::vector<bool> inactive_drop_mask(const Vector& lambda_prev,
                                            const Vector& lambda_curr,
                                            double zero_tol = kZeroDualTol) {
  if (lambda_prev.size() != lambda_curr.size()) {
    throw ShapeError("drop rule: dual checkpoint lengths disagree");
  }
  std::vector<bool> drop(static_cast<std::size_t>(lambda_curr.size()));
  for (Eigen::Index l = 0; l < lambda_curr.size(); ++l) {
    drop[static_cast<std::size_t>(l)] =
        std::abs(lambda_prev[l]) <= zero_tol && std::abs(lambda_curr[l]) <= zero_tol;
  }
  return drop;
}

/// Removes planes whose duals were zero at both checkpoints; surviving
/// planes and duals keep their relative order.
inline std::pair<Polytope, Vector> drop_inactive(const Polytope& polytope,
                                                 const Vector& lambda_prev,
                                                 const Vector& lambda_curr,
                                                 double zero_tol = kZeroDualTol) {
  if (lambda_curr.size() != polytope.size()) {
    throw ShapeError("drop rule: dual count does not match plane count");
  }
  const auto drop = inactive_drop_mask(lambda_prev, lambda_curr, zero_tol);
  Polytope kept;
  kept.cap = polytope.cap;
  std::vector<double> duals;
  for (int l = 0; l < polytope.size(); ++l) {
    if (drop[static_cast<std::size_t>(l)]) continue;
    kept.planes.push_back(polytope.planes[static_cast<std::size_t>(l)]);
    duals.push_back(lambda_curr[l]);
  }
  Vector kept_duals = Eigen::Map<Vector>(duals.data(), static_cast<Eigen::Index>(duals.size()));
  return {std::move(kept), std::move(kept_duals)};
}

/// Appends a separating plane for the point when h(point) > eps, with a
/// fresh dual initialized to zero. At the cap the oldest zero-dual plane is
/// evicted first; if every dual is active the addition is skipped.
inline bool add_if_violated(Polytope& polytope, Vector& duals, const Vector& v,
                            const VectorList& y, const Vector& z,
                            const HGradient& grad, double eps,
                            double zero_tol = kZeroDualTol) {
  if (duals.size() != polytope.size()) {
    throw ShapeError("add rule: dual count does not match plane count");
  }
  if (grad.value <= eps) return false;
  if (polytope.size() >= polytope.cap) {
    int evict = -1;
    for (Eigen::Index l = 0; l < duals.size(); ++l) {
      if (std::abs(duals[l]) <= zero_tol) {
        evict = static_cast<int>(l);
        break;
      }
    }
    if (evict < 0) {
      BILEVEL_LOG_INFO("polytope at cap %d with all duals active; skipping plane",
                       polytope.cap);
      return false;
    }
    polytope.planes.erase(polytope.planes.begin() + evict);
    Vector shrunk(duals.size() - 1);
    shrunk << duals.head(evict), duals.tail(duals.size() - evict - 1);
    duals = std::move(shrunk);
  }
  polytope.planes.push_back(generate_plane(v, y, z, grad, eps));
  Vector grown(duals.size() + 1);
  grown << duals, 0.0;
  duals = std::move(grown);
  return true;
}

// --- trace/debug serialization: JSON array of {a, b, c, kappa} ------------

namespace detail {

inline void append_json_number(std::string& out, double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  out += buf;
}

inline void append_json_vector(std::string& out, const Vector& v) {
  out += '[';
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i > 0) out += ',';
    append_json_number(out, v[i]);
  }
  out += ']';
}

}  // namespace detail

/// Full double precision (17 significant digits) JSON dump.
inline std::string polytope_to_json(const Polytope& polytope) {
  std::string out = "[";
  for (int l = 0; l < polytope.size(); ++l) {
    const auto& plane = polytope.planes[static_cast<std::size_t>(l)];
    if (l > 0) out += ',';
    out += "{\"a\":";
    detail::append_json_vector(out, plane.a);
    out += ",\"b\":[";
    for (std::size_t i = 0; i < plane.b.size(); ++i) {
      if (i > 0) out += ',';
      detail::append_json_vector(out, plane.b[i]);
    }
    out += "],\"c\":";
    detail::append_json_vector(out, plane.c);
    out += ",\"kappa\":";
    detail::append_json_number(out, plane.kappa);
    out += '}';
  }
  out += ']';
  return out;
}

}  // namespace bilevel
