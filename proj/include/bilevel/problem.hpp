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
#include <memory>
#include <utility>
#include <vector>

#include "bilevel/dataset.hpp"
#include "bilevel/types.hpp"

namespace bilevel {

/// Distributed bilevel problem over N workers.
///
/// Worker i owns an upper objective G_i(x_i, y_i) and a lower objective
/// g_i(v, y'). The overall upper objective is sum_i G_i subject to the
/// consensus constraints x_i = v and (y_i, z) solving the lower level.
/// All evaluations are pure functions of their arguments; instances are
/// safe to share across threads.
class BilevelProblem {
 public:
  virtual ~BilevelProblem() = default;

  const ProblemDims& dims() const { return dims_; }

  double upper_value(int i, const Vector& x_i, const Vector& y_i) const {
    check_upper(i, x_i, y_i);
    return do_upper_value(i, x_i, y_i);
  }
  Vector upper_grad_x(int i, const Vector& x_i, const Vector& y_i) const {
    check_upper(i, x_i, y_i);
    return do_upper_grad_x(i, x_i, y_i);
  }
  Vector upper_grad_y(int i, const Vector& x_i, const Vector& y_i) const {
    check_upper(i, x_i, y_i);
    return do_upper_grad_y(i, x_i, y_i);
  }

  double lower_value(int i, const Vector& v, const Vector& y) const {
    check_lower(i, v, y);
    return do_lower_value(i, v, y);
  }
  Vector lower_grad_v(int i, const Vector& v, const Vector& y) const {
    check_lower(i, v, y);
    return do_lower_grad_v(i, v, y);
  }
  Vector lower_grad_y(int i, const Vector& v, const Vector& y) const {
    check_lower(i, v, y);
    return do_lower_grad_y(i, v, y);
  }

  /// Action of the mixed second derivative of g_i: the m-vector
  /// d^2 g_i / dy' dv (v_bar, y) * dv. Linear in dv.
  Vector mixed_jvp(int i, const Vector& v_bar, const Vector& y,
                   const Vector& dv) const {
    check_lower(i, v_bar, y);
    require_dim(dv, dims_.upper_dim, "mixed_jvp dv");
    return do_mixed_jvp(i, v_bar, y, dv);
  }

  /// Materialized m x n mixed second derivative of g_i at (v_bar, y).
  Matrix mixed_jac(int i, const Vector& v_bar, const Vector& y) const {
    check_lower(i, v_bar, y);
    return do_mixed_jac(i, v_bar, y);
  }

 protected:
  explicit BilevelProblem(ProblemDims dims) : dims_(dims) { dims_.validate(); }

  virtual double do_upper_value(int i, const Vector& x, const Vector& y) const = 0;
  virtual Vector do_upper_grad_x(int i, const Vector& x, const Vector& y) const = 0;
  virtual Vector do_upper_grad_y(int i, const Vector& x, const Vector& y) const = 0;
  virtual double do_lower_value(int i, const Vector& v, const Vector& y) const = 0;
  virtual Vector do_lower_grad_v(int i, const Vector& v, const Vector& y) const = 0;
  virtual Vector do_lower_grad_y(int i, const Vector& v, const Vector& y) const = 0;

  // Fallback for user problems: central differences of lower_grad_y along
  // the dv direction with h = 1e-6 * (1 + ||v_bar||). Built-ins override
  // with exact forms.
  virtual Vector do_mixed_jvp(int i, const Vector& v_bar, const Vector& y,
                              const Vector& dv) const {
    const double scale = dv.norm();
    if (scale == 0.0) return Vector::Zero(dims_.lower_dim);
    const Vector unit = dv / scale;
    const double h = 1e-6 * (1.0 + v_bar.norm());
    const Vector plus = do_lower_grad_y(i, v_bar + h * unit, y);
    const Vector minus = do_lower_grad_y(i, v_bar - h * unit, y);
    return scale / (2.0 * h) * (plus - minus);
  }

  virtual Matrix do_mixed_jac(int i, const Vector& v_bar, const Vector& y) const {
    Matrix jac(dims_.lower_dim, dims_.upper_dim);
    Vector basis = Vector::Zero(dims_.upper_dim);
    for (int j = 0; j < dims_.upper_dim; ++j) {
      basis[j] = 1.0;
      jac.col(j) = do_mixed_jvp(i, v_bar, y, basis);
      basis[j] = 0.0;
    }
    return jac;
  }

 private:
  void check_upper(int i, const Vector& x, const Vector& y) const {
    check_worker(i);
    require_dim(x, dims_.upper_dim, "x_i");
    require_dim(y, dims_.lower_dim, "y_i");
  }
  void check_lower(int i, const Vector& v, const Vector& y) const {
    check_worker(i);
    require_dim(v, dims_.upper_dim, "v");
    require_dim(y, dims_.lower_dim, "y'");
  }
  void check_worker(int i) const {
    if (i < 0 || i >= dims_.num_workers) {
      throw ShapeError("worker index out of range: " + std::to_string(i));
    }
  }

  ProblemDims dims_;
};

/// F = sum_i G_i(x_i, y_i).
inline double upper_sum(const BilevelProblem& problem, const VectorList& x,
                        const VectorList& y) {
  const auto& d = problem.dims();
  require_count(x.size(), static_cast<std::size_t>(d.num_workers), "x list");
  require_count(y.size(), static_cast<std::size_t>(d.num_workers), "y list");
  double total = 0.0;
  for (int i = 0; i < d.num_workers; ++i) {
    total += problem.upper_value(i, x[static_cast<std::size_t>(i)],
                                 y[static_cast<std::size_t>(i)]);
  }
  return total;
}

namespace detail {

inline double sigmoid(double t) {
  return t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
}

inline double sigmoid_prime(double t) {
  const double s = sigmoid(t);
  return s * (1.0 - s);
}

/// log(1 + exp(-margin)), numerically stable.
inline double logistic_loss(double margin) {
  return margin >= 0.0 ? std::log1p(std::exp(-margin))
                       : -margin + std::log1p(std::exp(margin));
}

/// d/ds log(1 + exp(-y s)) = -y * sigmoid(-y s).
inline double logistic_loss_dscore(double score, double label) {
  return -label * sigmoid(-label * score);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Quadratic oracle problem
//
//   G_i(x_i, y_i) = ||x_i - a_i||^2 + ||y_i - b_i||^2
//   g_i(v, y')    = ||y' - c_i v||^2
//
// The lower-level consensus optimum has the closed form z* = mean(c_i) v,
// which makes this the workhorse for oracle tests. Requires n == m.
// ---------------------------------------------------------------------------

class QuadraticToyProblem final : public BilevelProblem {
 public:
  QuadraticToyProblem(ProblemDims dims, VectorList a, VectorList b,
                      std::vector<double> c)
      : BilevelProblem(dims), a_(std::move(a)), b_(std::move(b)), c_(std::move(c)) {
    if (dims.upper_dim != dims.lower_dim) {
      throw ConfigError("quadratic toy requires n == m");
    }
    const auto n = static_cast<std::size_t>(dims.num_workers);
    if (a_.size() != n || b_.size() != n || c_.size() != n) {
      throw ConfigError("quadratic toy: coefficient lists must have length N");
    }
    for (const auto& ai : a_) require_dim(ai, dims.upper_dim, "a_i");
    for (const auto& bi : b_) require_dim(bi, dims.lower_dim, "b_i");
  }

  double coefficient(int i) const { return c_[static_cast<std::size_t>(i)]; }

 protected:
  double do_upper_value(int i, const Vector& x, const Vector& y) const override {
    return (x - a_[static_cast<std::size_t>(i)]).squaredNorm() +
           (y - b_[static_cast<std::size_t>(i)]).squaredNorm();
  }
  Vector do_upper_grad_x(int i, const Vector& x, const Vector&) const override {
    return 2.0 * (x - a_[static_cast<std::size_t>(i)]);
  }
  Vector do_upper_grad_y(int i, const Vector&, const Vector& y) const override {
    return 2.0 * (y - b_[static_cast<std::size_t>(i)]);
  }
  double do_lower_value(int i, const Vector& v, const Vector& y) const override {
    return (y - c_[static_cast<std::size_t>(i)] * v).squaredNorm();
  }
  Vector do_lower_grad_v(int i, const Vector& v, const Vector& y) const override {
    const double c = c_[static_cast<std::size_t>(i)];
    return -2.0 * c * (y - c * v);
  }
  Vector do_lower_grad_y(int i, const Vector& v, const Vector& y) const override {
    return 2.0 * (y - c_[static_cast<std::size_t>(i)] * v);
  }
  Vector do_mixed_jvp(int i, const Vector&, const Vector&,
                      const Vector& dv) const override {
    return -2.0 * c_[static_cast<std::size_t>(i)] * dv;
  }
  Matrix do_mixed_jac(int i, const Vector&, const Vector&) const override {
    return -2.0 * c_[static_cast<std::size_t>(i)] *
           Matrix::Identity(dims().lower_dim, dims().upper_dim);
  }

 private:
  VectorList a_;
  VectorList b_;
  std::vector<double> c_;
};

inline std::shared_ptr<BilevelProblem> make_quadratic_toy(
    int num_workers, int n, int m, VectorList a, VectorList b,
    std::vector<double> c) {
  return std::make_shared<QuadraticToyProblem>(
      ProblemDims{num_workers, n, m}, std::move(a), std::move(b), std::move(c));
}

/// Scalar-coefficient convenience overload for n = m = 1.
inline std::shared_ptr<BilevelProblem> make_quadratic_toy(
    int num_workers, const std::vector<double>& a, const std::vector<double>& b,
    const std::vector<double>& c) {
  VectorList av, bv;
  for (double ai : a) av.push_back(Vector::Constant(1, ai));
  for (double bi : b) bv.push_back(Vector::Constant(1, bi));
  return make_quadratic_toy(num_workers, 1, 1, std::move(av), std::move(bv), c);
}

// ---------------------------------------------------------------------------
// Data hyper-cleaning
//
// Upper: per-worker mean validation logistic loss of the model w (= y_i).
// Lower: sigmoid(psi_j)-weighted mean training loss + C_r ||w'||^2, where
// psi (= v) concatenates every worker's per-sample weights and worker i
// reads only its own slice.
// ---------------------------------------------------------------------------

class HypercleaningProblem final : public BilevelProblem {
 public:
  HypercleaningProblem(ProblemDims dims, std::vector<Dataset> shards,
                       std::vector<int> slice_offset, double c_reg)
      : BilevelProblem(dims),
        shards_(std::move(shards)),
        slice_offset_(std::move(slice_offset)),
        c_reg_(c_reg) {}

  /// Slice of psi owned by worker i: [offset, offset + local train size).
  int slice_offset(int i) const { return slice_offset_[static_cast<std::size_t>(i)]; }
  int slice_size(int i) const {
    return static_cast<int>(train_rows(i).size());
  }

  std::vector<int> train_rows(int i) const {
    return shards_[static_cast<std::size_t>(i)].indices_of(Split::kTrain);
  }

 protected:
  double do_upper_value(int i, const Vector&, const Vector& w) const override {
    const auto& shard = shards_[static_cast<std::size_t>(i)];
    const auto rows = shard.indices_of(Split::kValidation);
    double total = 0.0;
    for (int r : rows) {
      const double margin = shard.labels[r] * shard.features.row(r).dot(w);
      total += detail::logistic_loss(margin);
    }
    return total / static_cast<double>(rows.size());
  }

  Vector do_upper_grad_x(int, const Vector&, const Vector&) const override {
    return Vector::Zero(dims().upper_dim);  // G_i does not depend on psi
  }

  Vector do_upper_grad_y(int i, const Vector&, const Vector& w) const override {
    const auto& shard = shards_[static_cast<std::size_t>(i)];
    const auto rows = shard.indices_of(Split::kValidation);
    Vector grad = Vector::Zero(dims().lower_dim);
    for (int r : rows) {
      const double score = shard.features.row(r).dot(w);
      grad += detail::logistic_loss_dscore(score, shard.labels[r]) *
              shard.features.row(r).transpose();
    }
    return grad / static_cast<double>(rows.size());
  }

  double do_lower_value(int i, const Vector& psi, const Vector& w) const override {
    const auto& shard = shards_[static_cast<std::size_t>(i)];
    const auto rows = train_rows(i);
    const int offset = slice_offset(i);
    double total = 0.0;
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const int r = rows[k];
      const double margin = shard.labels[r] * shard.features.row(r).dot(w);
      total += detail::sigmoid(psi[offset + static_cast<int>(k)]) *
               detail::logistic_loss(margin);
    }
    return total / static_cast<double>(rows.size()) + c_reg_ * w.squaredNorm();
  }

  Vector do_lower_grad_v(int i, const Vector& psi, const Vector& w) const override {
    const auto& shard = shards_[static_cast<std::size_t>(i)];
    const auto rows = train_rows(i);
    const int offset = slice_offset(i);
    Vector grad = Vector::Zero(dims().upper_dim);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const int r = rows[k];
      const double margin = shard.labels[r] * shard.features.row(r).dot(w);
      grad[offset + static_cast<int>(k)] =
          detail::sigmoid_prime(psi[offset + static_cast<int>(k)]) *
          detail::logistic_loss(margin) / static_cast<double>(rows.size());
    }
    return grad;
  }

  Vector do_lower_grad_y(int i, const Vector& psi, const Vector& w) const override {
    const auto& shard = shards_[static_cast<std::size_t>(i)];
    const auto rows = train_rows(i);
    const int offset = slice_offset(i);
    Vector grad = Vector::Zero(dims().lower_dim);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const int r = rows[k];
      const double score = shard.features.row(r).dot(w);
      grad += detail::sigmoid(psi[offset + static_cast<int>(k)]) *
              detail::logistic_loss_dscore(score, shard.labels[r]) *
              shard.features.row(r).transpose();
    }
    return grad / static_cast<double>(rows.size()) + 2.0 * c_reg_ * w;
  }

  Vector do_mixed_jvp(int i, const Vector& psi, const Vector& w,
                      const Vector& dpsi) const override {
    const auto& shard = shards_[static_cast<std::size_t>(i)];
    const auto rows = train_rows(i);
    const int offset = slice_offset(i);
    Vector out = Vector::Zero(dims().lower_dim);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const int r = rows[k];
      const int g = offset + static_cast<int>(k);
      if (dpsi[g] == 0.0) continue;
      const double score = shard.features.row(r).dot(w);
      out += detail::sigmoid_prime(psi[g]) * dpsi[g] *
             detail::logistic_loss_dscore(score, shard.labels[r]) *
             shard.features.row(r).transpose();
    }
    return out / static_cast<double>(rows.size());
  }

  Matrix do_mixed_jac(int i, const Vector& psi, const Vector& w) const override {
    const auto& shard = shards_[static_cast<std::size_t>(i)];
    const auto rows = train_rows(i);
    const int offset = slice_offset(i);
    Matrix jac = Matrix::Zero(dims().lower_dim, dims().upper_dim);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const int r = rows[k];
      const int g = offset + static_cast<int>(k);
      const double score = shard.features.row(r).dot(w);
      jac.col(g) = detail::sigmoid_prime(psi[g]) *
                   detail::logistic_loss_dscore(score, shard.labels[r]) /
                   static_cast<double>(rows.size()) *
                   shard.features.row(r).transpose();
    }
    return jac;
  }

 private:
  std::vector<Dataset> shards_;
  std::vector<int> slice_offset_;
  double c_reg_;
};

inline std::shared_ptr<BilevelProblem> make_hypercleaning(
    std::vector<Dataset> shards, double c_reg) {
  if (shards.empty()) throw ConfigError("hypercleaning: no worker shards");
  if (c_reg < 0.0) throw ConfigError("hypercleaning: C_r must be >= 0");
  int total_train = 0;
  std::vector<int> offsets;
  Eigen::Index feature_dim = shards.front().feature_dim();
  for (const auto& shard : shards) {
    shard.validate();
    if (shard.feature_dim() != feature_dim) {
      throw ConfigError("hypercleaning: shards disagree on feature dim");
    }
    const auto train = shard.indices_of(Split::kTrain);
    const auto val = shard.indices_of(Split::kValidation);
    if (train.empty() || val.empty()) {
      throw ConfigError("hypercleaning: every worker needs nonempty train and validation shards");
    }
    offsets.push_back(total_train);
    total_train += static_cast<int>(train.size());
  }
  ProblemDims dims{static_cast<int>(shards.size()), total_train,
                   static_cast<int>(feature_dim)};
  return std::make_shared<HypercleaningProblem>(dims, std::move(shards),
                                                std::move(offsets), c_reg);
}

// ---------------------------------------------------------------------------
// Regularization-coefficient optimization
//
// Upper: mean validation logistic loss. Lower: mean training logistic loss
// plus the per-coordinate weighted ridge sum_j psi_j (w'_j)^2; psi (= v)
// matches the model dimension.
// ---------------------------------------------------------------------------

class RegCoefProblem final : public BilevelProblem {
 public:
  RegCoefProblem(ProblemDims dims, std::vector<Dataset> shards)
      : BilevelProblem(dims), shards_(std::move(shards)) {}

 protected:
  double do_upper_value(int i, const Vector&, const Vector& w) const override {
    const auto& shard = shards_[static_cast<std::size_t>(i)];
    const auto rows = shard.indices_of(Split::kValidation);
    double total = 0.0;
    for (int r : rows) {
      total += detail::logistic_loss(shard.labels[r] * shard.features.row(r).dot(w));
    }
    return total / static_cast<double>(rows.size());
  }

  Vector do_upper_grad_x(int, const Vector&, const Vector&) const override {
    return Vector::Zero(dims().upper_dim);
  }

  Vector do_upper_grad_y(int i, const Vector&, const Vector& w) const override {
    const auto& shard = shards_[static_cast<std::size_t>(i)];
    const auto rows = shard.indices_of(Split::kValidation);
    Vector grad = Vector::Zero(dims().lower_dim);
    for (int r : rows) {
      const double score = shard.features.row(r).dot(w);
      grad += detail::logistic_loss_dscore(score, shard.labels[r]) *
              shard.features.row(r).transpose();
    }
    return grad / static_cast<double>(rows.size());
  }

  double do_lower_value(int i, const Vector& psi, const Vector& w) const override {
    const auto& shard = shards_[static_cast<std::size_t>(i)];
    const auto rows = shard.indices_of(Split::kTrain);
    double total = 0.0;
    for (int r : rows) {
      total += detail::logistic_loss(shard.labels[r] * shard.features.row(r).dot(w));
    }
    return total / static_cast<double>(rows.size()) +
           psi.dot(w.cwiseProduct(w));
  }

  Vector do_lower_grad_v(int, const Vector&, const Vector& w) const override {
    return w.cwiseProduct(w);
  }

  Vector do_lower_grad_y(int i, const Vector& psi, const Vector& w) const override {
    const auto& shard = shards_[static_cast<std::size_t>(i)];
    const auto rows = shard.indices_of(Split::kTrain);
    Vector grad = Vector::Zero(dims().lower_dim);
    for (int r : rows) {
      const double score = shard.features.row(r).dot(w);
      grad += detail::logistic_loss_dscore(score, shard.labels[r]) *
              shard.features.row(r).transpose();
    }
    return grad / static_cast<double>(rows.size()) +
           2.0 * psi.cwiseProduct(w);
  }

  Vector do_mixed_jvp(int, const Vector&, const Vector& w,
                      const Vector& dpsi) const override {
    return 2.0 * w.cwiseProduct(dpsi);
  }

  Matrix do_mixed_jac(int, const Vector&, const Vector& w) const override {
    return (2.0 * w).asDiagonal();
  }

 private:
  std::vector<Dataset> shards_;
};

inline std::shared_ptr<BilevelProblem> make_regcoef(std::vector<Dataset> shards) {
  if (shards.empty()) throw ConfigError("regcoef: no worker shards");
  Eigen::Index feature_dim = shards.front().feature_dim();
  for (const auto& shard : shards) {
    shard.validate();
    if (shard.feature_dim() != feature_dim) {
      throw ConfigError("regcoef: shards disagree on feature dim");
    }
    if (shard.indices_of(Split::kTrain).empty() ||
        shard.indices_of(Split::kValidation).empty()) {
      throw ConfigError("regcoef: every worker needs nonempty train and validation shards");
    }
  }
  ProblemDims dims{static_cast<int>(shards.size()),
                   static_cast<int>(feature_dim), static_cast<int>(feature_dim)};
  return std::make_shared<RegCoefProblem>(dims, std::move(shards));
}

}  // namespace bilevel
