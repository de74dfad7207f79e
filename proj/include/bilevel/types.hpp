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

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace bilevel {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using VectorList = std::vector<Vector>;

/// Sizes of a distributed bilevel problem: N workers, upper variables in
/// R^n (x_i, v), lower variables in R^m (y_i, z).
struct ProblemDims {
  int num_workers = 1;  // N
  int upper_dim = 1;    // n
  int lower_dim = 1;    // m

  void validate() const {
    if (num_workers < 1 || upper_dim < 1 || lower_dim < 1) {
      throw std::invalid_argument("ProblemDims: N, n, m must all be >= 1");
    }
  }
};

// Error taxonomy. The CLI maps DivergenceError to exit code 1 and the
// config/parse/io family to exit code 2.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ParseError : std::runtime_error {
  ParseError(const std::string& msg, std::size_t line)
      : std::runtime_error(msg + " (line " + std::to_string(line) + ")"),
        line_number(line) {}
  std::size_t line_number;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require_dim(const Vector& v, Eigen::Index expect,
                        const char* what) {
  if (v.size() != expect) {
    throw ShapeError(std::string(what) + ": expected length " +
                     std::to_string(expect) + ", got " +
                     std::to_string(v.size()));
  }
}

inline void require_count(std::size_t got, std::size_t expect,
                          const char* what) {
  if (got != expect) {
    throw ShapeError(std::string(what) + ": expected " +
                     std::to_string(expect) + " entries, got " +
                     std::to_string(got));
  }
}

}  // namespace bilevel
