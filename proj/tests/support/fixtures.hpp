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

#include <memory>
#include <vector>

#include "bilevel/dataset.hpp"
#include "bilevel/problem.hpp"

namespace fixtures {

/// Two-worker scalar toy with a = (1, 2), b = (0, 0), c = (1, 2); the
/// instance behind most hand-computed expectations.
inline std::shared_ptr<bilevel::BilevelProblem> toy_two_workers() {
  return bilevel::make_quadratic_toy(2, {1.0, 2.0}, {0.0, 0.0}, {1.0, 2.0});
}

/// Workers share a = b = 0, c = 1: G_i = x^2 + y^2 vanishes with zero
/// gradient at the origin, handy for hand-computed Lagrangian states.
inline std::shared_ptr<bilevel::BilevelProblem> zero_centered_toy(int workers = 1) {
  return bilevel::make_quadratic_toy(workers, std::vector<double>(workers, 0.0),
                                     std::vector<double>(workers, 0.0),
                                     std::vector<double>(workers, 1.0));
}

inline std::vector<bilevel::Dataset> make_shards(int samples, int features,
                                                 int num_workers,
                                                 std::uint64_t seed,
                                                 double corruption = 0.0) {
  bilevel::Dataset data = bilevel::make_synthetic_binary(samples, features, seed);
  bilevel::tag_validation_split(data, 0.5, seed);
  if (corruption > 0.0) {
    data = bilevel::corrupt_labels(data, corruption, seed).first;
  }
  return bilevel::partition_dataset(data, num_workers, seed);
}

inline std::shared_ptr<bilevel::BilevelProblem> small_hypercleaning(
    int num_workers = 2, int samples = 24, int features = 4,
    std::uint64_t seed = 5, double c_reg = 1e-2) {
  return bilevel::make_hypercleaning(
      make_shards(samples, features, num_workers, seed), c_reg);
}

inline std::shared_ptr<bilevel::BilevelProblem> small_regcoef(
    int num_workers = 2, int samples = 24, int features = 4,
    std::uint64_t seed = 9) {
  return bilevel::make_regcoef(make_shards(samples, features, num_workers, seed));
}

}  // namespace fixtures
