/*
 * Copyright 2026 The MME Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mme/error.hpp"

namespace mme {

/// Row-per-sample dense matrix. Features (N x d) and logits (N x K) both use
/// this type; all accumulation is float64.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using LabelVector = std::vector<std::int64_t>;

/// Magnitude substituted for non-finite detector outputs.
inline constexpr double kScoreClamp = 1e30;

/// One detector output per sample. Orientation is always higher-is-ID.
struct ScoreVector {
  std::vector<double> values;
  std::string detector_name;
  /// Number of entries that were non-finite and got clamped to +/-kScoreClamp.
  std::size_t clamped = 0;

  std::size_t size() const noexcept { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
};

/// Replaces non-finite entries by +/-kScoreClamp (NaN maps to -kScoreClamp)
/// and records how many were touched.
inline ScoreVector make_scores(std::vector<double> values, std::string name) {
  ScoreVector out{std::move(values), std::move(name), 0};
  for (double& v : out.values) {
    if (std::isfinite(v)) continue;
    v = (v > 0) ? kScoreClamp : -kScoreClamp;
    ++out.clamped;
  }
  return out;
}

/// Index of the largest entry; ties resolve to the lowest index.
template <typename Row>
Eigen::Index argmax_first(const Row& row) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

/// Index of the smallest entry; ties resolve to the lowest index.
template <typename Row>
Eigen::Index argmin_first(const Row& row) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < row.size(); ++i) {
    if (row[i] < row[best]) best = i;
  }
  return best;
}

/// Numerically stable log(sum(exp(row))).
template <typename Row>
double log_sum_exp(const Row& row) {
  const double m = row.maxCoeff();
  if (!std::isfinite(m)) return m;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < row.size(); ++i) acc += std::exp(row[i] - m);
  return m + std::log(acc);
}

/// Softmax with max subtraction.
template <typename Row>
RowVector softmax(const Row& row) {
  const double m = row.maxCoeff();
  RowVector out(row.size());
  double total = 0.0;
  for (Eigen::Index i = 0; i < row.size(); ++i) {
    out[i] = std::exp(row[i] - m);
    total += out[i];
  }
  return out / total;
}

}  // namespace mme
