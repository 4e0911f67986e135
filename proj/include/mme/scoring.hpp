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

// Post-hoc scoring functions. Every detector maps (features, logits, stats)
// to one value per row with higher meaning "more in-distribution".

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mme/calibration.hpp"
#include "mme/error.hpp"
#include "mme/truncation.hpp"
#include "mme/types.hpp"

namespace mme {

inline constexpr double kScoreEpsilon = 1e-12;

/// Logits W phi + b for every row.
inline Matrix forward_head(const Matrix& features, const Matrix& weights, const Eigen::Ref<const Vector>& bias) {
  if (features.cols() != weights.cols()) throw ShapeError("forward_head: feature dim does not match head");
  if (bias.size() != weights.rows()) throw ShapeError("forward_head: bias length does not match head");
  Matrix logits = features * weights.transpose();
  logits.rowwise() += bias.transpose();
  return logits;
}

namespace detail {

template <typename RowFn>
ScoreVector map_rows(Eigen::Index rows, const char* name, RowFn&& fn) {
  std::vector<double> values(static_cast<std::size_t>(rows));
  for (Eigen::Index i = 0; i < rows; ++i) values[static_cast<std::size_t>(i)] = fn(i);
  return make_scores(std::move(values), name);
}

inline void require_rows(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ShapeError("features and logits have different row counts");
}

}  // namespace detail

// --- row-level scores ------------------------------------------------------

inline double energy_row(const Eigen::Ref<const RowVector>& logits, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw ConfigError("energy temperature must be positive");
  return temperature * log_sum_exp(RowVector(logits / temperature));
}

inline double gen_row(const Eigen::Ref<const RowVector>& logits, double gamma, int top_m) {
  RowVector p = softmax(logits);
  std::sort(p.data(), p.data() + p.size(), std::greater<>());
  const int m = std::min<int>(top_m, static_cast<int>(p.size()));
  double acc = 0.0;
  for (int j = 0; j < m; ++j) acc += std::pow(p[j], gamma) * std::pow(1.0 - p[j], gamma);
  return -acc;
}

inline double kl_divergence(const Eigen::Ref<const RowVector>& p, const Eigen::Ref<const RowVector>& q,
                            double eps = kScoreEpsilon) {
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    kl += p[i] * (std::log(std::max(p[i], eps)) - std::log(std::max(q[i], eps)));
  }
  return std::max(kl, 0.0);
}

inline double vim_raw_row(const Eigen::Ref<const RowVector>& phi, const Eigen::Ref<const RowVector>& logits,
                          const CalibrationStats& stats) {
  return stats.vim_alpha * residual_norm(phi, stats.global_mean, stats.principal_basis) - log_sum_exp(logits);
}

inline double fdbd_row(const Eigen::Ref<const RowVector>& phi, const Eigen::Ref<const RowVector>& logits,
                       const Matrix& weights, const Eigen::Ref<const Vector>& global_mean) {
  const Eigen::Index K = logits.size();
  if (K < 2) throw ConfigError("fdbd needs at least two classes");
  const auto top = argmax_first(logits);
  double acc = 0.0;
  for (Eigen::Index c = 0; c < K; ++c) {
    if (c == top) continue;
    const double gap = std::max((weights.row(top) - weights.row(c)).norm(), kScoreEpsilon);
    acc += (logits[top] - logits[c]) / gap;
  }
  acc /= static_cast<double>(K - 1);
  const double dist = std::max((phi.transpose() - global_mean).norm(), kScoreEpsilon);
  return acc / dist;
}

inline double pca_row(const Eigen::Ref<const RowVector>& phi, const CalibrationStats& stats) {
  const Vector centered = phi.transpose() - stats.global_mean;
  const double projected = (stats.principal_basis.transpose() * centered).norm();
  return projected / std::max(centered.norm(), kScoreEpsilon);
}

// --- batch scorers ---------------------------------------------------------

inline ScoreVector msp(const Matrix& logits) {
  return detail::map_rows(logits.rows(), "msp", [&](Eigen::Index i) { return softmax(logits.row(i)).maxCoeff(); });
}

inline ScoreVector mls(const Matrix& logits) {
  return detail::map_rows(logits.rows(), "mls", [&](Eigen::Index i) { return logits.row(i).maxCoeff(); });
}

inline ScoreVector energy(const Matrix& logits, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw ConfigError("energy temperature must be positive");
  return detail::map_rows(logits.rows(), "energy", [&](Eigen::Index i) { return energy_row(logits.row(i), temperature); });
}

inline ScoreVector mahalanobis(const Matrix& features, const CalibrationStats& stats) {
  if (features.cols() != stats.feature_dim()) throw ShapeError("mahalanobis: feature dim mismatch");
  return detail::map_rows(features.rows(), "maha", [&](Eigen::Index i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < stats.class_means.rows(); ++c) {
      const Vector diff = (features.row(i) - stats.class_means.row(c)).transpose();
      best = std::min(best, diff.dot(stats.covariance_pinv * diff));
    }
    return -best;
  });
}

inline ScoreVector kl_matching(const Matrix& logits, const CalibrationStats& stats) {
  if (logits.cols() != stats.kl_templates.cols()) throw ShapeError("kl_matching: class count mismatch");
  return detail::map_rows(logits.rows(), "kl", [&](Eigen::Index i) {
    const RowVector p = softmax(logits.row(i));
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < stats.kl_templates.rows(); ++c) best = std::min(best, kl_divergence(p, stats.kl_templates.row(c)));
    return -best;
  });
}

/// Virtual-logit score in its native orientation (higher = OOD).
inline std::vector<double> vim_raw(const Matrix& features, const Matrix& logits, const CalibrationStats& stats) {
  detail::require_rows(features, logits);
  std::vector<double> out(static_cast<std::size_t>(features.rows()));
  for (Eigen::Index i = 0; i < features.rows(); ++i) out[static_cast<std::size_t>(i)] = vim_raw_row(features.row(i), logits.row(i), stats);
  return out;
}

/// Higher-is-ID detector: -vim_raw.
inline ScoreVector vim(const Matrix& features, const Matrix& logits, const CalibrationStats& stats) {
  auto raw = vim_raw(features, logits, stats);
  for (double& v : raw) v = -v;
  return make_scores(std::move(raw), "vim");
}

/// top_m <= 0 selects min(10, K).
inline ScoreVector gen(const Matrix& logits, double gamma = 0.1, int top_m = 0) {
  const int m = top_m > 0 ? top_m : std::min<int>(10, static_cast<int>(logits.cols()));
  return detail::map_rows(logits.rows(), "gen", [&](Eigen::Index i) { return gen_row(logits.row(i), gamma, m); });
}

inline ScoreVector she(const Matrix& features, const Matrix& logits, const CalibrationStats& stats) {
  detail::require_rows(features, logits);
  return detail::map_rows(features.rows(), "she", [&](Eigen::Index i) {
    return features.row(i).dot(stats.she_patterns.row(argmax_first(logits.row(i))));
  });
}

/// Energy times the mean of the k largest cosine similarities to the bank.
inline ScoreVector nnguide(const Matrix& features, const Matrix& logits, const CalibrationStats& stats, int k_nn) {
  detail::require_rows(features, logits);
  const Eigen::Index bank = stats.nn_bank.rows();
  if (k_nn < 1 || k_nn > bank) {
    throw ConfigError("nnguide k_nn=" + std::to_string(k_nn) + " must lie in [1, bank size " + std::to_string(bank) + "]");
  }
  return detail::map_rows(features.rows(), "nnguide", [&](Eigen::Index i) {
    const RowVector unit = features.row(i) / std::max(features.row(i).norm(), kScoreEpsilon);
    Vector sims = stats.nn_bank * unit.transpose();
    std::partial_sort(sims.data(), sims.data() + k_nn, sims.data() + sims.size(), std::greater<>());
    const double guidance = sims.head(k_nn).mean();
    return energy_row(logits.row(i)) * guidance;
  });
}

inline ScoreVector nnguide(const Matrix& features, const Matrix& logits, const CalibrationStats& stats) {
  return nnguide(features, logits, stats, stats.k_nn);
}

inline ScoreVector fdbd(const Matrix& features, const Matrix& logits, const CalibrationStats& stats) {
  detail::require_rows(features, logits);
  return detail::map_rows(features.rows(), "fdbd", [&](Eigen::Index i) {
    return fdbd_row(features.row(i), logits.row(i), stats.head_weights, stats.global_mean);
  });
}

inline ScoreVector pca_score(const Matrix& features, const CalibrationStats& stats) {
  return detail::map_rows(features.rows(), "pca", [&](Eigen::Index i) { return pca_row(features.row(i), stats); });
}

// --- truncated inputs ------------------------------------------------------

/// Features and logits after a truncation operator. Feature truncations
/// recompute logits with the unmodified head; DICE keeps the features and
/// masks the head instead.
struct TruncatedInputs {
  Matrix features;
  Matrix logits;
  std::size_t degenerate_rows = 0;
};

inline TruncatedInputs truncated_inputs(Truncation kind, const Matrix& features, const Matrix& logits,
                                        const CalibrationStats& stats) {
  if (kind == Truncation::kNone) return {features, logits, 0};
  const auto params = resolve_truncation(stats.truncation, stats.activation_percentiles);
  if (kind == Truncation::kDice) {
    const Matrix masked = dice_mask_weights(stats.head_weights, stats.global_mean, params.dice_sparsity);
    return {features, forward_head(features, masked, stats.head_bias), 0};
  }
  auto batch = truncate_features(kind, features, params);
  Matrix new_logits = forward_head(batch.features, stats.head_weights, stats.head_bias);
  return {std::move(batch.features), std::move(new_logits), batch.degenerate_rows};
}

}  // namespace mme
