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

// Feature truncation operators g(z) applied to penultimate activations
// before the classifier head.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "mme/error.hpp"
#include "mme/types.hpp"

namespace mme {

struct TruncationParams {
  double react_percentile = 90.0;
  double vra_low_percentile = 60.0;
  double vra_shift = 0.5;
  double vra_high_percentile = 95.0;
  double ash_prune_percent = 90.0;
  double scale_top_percent = 10.0;
  /// Percent of head weight contributions masked by DICE.
  double dice_sparsity = 70.0;

  void validate() const {
    auto open_percent = [](double p, const char* name) {
      if (!(p > 0.0 && p < 100.0)) throw ConfigError(std::string(name) + " must lie in (0, 100)");
    };
    open_percent(react_percentile, "react_percentile");
    open_percent(vra_low_percentile, "vra_low_percentile");
    open_percent(vra_high_percentile, "vra_high_percentile");
    if (!(vra_low_percentile < vra_high_percentile)) throw ConfigError("vra_low_percentile must be below vra_high_percentile");
    if (!(vra_shift >= 0.0)) throw ConfigError("vra_shift must be non-negative");
    if (!(ash_prune_percent >= 0.0 && ash_prune_percent < 100.0)) throw ConfigError("ash_prune_percent must lie in [0, 100)");
    if (!(scale_top_percent > 0.0 && scale_top_percent <= 100.0)) throw ConfigError("scale_top_percent must lie in (0, 100]");
    if (!(dice_sparsity >= 0.0 && dice_sparsity < 100.0)) throw ConfigError("dice_sparsity must lie in [0, 100)");
  }

  /// Activation percentiles the calibration step has to provide.
  std::vector<double> required_percentiles() const {
    std::vector<double> p{react_percentile, vra_low_percentile, vra_high_percentile};
    std::sort(p.begin(), p.end());
    p.erase(std::unique(p.begin(), p.end()), p.end());
    return p;
  }

  friend bool operator==(const TruncationParams&, const TruncationParams&) = default;
};

enum class Truncation { kNone, kReact, kVra, kAshS, kScale, kDice };

inline std::string_view truncation_name(Truncation t) {
  switch (t) {
    case Truncation::kNone: return "none";
    case Truncation::kReact: return "react";
    case Truncation::kVra: return "vra";
    case Truncation::kAshS: return "ash";
    case Truncation::kScale: return "scale";
    case Truncation::kDice: return "dice";
  }
  return "?";
}

inline Truncation parse_truncation(std::string_view name) {
  for (auto t : {Truncation::kNone, Truncation::kReact, Truncation::kVra, Truncation::kAshS, Truncation::kScale,
                 Truncation::kDice}) {
    if (truncation_name(t) == name) return t;
  }
  if (name == "base" || name == "identity") return Truncation::kNone;
  throw ConfigError("unknown truncation \"" + std::string(name) + "\"");
}

/// Truncation parameters with percentile levels replaced by the calibrated
/// activation values they refer to.
struct ResolvedTruncation {
  double react_clip = 0.0;
  double vra_low = 0.0;
  double vra_shift = 0.5;
  double vra_high = 0.0;
  double ash_prune_percent = 90.0;
  double scale_top_percent = 10.0;
  double dice_sparsity = 70.0;
};

inline ResolvedTruncation resolve_truncation(const TruncationParams& params,
                                             const std::map<double, double>& activation_percentiles) {
  params.validate();
  auto lookup = [&](double level, const char* what) {
    auto it = activation_percentiles.find(level);
    if (it == activation_percentiles.end()) {
      throw ConfigError(std::string("activation percentile ") + std::to_string(level) + " (" + what +
                        ") was not calibrated");
    }
    return it->second;
  };
  ResolvedTruncation r;
  r.react_clip = lookup(params.react_percentile, "react");
  r.vra_low = lookup(params.vra_low_percentile, "vra low");
  r.vra_high = lookup(params.vra_high_percentile, "vra high");
  r.vra_shift = params.vra_shift;
  r.ash_prune_percent = params.ash_prune_percent;
  r.scale_top_percent = params.scale_top_percent;
  r.dice_sparsity = params.dice_sparsity;
  return r;
}

namespace detail {

/// Number of entries out of n that a percentage selects, rounded half-to-even
/// and kept in [1, n].
inline Eigen::Index percent_count(Eigen::Index n, double percent) {
  const auto k = static_cast<Eigen::Index>(std::nearbyint(static_cast<double>(n) * percent / 100.0));
  return std::clamp<Eigen::Index>(k, 1, n);
}

/// Indices ordered by descending value; equal values keep ascending index.
template <typename Row>
std::vector<Eigen::Index> descending_order(const Row& z) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(z.size()));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::stable_sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) { return z[a] > z[b]; });
  return idx;
}

}  // namespace detail

/// Result of a shaping operator that may refuse degenerate rows.
struct ShapedRow {
  RowVector values;
  bool degenerate = false;
};

/// ReAct: elementwise min(z_i, clip).
inline RowVector react(const Eigen::Ref<const RowVector>& z, double clip) {
  if (!std::isfinite(clip)) throw ConfigError("react clip threshold must be finite");
  return z.cwiseMin(clip);
}

/// VRA: zero below `low`, shift by `shift` on [low, high], clamp to `high` above.
inline RowVector vra(const Eigen::Ref<const RowVector>& z, double low, double shift, double high) {
  if (!(low < high)) throw ConfigError("vra requires low < high");
  RowVector out(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double v = z[i];
    if (v < low) {
      out[i] = 0.0;
    } else if (v <= high) {
      out[i] = v + shift;
    } else {
      out[i] = high;
    }
  }
  return out;
}

/// ASH-S: keep the largest (100 - prune_percent)% entries, zero the rest and
/// rescale the survivors by exp(sum(z) / sum(kept)).
inline ShapedRow ash_s(const Eigen::Ref<const RowVector>& z, double prune_percent) {
  const Eigen::Index n = z.size();
  if (n == 0) return {RowVector(z), false};
  const Eigen::Index keep = std::max<Eigen::Index>(1, n - static_cast<Eigen::Index>(std::nearbyint(n * prune_percent / 100.0)));
  const auto order = detail::descending_order(z);
  const double s1 = z.sum();
  double s2 = 0.0;
  for (Eigen::Index j = 0; j < keep; ++j) s2 += z[order[static_cast<std::size_t>(j)]];
  if (!(s2 > 0.0)) return {RowVector(z), true};
  const double factor = std::exp(s1 / s2);
  RowVector out = RowVector::Zero(n);
  for (Eigen::Index j = 0; j < keep; ++j) {
    const auto i = order[static_cast<std::size_t>(j)];
    out[i] = z[i] * factor;
  }
  return {std::move(out), false};
}

/// SCALE: multiply the whole row by exp(sum(z) / sum(top top_percent% of z)).
inline ShapedRow scale_shape(const Eigen::Ref<const RowVector>& z, double top_percent) {
  const Eigen::Index n = z.size();
  if (n == 0) return {RowVector(z), false};
  const Eigen::Index top = detail::percent_count(n, top_percent);
  const auto order = detail::descending_order(z);
  const double s1 = z.sum();
  double s2 = 0.0;
  for (Eigen::Index j = 0; j < top; ++j) s2 += z[order[static_cast<std::size_t>(j)]];
  if (!(s2 > 0.0)) return {RowVector(z), true};
  return {z * std::exp(s1 / s2), false};
}

/// DICE head: weights whose contribution W[c,i] * mean_activation[i] is not
/// among the largest (100 - sparsity)% are zeroed.
inline Matrix dice_mask_weights(const Matrix& weights, const Eigen::Ref<const Vector>& mean_activation,
                                double sparsity_percent) {
  if (weights.cols() != mean_activation.size()) throw ShapeError("dice: mean activation length must equal feature dim");
  if (!(sparsity_percent >= 0.0 && sparsity_percent < 100.0)) throw ConfigError("dice sparsity must lie in [0, 100)");
  const Eigen::Index total = weights.size();
  const Eigen::Index keep = std::max<Eigen::Index>(
      1, total - static_cast<Eigen::Index>(std::nearbyint(total * sparsity_percent / 100.0)));
  RowVector contrib(total);
  for (Eigen::Index c = 0; c < weights.rows(); ++c) {
    for (Eigen::Index i = 0; i < weights.cols(); ++i) {
      contrib[c * weights.cols() + i] = weights(c, i) * mean_activation[i];
    }
  }
  const auto order = detail::descending_order(contrib);
  Matrix masked = Matrix::Zero(weights.rows(), weights.cols());
  for (Eigen::Index j = 0; j < keep; ++j) {
    const auto flat = order[static_cast<std::size_t>(j)];
    masked.data()[flat] = weights.data()[flat];
  }
  return masked;
}

/// DICE logits for one row: masked(W) z + b.
inline RowVector dice_forward(const Eigen::Ref<const RowVector>& z, const Matrix& weights,
                              const Eigen::Ref<const Vector>& bias, double sparsity_percent,
                              const Eigen::Ref<const Vector>& mean_activation) {
  const Matrix masked = dice_mask_weights(weights, mean_activation, sparsity_percent);
  return (masked * z.transpose() + bias).transpose();
}

/// A batch of truncated features and how many rows passed through unchanged
/// because their shaping denominator was not positive.
struct TruncatedBatch {
  Matrix features;
  std::size_t degenerate_rows = 0;
};

/// Applies a feature-level truncation to every row. DICE acts on the head,
/// not the features, so it returns the input unchanged here.
inline TruncatedBatch truncate_features(Truncation kind, const Matrix& features, const ResolvedTruncation& params) {
  TruncatedBatch out{Matrix(features.rows(), features.cols()), 0};
  for (Eigen::Index r = 0; r < features.rows(); ++r) {
    const auto row = features.row(r);
    switch (kind) {
      case Truncation::kNone:
      case Truncation::kDice:
        out.features.row(r) = row;
        break;
      case Truncation::kReact:
        out.features.row(r) = react(row, params.react_clip);
        break;
      case Truncation::kVra:
        out.features.row(r) = vra(row, params.vra_low, params.vra_shift, params.vra_high);
        break;
      case Truncation::kAshS: {
        auto shaped = ash_s(row, params.ash_prune_percent);
        out.features.row(r) = shaped.values;
        out.degenerate_rows += shaped.degenerate;
        break;
      }
      case Truncation::kScale: {
        auto shaped = scale_shape(row, params.scale_top_percent);
        out.features.row(r) = shaped.values;
        out.degenerate_rows += shaped.degenerate;
        break;
      }
    }
  }
  return out;
}

}  // namespace mme
