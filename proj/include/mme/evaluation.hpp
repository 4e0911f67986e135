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

// Detection metrics (AUROC, FPR at a TPR level, separation gap), score
// covariance, and the synthetic generators behind the product-ensemble and
// truncation diagnostics.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mme/calibration.hpp"
#include "mme/ensemble.hpp"
#include "mme/error.hpp"
#include "mme/random.hpp"
#include "mme/scoring.hpp"
#include "mme/truncation.hpp"
#include "mme/types.hpp"

namespace mme {

namespace detail {

inline void require_metric_input(std::span<const double> id_scores, std::span<const double> ood_scores) {
  if (id_scores.empty() || ood_scores.empty()) throw EvalError("metrics need non-empty ID and OOD score sets");
  for (auto s : {id_scores, ood_scores}) {
    for (double v : s) {
      if (std::isnan(v)) throw EvalError("NaN score");
    }
  }
}

}  // namespace detail

/// Probability that a random (ID, OOD) pair is ordered ID-above-OOD, ties
/// counting one half (Mann-Whitney U / (n_id * n_ood)). O(n log n).
inline double auroc(std::span<const double> id_scores, std::span<const double> ood_scores) {
  detail::require_metric_input(id_scores, ood_scores);
  std::vector<std::pair<double, bool>> all;
  all.reserve(id_scores.size() + ood_scores.size());
  for (double v : id_scores) all.emplace_back(v, true);
  for (double v : ood_scores) all.emplace_back(v, false);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

  // Twice the U statistic, kept integral so the final division is the only
  // rounding step.
  std::uint64_t twice_u = 0;
  std::uint64_t ood_below = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    std::uint64_t id_here = 0, ood_here = 0;
    while (j < all.size() && all[j].first == all[i].first) {
      (all[j].second ? id_here : ood_here) += 1;
      ++j;
    }
    twice_u += id_here * (2 * ood_below + ood_here);
    ood_below += ood_here;
    i = j;
  }
  return static_cast<double>(twice_u) /
         (2.0 * static_cast<double>(id_scores.size()) * static_cast<double>(ood_scores.size()));
}

struct FprAtTpr {
  double fpr = 0.0;
  /// Largest threshold whose ID acceptance rate reaches the TPR level.
  double threshold = 0.0;
};

/// FPR at the largest threshold tau with #{id >= tau} / n_id >= tpr_level.
inline FprAtTpr fpr_at_tpr(std::span<const double> id_scores, std::span<const double> ood_scores, double tpr_level = 0.95) {
  detail::require_metric_input(id_scores, ood_scores);
  if (!(tpr_level > 0.0 && tpr_level <= 1.0)) throw ConfigError("tpr level must lie in (0, 1]");
  std::vector<double> id(id_scores.begin(), id_scores.end());
  std::sort(id.begin(), id.end(), std::greater<>());
  const double n_id = static_cast<double>(id.size());
  std::size_t k = 1;
  while (static_cast<double>(k) / n_id < tpr_level) ++k;
  const double tau = id[k - 1];
  std::size_t above = 0;
  for (double v : ood_scores) above += static_cast<std::size_t>(v >= tau);
  return {static_cast<double>(above) / static_cast<double>(ood_scores.size()), tau};
}

inline double fpr95(std::span<const double> id_scores, std::span<const double> ood_scores, double tpr_level = 0.95) {
  return fpr_at_tpr(id_scores, ood_scores, tpr_level).fpr;
}

inline double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Separation gap mean(id) - mean(ood).
inline double v_gap(std::span<const double> id_scores, std::span<const double> ood_scores) {
  detail::require_metric_input(id_scores, ood_scores);
  return mean_of(id_scores) - mean_of(ood_scores);
}

struct DetectionMetrics {
  double auroc = 0.0;
  double fpr95 = 0.0;
  double v_gap = 0.0;
  double threshold = 0.0;
  std::size_t n_id = 0;
  std::size_t n_ood = 0;
  std::string detector_name;
  std::string ood_name;
};

inline DetectionMetrics evaluate_detector(std::span<const double> id_scores, std::span<const double> ood_scores,
                                          std::string detector_name, std::string ood_name, double tpr_level = 0.95) {
  const auto op = fpr_at_tpr(id_scores, ood_scores, tpr_level);
  return {auroc(id_scores, ood_scores), op.fpr, v_gap(id_scores, ood_scores), op.threshold, id_scores.size(),
          ood_scores.size(), std::move(detector_name), std::move(ood_name)};
}

/// Sample covariance (n - 1 denominator) between every pair of detectors
/// scored on the same rows.
inline Matrix covariance_matrix(const std::vector<ScoreVector>& scores) {
  if (scores.empty()) throw EvalError("covariance of no detectors");
  const std::size_t n = scores.front().size();
  if (n < 2) throw EvalError("covariance needs at least two samples");
  const auto m = static_cast<Eigen::Index>(scores.size());
  Matrix centered(static_cast<Eigen::Index>(n), m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const auto& v = scores[static_cast<std::size_t>(j)].values;
    if (v.size() != n) throw ShapeError("covariance inputs differ in length");
    const double mu = mean_of(v);
    for (std::size_t i = 0; i < n; ++i) centered(static_cast<Eigen::Index>(i), j) = v[i] - mu;
  }
  Matrix cov(m, m);
  for (Eigen::Index a = 0; a < m; ++a) {
    for (Eigen::Index b = a; b < m; ++b) {
      cov(a, b) = cov(b, a) = centered.col(a).dot(centered.col(b)) / static_cast<double>(n - 1);
    }
  }
  return cov;
}

// ---------------------------------------------------------------------------
// Product-of-scores check on paired synthetic scores.

/// Parameters of the paired-score generator. Each side draws (S1, S2) from a
/// bivariate normal with per-side means, a common scale and correlation.
struct SyntheticSpec {
  std::vector<double> id_mean{1.0, 1.0};
  std::vector<double> ood_mean{0.0, 0.0};
  double id_scale = 1.0;
  double ood_scale = 1.0;
  double correlation_in = 0.8;
  double correlation_out = 0.2;
  std::size_t n_id = 10000;
  std::size_t n_ood = 10000;
  std::uint64_t seed = 0;
};

struct PairedScores {
  std::vector<double> s1_id, s2_id, s1_ood, s2_ood;
};

/// Draws one trial; both scores are then shifted (jointly over ID and OOD)
/// so their minimum is at least 1.
inline PairedScores generate_paired_scores(const SyntheticSpec& spec, CounterRng rng) {
  PairedScores out;
  auto draw = [&](std::size_t n, const std::vector<double>& mean, double scale, double rho, std::vector<double>& a,
                  std::vector<double>& b) {
    a.resize(n);
    b.resize(n);
    const double ortho = std::sqrt(std::max(0.0, 1.0 - rho * rho));
    for (std::size_t i = 0; i < n; ++i) {
      const double z1 = rng.normal();
      const double z2 = rng.normal();
      a[i] = mean[0] + scale * z1;
      b[i] = mean[1] + scale * (rho * z1 + ortho * z2);
    }
  };
  draw(spec.n_id, spec.id_mean, spec.id_scale, spec.correlation_in, out.s1_id, out.s2_id);
  draw(spec.n_ood, spec.ood_mean, spec.ood_scale, spec.correlation_out, out.s1_ood, out.s2_ood);
  auto floor_jointly = [](std::vector<double>& a, std::vector<double>& b) {
    std::vector<double> both(a);
    both.insert(both.end(), b.begin(), b.end());
    const double shift = unit_floor_shift(both);
    for (double& v : a) v += shift;
    for (double& v : b) v += shift;
  };
  floor_jointly(out.s1_id, out.s1_ood);
  floor_jointly(out.s2_id, out.s2_ood);
  return out;
}

struct Proposition1Report {
  std::size_t trials = 0;
  std::size_t passes = 0;
  /// Trials whose sample covariances satisfied Cov_in >= Cov_out.
  std::size_t covariance_premise_held = 0;
  /// Smallest V(S1 S2) - max(V(S1), V(S2)) seen.
  double min_margin = std::numeric_limits<double>::infinity();
  double tolerance = 1e-6;
  std::uint64_t seed = 0;

  double pass_rate() const { return trials ? static_cast<double>(passes) / static_cast<double>(trials) : 0.0; }
};

inline void validate_synthetic_spec(const SyntheticSpec& spec) {
  if (spec.id_mean.size() != 2 || spec.ood_mean.size() != 2) throw ConfigError("paired-score means must have two entries");
  if (!(spec.id_scale > 0.0 && spec.ood_scale > 0.0)) throw ConfigError("scales must be positive");
  if (std::abs(spec.correlation_in) > 1.0 || std::abs(spec.correlation_out) > 1.0) {
    throw ConfigError("correlations must lie in [-1, 1]");
  }
  if (spec.n_id < 2 || spec.n_ood < 2) throw ConfigError("need at least two samples per side");
  for (int k = 0; k < 2; ++k) {
    if (spec.id_mean[k] < spec.ood_mean[k]) {
      throw ConfigError("ID mean must not be below OOD mean (scores must be higher for ID)");
    }
  }
  const double cov_in = spec.correlation_in * spec.id_scale * spec.id_scale;
  const double cov_out = spec.correlation_out * spec.ood_scale * spec.ood_scale;
  if (cov_in < cov_out) throw ConfigError("generator covariance must satisfy Cov_in >= Cov_out");
}

namespace detail {

inline double sample_cov(const std::vector<double>& a, const std::vector<double>& b) {
  const double ma = mean_of(a), mb = mean_of(b);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - ma) * (b[i] - mb);
  return acc / static_cast<double>(a.size());
}

inline std::vector<double> elementwise_product(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

}  // namespace detail

/// Monte Carlo check that V(S1 * S2) >= max(V(S1), V(S2)) - tol on paired
/// scores whose ID covariance dominates their OOD covariance.
inline Proposition1Report proposition1_check(const SyntheticSpec& spec, std::size_t trials, double tolerance = 1e-6) {
  validate_synthetic_spec(spec);
  Proposition1Report report;
  report.trials = trials;
  report.tolerance = tolerance;
  report.seed = spec.seed;
  const CounterRng root(spec.seed, /*stream=*/0x70726f70ULL);
  for (std::size_t t = 0; t < trials; ++t) {
    const auto s = generate_paired_scores(spec, root.split(t));
    const double v1 = v_gap(s.s1_id, s.s1_ood);
    const double v2 = v_gap(s.s2_id, s.s2_ood);
    const double v12 = v_gap(detail::elementwise_product(s.s1_id, s.s2_id), detail::elementwise_product(s.s1_ood, s.s2_ood));
    const double margin = v12 - std::max(v1, v2);
    report.min_margin = std::min(report.min_margin, margin);
    report.passes += static_cast<std::size_t>(margin >= -tolerance);
    report.covariance_premise_held +=
        static_cast<std::size_t>(detail::sample_cov(s.s1_id, s.s2_id) >= detail::sample_cov(s.s1_ood, s.s2_ood));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Truncation check on a constructed feature family.

/// Bounded in-distribution activations versus heavy-tailed OOD activations,
/// scored by energy over a non-negative linear head.
///
/// ID entries are min(1.25 * bound * U, bound): a fifth of the mass sits on
/// the bound, so the ID 90th percentile equals the bound and clipping there
/// leaves every ID row untouched. OOD entries are `ood_scale` times a
/// Pareto(`ood_tail_shape`) excess. With W >= 0 the energy is monotone in
/// every activation, so clipping can only lower OOD scores.
struct TruncationFamilySpec {
  int feature_dim = 32;
  int num_classes = 10;
  double id_bound = 1.0;
  double ood_scale = 0.5;
  double ood_tail_shape = 1.5;
  /// Draw OOD from the ID distribution instead (null check).
  bool ood_same_as_id = false;
  std::size_t n_calibration = 2000;
  std::size_t n_id = 2000;
  std::size_t n_ood = 2000;
  std::uint64_t seed = 0;
};

struct TruncationFamily {
  Matrix calibration;
  Matrix id;
  Matrix ood;
  Matrix weights;
  Vector bias;
};

inline TruncationFamily generate_truncation_family(const TruncationFamilySpec& spec) {
  if (spec.feature_dim < 1 || spec.num_classes < 1) throw ConfigError("family dims must be positive");
  if (!(spec.id_bound > 0.0 && spec.ood_scale > 0.0 && spec.ood_tail_shape > 0.0)) {
    throw ConfigError("family scales must be positive");
  }
  const CounterRng root(spec.seed, /*stream=*/0x68797031ULL);
  auto rng_w = root.split(0);
  auto rng_c = root.split(1);
  auto rng_i = root.split(2);
  auto rng_o = root.split(3);
  const Eigen::Index d = spec.feature_dim;
  auto id_rows = [&](std::size_t n, CounterRng& rng) {
    Matrix m(static_cast<Eigen::Index>(n), d);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::min(1.25 * spec.id_bound * rng.uniform(), spec.id_bound);
    return m;
  };
  TruncationFamily fam;
  fam.weights.resize(spec.num_classes, d);
  for (Eigen::Index i = 0; i < fam.weights.size(); ++i) fam.weights.data()[i] = rng_w.uniform();
  fam.bias = Vector::Zero(spec.num_classes);
  fam.calibration = id_rows(spec.n_calibration, rng_c);
  fam.id = id_rows(spec.n_id, rng_i);
  if (spec.ood_same_as_id) {
    fam.ood = id_rows(spec.n_ood, rng_o);
  } else {
    fam.ood.resize(static_cast<Eigen::Index>(spec.n_ood), d);
    for (Eigen::Index i = 0; i < fam.ood.size(); ++i) fam.ood.data()[i] = spec.ood_scale * rng_o.pareto_excess(spec.ood_tail_shape);
  }
  return fam;
}

struct Hypothesis1Report {
  Truncation truncation = Truncation::kNone;
  double auroc_base = 0.0;
  double auroc_truncated = 0.0;
  double v_gap_base = 0.0;
  double v_gap_truncated = 0.0;
  /// Mean activation gap mean_ID[z] - mean_OOD[z], before and after g.
  double feature_gap_base = 0.0;
  double feature_gap_truncated = 0.0;
  /// Every ID activation was at or below the calibrated clip threshold.
  bool id_sub_threshold = false;
  std::uint64_t seed = 0;

  bool improved() const { return auroc_truncated >= auroc_base; }
};

/// Energy-score AUROC and separation gap with and without `kind` on the
/// constructed family. Truncation thresholds come from the calibration rows.
inline Hypothesis1Report hypothesis1_check(const TruncationFamilySpec& spec, Truncation kind,
                                           const TruncationParams& params = {}) {
  const auto fam = generate_truncation_family(spec);
  const auto percentiles = fit_activation_percentiles(fam.calibration, params.required_percentiles());
  const auto resolved = resolve_truncation(params, percentiles);
  const Vector mean_activation = fam.calibration.colwise().mean().transpose();

  auto energies = [&](const Matrix& z, Truncation t) {
    Matrix logits;
    if (t == Truncation::kDice) {
      logits = forward_head(z, dice_mask_weights(fam.weights, mean_activation, resolved.dice_sparsity), fam.bias);
    } else {
      logits = forward_head(truncate_features(t, z, resolved).features, fam.weights, fam.bias);
    }
    return energy(logits).values;
  };
  auto feature_gap = [&](Truncation t) {
    if (t == Truncation::kDice) return fam.id.mean() - fam.ood.mean();
    return truncate_features(t, fam.id, resolved).features.mean() - truncate_features(t, fam.ood, resolved).features.mean();
  };

  Hypothesis1Report r;
  r.truncation = kind;
  r.seed = spec.seed;
  const auto id_base = energies(fam.id, Truncation::kNone);
  const auto ood_base = energies(fam.ood, Truncation::kNone);
  const auto id_trunc = energies(fam.id, kind);
  const auto ood_trunc = energies(fam.ood, kind);
  r.auroc_base = auroc(id_base, ood_base);
  r.auroc_truncated = auroc(id_trunc, ood_trunc);
  r.v_gap_base = v_gap(id_base, ood_base);
  r.v_gap_truncated = v_gap(id_trunc, ood_trunc);
  r.feature_gap_base = feature_gap(Truncation::kNone);
  r.feature_gap_truncated = feature_gap(kind);
  r.id_sub_threshold = fam.id.maxCoeff() <= resolved.react_clip;
  return r;
}

// ---------------------------------------------------------------------------
// Two-Gaussian sanity data.

struct GaussianPair {
  Matrix train;
  LabelVector train_labels;
  Matrix id;
  Matrix ood;
};

/// ID ~ N(0, I_d); OOD ~ N(separation * e_1, I_d).
inline GaussianPair generate_gaussian_pair(int dim, double separation, std::size_t n_train, std::size_t n_test,
                                           std::uint64_t seed) {
  if (dim < 1) throw ConfigError("dim must be positive");
  const CounterRng root(seed, /*stream=*/0x67617573ULL);
  auto fill = [&](std::size_t n, double shift, CounterRng rng) {
    Matrix m(static_cast<Eigen::Index>(n), dim);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < dim; ++j) m(i, j) = rng.normal() + (j == 0 ? shift : 0.0);
    }
    return m;
  };
  GaussianPair g;
  g.train = fill(n_train, 0.0, root.split(0));
  g.train_labels.assign(n_train, 0);
  g.id = fill(n_test, 0.0, root.split(1));
  g.ood = fill(n_test, separation, root.split(2));
  return g;
}

}  // namespace mme
