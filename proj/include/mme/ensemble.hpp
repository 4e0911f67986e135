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

// Nearest-class-mean confidence (NME+), prediction consistency (CO / CO+),
// the multi-method product ensemble and a generic product-of-scores
// combinator.
//
// Products are evaluated in the log domain. Every downstream metric is
// rank-based, so log(MME) ranks samples exactly as MME does while staying
// finite where exp(energy - vim) would overflow.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mme/calibration.hpp"
#include "mme/error.hpp"
#include "mme/scoring.hpp"
#include "mme/truncation.hpp"
#include "mme/types.hpp"

namespace mme {

struct EnsembleParams {
  /// Softmax temperature of NME+ (0.5 for large-scale, 0.1 for small-scale).
  double temperature = 0.5;
  /// CO+ reward for agreeing predictions.
  double lambda = 2.0;
  /// Floor applied before every logarithm.
  double epsilon = 1e-12;

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (!(lambda >= 1.0)) throw ConfigError("lambda must be at least 1");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
  }
};

/// Euclidean distance from every row to every class mean (N x K).
inline Matrix class_distances(const Matrix& features, const Matrix& class_means) {
  if (features.cols() != class_means.cols()) throw ShapeError("class_distances: feature dim mismatch");
  Matrix out(features.rows(), class_means.rows());
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    for (Eigen::Index c = 0; c < class_means.rows(); ++c) out(i, c) = (features.row(i) - class_means.row(c)).norm();
  }
  return out;
}

/// log NME+ for one distance vector: log max_c 1/softmax(dist/T)_c
/// = log sum_j exp((d_j - d_min) / T). Always >= log K.
inline double nme_plus_log_row(const Eigen::Ref<const RowVector>& distances, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  const double d_min = distances.minCoeff();
  return log_sum_exp(RowVector((distances.array() - d_min).matrix() / temperature));
}

inline std::vector<double> nme_plus_log(const Matrix& features, const CalibrationStats& stats, double temperature) {
  const Matrix dist = class_distances(features, stats.class_means);
  std::vector<double> out(static_cast<std::size_t>(dist.rows()));
  for (Eigen::Index i = 0; i < dist.rows(); ++i) out[static_cast<std::size_t>(i)] = nme_plus_log_row(dist.row(i), temperature);
  return out;
}

/// NME+ on the linear scale. Rows whose value overflows are clamped (see
/// make_scores); use nme_plus_log inside products.
inline ScoreVector nme_plus(const Matrix& features, const CalibrationStats& stats, double temperature) {
  auto logs = nme_plus_log(features, stats, temperature);
  for (double& v : logs) v = std::exp(v);
  return make_scores(std::move(logs), "nme+");
}

struct PredictionPair {
  Eigen::Index c_mls = 0;
  Eigen::Index c_nme = 0;
  bool consistent() const noexcept { return c_mls == c_nme; }
};

inline PredictionPair prediction_from_rows(const Eigen::Ref<const RowVector>& logits,
                                           const Eigen::Ref<const RowVector>& distances) {
  return {argmax_first(logits), argmin_first(distances)};
}

inline std::vector<PredictionPair> predictions(const Matrix& features, const Matrix& logits, const CalibrationStats& stats) {
  if (features.rows() != logits.rows()) throw ShapeError("features and logits have different row counts");
  const Matrix dist = class_distances(features, stats.class_means);
  std::vector<PredictionPair> out(static_cast<std::size_t>(features.rows()));
  for (Eigen::Index i = 0; i < features.rows(); ++i) out[static_cast<std::size_t>(i)] = prediction_from_rows(logits.row(i), dist.row(i));
  return out;
}

inline int co(const PredictionPair& p) noexcept { return p.consistent() ? 1 : 0; }

inline double co_plus(const PredictionPair& p, double lambda) {
  if (!(lambda >= 1.0)) throw ConfigError("lambda must be at least 1");
  return p.consistent() ? lambda : 1.0;
}

inline ScoreVector co_plus(const std::vector<PredictionPair>& pairs, double lambda) {
  std::vector<double> v(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) v[i] = co_plus(pairs[i], lambda);
  return make_scores(std::move(v), "co+");
}

inline double consistency_ratio(const std::vector<PredictionPair>& pairs) {
  if (pairs.empty()) throw EvalError("consistency ratio of an empty split");
  std::size_t agree = 0;
  for (const auto& p : pairs) agree += static_cast<std::size_t>(co(p));
  return static_cast<double>(agree) / static_cast<double>(pairs.size());
}

/// Re-fits the statistics on VRA-truncated id_train features, using the
/// truncation thresholds resolved from `raw`. The nearest-neighbour bank is
/// not rebuilt since no ensemble component reads it.
inline CalibrationStats calibrate_truncated(const Matrix& features, const LabelVector& labels, const CalibrationStats& raw,
                                            CalibrationConfig config, Truncation kind = Truncation::kVra) {
  const auto params = resolve_truncation(raw.truncation, raw.activation_percentiles);
  auto batch = truncate_features(kind, features, params);
  const Matrix logits = forward_head(batch.features, raw.head_weights, raw.head_bias);
  config.nn_bank_size = 0;
  config.truncation = raw.truncation;
  return calibrate(batch.features, logits, labels, raw.head_weights, raw.head_bias, config);
}

// --- MME -------------------------------------------------------------------

/// Which truncation feeds each ensemble component. The defaults give the
/// reference ensemble; the alternatives drive truncation ablations.
struct MmeLayout {
  Truncation energy_term = Truncation::kScale;
  Truncation vim_term = Truncation::kVra;
  Truncation fdbd_term = Truncation::kVra;
  Truncation pca_term = Truncation::kVra;
  Truncation nme_term = Truncation::kNone;
  bool use_co_plus = true;
  /// Additional raw-feature detectors multiplied into the product
  /// ("gen", "nnguide", "she").
  std::vector<std::string> extras;
};

/// Per-row log-domain contributions; `total` is their sum.
struct MmeComponents {
  std::vector<double> energy_term;  // E over shaped logits
  std::vector<double> vim_raw;      // subtracted
  std::vector<double> log_fdbd;
  std::vector<double> log_pca;
  std::vector<double> log_co_plus;
  std::vector<double> log_nme_plus;
  std::vector<double> log_extras;
  std::vector<double> total;
};

/// log MME from already computed parts (linear fdbd / pca / co+).
inline double mme_log_from_parts(double energy_term, double vim_raw_value, double fdbd_value, double pca_value,
                                 double co_plus_value, double log_nme_plus_value, double eps = 1e-12) {
  return energy_term - vim_raw_value + std::log(std::max(fdbd_value, eps)) + std::log(std::max(pca_value, eps)) +
         std::log(std::max(co_plus_value, eps)) + log_nme_plus_value;
}

namespace detail {

inline const CalibrationStats& stats_for(Truncation kind, const CalibrationStats& raw, const CalibrationStats* vra) {
  if (kind != Truncation::kVra) return raw;
  if (vra == nullptr) throw ConfigError("VRA-refit statistics are required by this ensemble layout");
  return *vra;
}

/// Log contribution of an extra detector: GEN enters as exp(score) since it
/// is bounded above by zero; the others enter as log(max(score, eps)).
inline std::vector<double> extra_log_term(const std::string& name, const Matrix& features, const Matrix& logits,
                                          const CalibrationStats& stats, double eps) {
  ScoreVector s;
  if (name == "gen") {
    return gen(logits).values;
  } else if (name == "nnguide") {
    s = nnguide(features, logits, stats);
  } else if (name == "she") {
    s = she(features, logits, stats);
  } else {
    throw ConfigError("unsupported extra ensemble detector \"" + name + "\"");
  }
  for (double& v : s.values) v = std::log(std::max(v, eps));
  return s.values;
}

}  // namespace detail

inline MmeComponents mme_components(const Matrix& features, const Matrix& logits, const CalibrationStats& raw,
                                    const CalibrationStats* vra, const EnsembleParams& params,
                                    const MmeLayout& layout = {}) {
  params.validate();
  if (features.rows() != logits.rows()) throw ShapeError("features and logits have different row counts");
  const auto n = static_cast<std::size_t>(features.rows());
  const double eps = params.epsilon;
  MmeComponents out;

  {
    const auto in = truncated_inputs(layout.energy_term, features, logits, raw);
    out.energy_term = energy(in.logits).values;
  }
  {
    const auto& st = detail::stats_for(layout.vim_term, raw, vra);
    const auto in = truncated_inputs(layout.vim_term, features, logits, raw);
    out.vim_raw = vim_raw(in.features, in.logits, st);
  }
  {
    const auto& st = detail::stats_for(layout.fdbd_term, raw, vra);
    const auto in = truncated_inputs(layout.fdbd_term, features, logits, raw);
    out.log_fdbd = fdbd(in.features, in.logits, st).values;
    for (double& v : out.log_fdbd) v = std::log(std::max(v, eps));
  }
  {
    const auto& st = detail::stats_for(layout.pca_term, raw, vra);
    const auto in = truncated_inputs(layout.pca_term, features, logits, raw);
    out.log_pca = pca_score(in.features, st).values;
    for (double& v : out.log_pca) v = std::log(std::max(v, eps));
  }
  {
    const auto pairs = predictions(features, logits, raw);
    out.log_co_plus.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      out.log_co_plus[i] = layout.use_co_plus ? std::log(std::max(co_plus(pairs[i], params.lambda), eps)) : 0.0;
    }
  }
  {
    const auto& st = detail::stats_for(layout.nme_term, raw, vra);
    const auto in = truncated_inputs(layout.nme_term, features, logits, raw);
    out.log_nme_plus = nme_plus_log(in.features, st, params.temperature);
  }
  out.log_extras.assign(n, 0.0);
  for (const auto& name : layout.extras) {
    const auto term = detail::extra_log_term(name, features, logits, raw, eps);
    for (std::size_t i = 0; i < n; ++i) out.log_extras[i] += term[i];
  }

  out.total.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.total[i] = out.energy_term[i] - out.vim_raw[i] + out.log_fdbd[i] + out.log_pca[i] + out.log_co_plus[i] +
                   out.log_nme_plus[i] + out.log_extras[i];
  }
  return out;
}

/// log MME for every row.
inline ScoreVector mme(const Matrix& features, const Matrix& logits, const CalibrationStats& raw,
                       const CalibrationStats* vra, const EnsembleParams& params, const MmeLayout& layout = {}) {
  return make_scores(mme_components(features, logits, raw, vra, params, layout).total, "mme");
}

// --- generic product ensemble ----------------------------------------------

/// Shift that moves the minimum of `values` up to 1 (zero when it already is).
inline double unit_floor_shift(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  const double lo = *std::min_element(values.begin(), values.end());
  return lo >= 1.0 ? 0.0 : 1.0 - lo;
}

/// log(prod_j (S_j + shift_j)). Without explicit shifts each score is moved
/// so its minimum over this batch is at least 1. Pass shifts computed on the
/// union of ID and OOD rows when the two are scored separately.
inline ScoreVector product_ensemble(const std::vector<ScoreVector>& scores,
                                    std::optional<std::vector<double>> shifts = std::nullopt) {
  if (scores.size() < 2) throw ConfigError("product ensemble needs at least two score vectors");
  const std::size_t n = scores.front().size();
  for (const auto& s : scores) {
    if (s.size() != n) throw ShapeError("product ensemble inputs differ in length");
  }
  if (shifts && shifts->size() != scores.size()) throw ConfigError("one shift per score vector is required");
  std::vector<double> out(n, 0.0);
  std::string name = "prod(";
  for (std::size_t j = 0; j < scores.size(); ++j) {
    const double shift = shifts ? (*shifts)[j] : unit_floor_shift(scores[j].values);
    if (!(shift >= 0.0)) throw ConfigError("product ensemble shifts must be non-negative");
    for (std::size_t i = 0; i < n; ++i) {
      const double v = scores[j].values[i] + shift;
      if (!(v > 0.0)) throw NumericError("shifted score is not positive; pass a larger shift");
      out[i] += std::log(v);
    }
    name += (j ? "," : "") + scores[j].detector_name;
  }
  return make_scores(std::move(out), name + ")");
}

}  // namespace mme
