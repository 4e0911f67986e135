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

// In-distribution statistics consumed by the truncation operators and the
// scoring functions. Everything here is fitted once on the id_train split.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "mme/error.hpp"
#include "mme/random.hpp"
#include "mme/tensor_store.hpp"
#include "mme/truncation.hpp"
#include "mme/types.hpp"
#include "mme/version.hpp"

namespace mme {

struct CalibrationConfig {
  /// Principal subspace dimension; 0 selects min(d / 2, 256).
  int subspace_dim = 0;
  /// Rows kept in the nearest-neighbour bank; 0 disables the bank, negative
  /// selects min(N, 10000).
  long nn_bank_size = -1;
  int k_nn = 10;
  std::uint64_t seed = 0;
  TruncationParams truncation;
  /// Extra activation percentiles to record besides the truncation ones.
  std::vector<double> extra_percentiles;

  int resolved_subspace_dim(int feature_dim) const {
    return subspace_dim > 0 ? subspace_dim : std::min(feature_dim / 2, 256);
  }

  std::vector<double> percentile_levels() const {
    auto levels = truncation.required_percentiles();
    levels.insert(levels.end(), extra_percentiles.begin(), extra_percentiles.end());
    std::sort(levels.begin(), levels.end());
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
    return levels;
  }
};

struct CalibrationStats {
  Matrix class_means;         // K x d
  Vector global_mean;         // d
  Matrix covariance;          // d x d
  Matrix covariance_pinv;     // d x d
  Matrix principal_basis;     // d x D, orthonormal columns
  double vim_alpha = 0.0;
  std::map<double, double> activation_percentiles;
  Matrix kl_templates;        // K x K
  Matrix she_patterns;        // K x d
  Matrix nn_bank;             // M x d, unit rows
  Matrix head_weights;        // K x d
  Vector head_bias;           // K

  // Configuration echo.
  int subspace_dim = 0;
  int k_nn = 10;
  std::uint64_t seed = 0;
  TruncationParams truncation;

  int num_classes() const { return static_cast<int>(class_means.rows()); }
  int feature_dim() const { return static_cast<int>(class_means.cols()); }
};

namespace detail {

inline void require_all_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string(what) + " contains non-finite values");
}

inline void check_labels(const LabelVector& labels, Eigen::Index rows, int K) {
  if (static_cast<Eigen::Index>(labels.size()) != rows) {
    throw ShapeError("label count " + std::to_string(labels.size()) + " does not match " + std::to_string(rows) + " rows");
  }
  for (auto y : labels) {
    if (y < 0 || y >= K) throw LabelError("label " + std::to_string(y) + " outside [0, " + std::to_string(K) + ")");
  }
}

}  // namespace detail

/// Per-class arithmetic means (row y = mean of samples labelled y).
inline Matrix fit_class_means(const Matrix& features, const LabelVector& labels, int num_classes) {
  if (num_classes <= 0) throw ConfigError("num_classes must be positive");
  detail::check_labels(labels, features.rows(), num_classes);
  Matrix sums = Matrix::Zero(num_classes, features.cols());
  std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    sums.row(labels[static_cast<std::size_t>(i)]) += features.row(i);
    ++counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
  }
  for (int c = 0; c < num_classes; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) {
      throw CalibrationError("class " + std::to_string(c) + " has no calibration samples");
    }
    sums.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
  }
  return sums;
}

/// Moore-Penrose inverse of a symmetric PSD matrix. Eigenvalues below
/// `rel_cutoff * lambda_max` are treated as zero.
inline Matrix symmetric_pseudo_inverse(const Matrix& sym, double rel_cutoff = 1e-10) {
  const Eigen::Index d = sym.rows();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(Eigen::MatrixXd(sym), Eigen::ComputeEigenvectors);
  if (eig.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  const Eigen::VectorXd& lambda = eig.eigenvalues();
  const double lambda_max = d > 0 ? lambda.maxCoeff() : 0.0;
  Matrix pinv = Matrix::Zero(d, d);
  if (!(lambda_max > 0.0)) return pinv;
  const double cutoff = rel_cutoff * lambda_max;
  const Eigen::MatrixXd& V = eig.eigenvectors();
  for (Eigen::Index k = 0; k < d; ++k) {
    if (lambda[k] < cutoff) continue;
    pinv.noalias() += (V.col(k) / lambda[k]) * V.col(k).transpose();
  }
  return (pinv + pinv.transpose()) * 0.5;
}

struct CovarianceFit {
  Matrix covariance;
  Matrix pinv;
};

/// Shared within-class covariance with 1/N normalisation, plus its
/// pseudo-inverse.
inline CovarianceFit fit_shared_covariance(const Matrix& features, const LabelVector& labels, const Matrix& class_means) {
  const Eigen::Index n = features.rows();
  if (n <= 1) throw CalibrationError("shared covariance needs more than one sample");
  detail::require_all_finite(features, "features");
  detail::check_labels(labels, n, static_cast<int>(class_means.rows()));
  Matrix centered(n, features.cols());
  for (Eigen::Index i = 0; i < n; ++i) centered.row(i) = features.row(i) - class_means.row(labels[static_cast<std::size_t>(i)]);
  Matrix cov = (centered.transpose() * centered) / static_cast<double>(n);
  cov = (cov + cov.transpose()) * 0.5;
  Matrix pinv = symmetric_pseudo_inverse(cov);
  return {std::move(cov), std::move(pinv)};
}

inline Vector fit_global_mean(const Matrix& features) {
  if (features.rows() == 0) throw CalibrationError("global mean of an empty split");
  return features.colwise().mean().transpose();
}

/// Top-D eigenvectors of the centred second-moment matrix, in descending
/// eigenvalue order. Each column's largest-magnitude entry is made positive.
inline Matrix fit_principal_subspace(const Matrix& features, const Eigen::Ref<const Vector>& global_mean, int dim) {
  const Eigen::Index d = features.cols();
  if (dim < 1 || dim >= d) {
    throw ConfigError("subspace dimension " + std::to_string(dim) + " must lie in [1, " + std::to_string(d) + ")");
  }
  if (features.rows() == 0) throw CalibrationError("principal subspace of an empty split");
  Matrix centered = features.rowwise() - global_mean.transpose();
  Eigen::MatrixXd moment = (centered.transpose() * centered) / static_cast<double>(features.rows());
  moment = (moment + moment.transpose()) * 0.5;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(moment, Eigen::ComputeEigenvectors);
  if (eig.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  Matrix basis(d, dim);
  for (int j = 0; j < dim; ++j) {
    Vector col = eig.eigenvectors().col(d - 1 - j);
    Eigen::Index pivot = 0;
    for (Eigen::Index i = 1; i < d; ++i) {
      if (std::abs(col[i]) > std::abs(col[pivot])) pivot = i;
    }
    if (col[pivot] < 0) col = -col;
    basis.col(j) = col;
  }
  return basis;
}

/// Norm of the component of (phi - global_mean) orthogonal to span(basis).
inline double residual_norm(const Eigen::Ref<const RowVector>& phi, const Eigen::Ref<const Vector>& global_mean,
                            const Matrix& basis) {
  const Vector centered = phi.transpose() - global_mean;
  const Vector residual = centered - basis * (basis.transpose() * centered);
  return residual.norm();
}

/// Virtual-logit scale: mean max-logit over mean residual norm.
inline double fit_vim_alpha(const Matrix& features, const Matrix& logits, const Matrix& basis,
                            const Eigen::Ref<const Vector>& global_mean) {
  const Eigen::Index n = features.rows();
  if (n == 0 || logits.rows() != n) throw CalibrationError("vim alpha needs a non-empty split with matching logits");
  double max_logit_sum = 0.0;
  double residual_sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    max_logit_sum += logits.row(i).maxCoeff();
    residual_sum += residual_norm(features.row(i), global_mean, basis);
  }
  const double mean_residual = residual_sum / static_cast<double>(n);
  if (!(mean_residual > 0.0)) throw CalibrationError("mean residual norm is zero; features lie inside the principal subspace");
  const double alpha = (max_logit_sum / static_cast<double>(n)) / mean_residual;
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw CalibrationError("vim alpha must be positive (mean max-logit is not positive)");
  }
  return alpha;
}

/// Linear interpolation between order statistics of a sorted sequence at
/// rank position level/100 * (n - 1).
inline double interpolate_sorted(double lo, double hi, double frac) { return lo + (hi - lo) * frac; }

/// Percentiles over all N*d activation entries.
inline std::map<double, double> fit_activation_percentiles(const Matrix& features, const std::vector<double>& levels) {
  for (double p : levels) {
    if (!(p > 0.0 && p < 100.0)) throw ConfigError("percentile level " + std::to_string(p) + " outside (0, 100)");
  }
  std::map<double, double> out;
  if (levels.empty()) return out;
  if (features.size() == 0) throw CalibrationError("percentiles of an empty split");
  std::vector<double> values(features.data(), features.data() + features.size());
  const std::size_t n = values.size();
  for (double p : levels) {
    const double pos = p / 100.0 * static_cast<double>(n - 1);
    const auto lo_idx = static_cast<std::size_t>(std::floor(pos));
    const double frac = pos - static_cast<double>(lo_idx);
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo_idx), values.end());
    const double lo = values[lo_idx];
    const double hi = lo_idx + 1 < n ? *std::min_element(values.begin() + static_cast<std::ptrdiff_t>(lo_idx) + 1, values.end()) : lo;
    out[p] = interpolate_sorted(lo, hi, frac);
  }
  return out;
}

/// Mean softmax vector per predicted class; classes never predicted fall back
/// to the mean over their true-label samples.
inline Matrix fit_kl_templates(const Matrix& logits, const LabelVector& labels) {
  const int K = static_cast<int>(logits.cols());
  detail::check_labels(labels, logits.rows(), K);
  Matrix by_pred = Matrix::Zero(K, K);
  Matrix by_label = Matrix::Zero(K, K);
  std::vector<std::int64_t> n_pred(static_cast<std::size_t>(K), 0), n_label(static_cast<std::size_t>(K), 0);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const RowVector p = softmax(logits.row(i));
    const auto c = argmax_first(logits.row(i));
    by_pred.row(c) += p;
    ++n_pred[static_cast<std::size_t>(c)];
    const auto y = labels[static_cast<std::size_t>(i)];
    by_label.row(y) += p;
    ++n_label[static_cast<std::size_t>(y)];
  }
  Matrix templates(K, K);
  for (int c = 0; c < K; ++c) {
    if (n_pred[static_cast<std::size_t>(c)] > 0) {
      templates.row(c) = by_pred.row(c) / static_cast<double>(n_pred[static_cast<std::size_t>(c)]);
    } else if (n_label[static_cast<std::size_t>(c)] > 0) {
      templates.row(c) = by_label.row(c) / static_cast<double>(n_label[static_cast<std::size_t>(c)]);
    } else {
      throw CalibrationError("class " + std::to_string(c) + " has neither predictions nor labels for its KL template");
    }
  }
  return templates;
}

/// Mean feature of correctly classified samples per class, falling back to
/// the class mean.
inline Matrix fit_she_patterns(const Matrix& features, const Matrix& logits, const LabelVector& labels,
                               const Matrix& class_means) {
  const int K = static_cast<int>(class_means.rows());
  detail::check_labels(labels, features.rows(), K);
  if (logits.rows() != features.rows() || logits.cols() != K) throw ShapeError("she: logits must be N x K");
  Matrix sums = Matrix::Zero(K, features.cols());
  std::vector<std::int64_t> counts(static_cast<std::size_t>(K), 0);
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    const auto y = labels[static_cast<std::size_t>(i)];
    if (argmax_first(logits.row(i)) != y) continue;
    sums.row(y) += features.row(i);
    ++counts[static_cast<std::size_t>(y)];
  }
  for (int c = 0; c < K; ++c) {
    const auto n = counts[static_cast<std::size_t>(c)];
    sums.row(c) = n > 0 ? RowVector(sums.row(c) / static_cast<double>(n)) : RowVector(class_means.row(c));
  }
  return sums;
}

/// Row indices sorted lexicographically by feature values. Sampling in this
/// order makes the bank independent of the input row order.
inline std::vector<Eigen::Index> canonical_row_order(const Matrix& features) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(features.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index j = 0; j < features.cols(); ++j) {
      if (features(a, j) != features(b, j)) return features(a, j) < features(b, j);
    }
    return false;
  });
  return order;
}

/// Uniform subsample of M rows without replacement, each l2-normalised.
inline Matrix build_nn_bank(const Matrix& features, Eigen::Index bank_size, std::uint64_t seed) {
  const Eigen::Index n = features.rows();
  if (bank_size < 0) throw ConfigError("nn bank size must be non-negative");
  if (bank_size > n) {
    throw ConfigError("nn bank size " + std::to_string(bank_size) + " exceeds " + std::to_string(n) + " samples");
  }
  auto order = canonical_row_order(features);
  CounterRng rng(seed, /*stream=*/0x6e6e62616e6bULL);
  // Partial Fisher-Yates over the canonical order.
  for (Eigen::Index j = 0; j < bank_size; ++j) {
    const auto pick = j + static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n - j)));
    std::swap(order[static_cast<std::size_t>(j)], order[static_cast<std::size_t>(pick)]);
  }
  Matrix bank(bank_size, features.cols());
  for (Eigen::Index j = 0; j < bank_size; ++j) {
    const auto src = order[static_cast<std::size_t>(j)];
    const double norm = features.row(src).norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      throw NumericError("feature row " + std::to_string(src) + " has zero or non-finite norm");
    }
    bank.row(j) = features.row(src) / norm;
  }
  return bank;
}

/// Runs every fit on one labelled calibration split.
inline CalibrationStats calibrate(const Matrix& features, const Matrix& logits, const LabelVector& labels,
                                  const Matrix& head_weights, const Vector& head_bias, const CalibrationConfig& config) {
  const auto K = static_cast<int>(head_weights.rows());
  const auto d = static_cast<int>(features.cols());
  if (features.rows() == 0) throw CalibrationError("calibration split is empty");
  if (head_weights.cols() != d || head_bias.size() != K) throw ShapeError("head shape does not match features");
  if (logits.rows() != features.rows() || logits.cols() != K) throw ShapeError("logits must be N x K");
  detail::require_all_finite(features, "features");
  detail::require_all_finite(logits, "logits");
  config.truncation.validate();
  if (config.k_nn < 1) throw ConfigError("k_nn must be at least 1");

  CalibrationStats s;
  s.subspace_dim = config.resolved_subspace_dim(d);
  s.k_nn = config.k_nn;
  s.seed = config.seed;
  s.truncation = config.truncation;
  s.head_weights = head_weights;
  s.head_bias = head_bias;

  s.class_means = fit_class_means(features, labels, K);
  s.global_mean = fit_global_mean(features);
  auto cov = fit_shared_covariance(features, labels, s.class_means);
  s.covariance = std::move(cov.covariance);
  s.covariance_pinv = std::move(cov.pinv);
  s.principal_basis = fit_principal_subspace(features, s.global_mean, s.subspace_dim);
  s.vim_alpha = fit_vim_alpha(features, logits, s.principal_basis, s.global_mean);
  s.activation_percentiles = fit_activation_percentiles(features, config.percentile_levels());
  s.kl_templates = fit_kl_templates(logits, labels);
  s.she_patterns = fit_she_patterns(features, logits, labels, s.class_means);
  const Eigen::Index bank = config.nn_bank_size < 0 ? std::min<Eigen::Index>(features.rows(), 10000)
                                                    : static_cast<Eigen::Index>(config.nn_bank_size);
  s.nn_bank = build_nn_bank(features, bank, config.seed);
  return s;
}

/// Labelled calibration data gathered from every id_train split.
struct CalibrationData {
  Matrix features;
  Matrix logits;
  LabelVector labels;
};

inline CalibrationData gather_id_train(const DatasetManifest& manifest) {
  const auto train = manifest.with_role(SplitRole::kIdTrain);
  if (train.empty()) throw CalibrationError("manifest has no id_train split");
  Eigen::Index rows = 0;
  for (const auto* s : train) rows += static_cast<Eigen::Index>(s->size());
  CalibrationData data{Matrix(rows, manifest.feature_dim), Matrix(rows, manifest.num_classes), {}};
  data.labels.reserve(static_cast<std::size_t>(rows));
  Eigen::Index at = 0;
  for (const auto* s : train) {
    const auto n = static_cast<Eigen::Index>(s->size());
    data.features.middleRows(at, n) = to_matrix(s->features);
    data.logits.middleRows(at, n) = to_matrix(s->logits);
    const auto labels = to_labels(*s->labels);
    data.labels.insert(data.labels.end(), labels.begin(), labels.end());
    at += n;
  }
  return data;
}

inline CalibrationStats calibrate_all(const DatasetManifest& manifest, const CalibrationConfig& config) {
  const auto data = gather_id_train(manifest);
  return calibrate(data.features, data.logits, data.labels, to_matrix(manifest.head_weights),
                   to_vector(manifest.head_bias), config);
}

/// Checks the structural invariants of a stats object; returns a list of
/// human-readable violations (empty when everything holds).
inline std::vector<std::string> check_invariants(const CalibrationStats& s) {
  std::vector<std::string> bad;
  const Eigen::Index D = s.principal_basis.cols();
  if (D > 0) {
    const Matrix gram = s.principal_basis.transpose() * s.principal_basis;
    if ((gram - Matrix::Identity(D, D)).cwiseAbs().maxCoeff() > 1e-6) bad.push_back("principal basis not orthonormal");
  }
  if (s.covariance.size() > 0) {
    if ((s.covariance - s.covariance.transpose()).cwiseAbs().maxCoeff() > 1e-8) bad.push_back("covariance not symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(Eigen::MatrixXd(s.covariance), Eigen::EigenvaluesOnly);
    const double scale = std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
    if (eig.eigenvalues().minCoeff() < -1e-8 * scale) bad.push_back("covariance not positive semidefinite");
  }
  if (!(s.vim_alpha > 0.0)) bad.push_back("vim alpha not positive");
  for (Eigen::Index r = 0; r < s.nn_bank.rows(); ++r) {
    if (std::abs(s.nn_bank.row(r).norm() - 1.0) > 1e-6) {
      bad.push_back("nn bank row " + std::to_string(r) + " not unit norm");
      break;
    }
  }
  double prev = -std::numeric_limits<double>::infinity();
  for (const auto& [level, value] : s.activation_percentiles) {
    if (value < prev) bad.push_back("activation percentiles not monotone");
    prev = value;
  }
  for (Eigen::Index r = 0; r < s.kl_templates.rows(); ++r) {
    if (std::abs(s.kl_templates.row(r).sum() - 1.0) > 1e-9) bad.push_back("kl template row does not sum to 1");
  }
  return bad;
}

// ---------------------------------------------------------------------------
// Persistence: one NPY per array field plus a stats.json index.

inline nlohmann::json truncation_to_json(const TruncationParams& t) {
  return {{"react_percentile", t.react_percentile},       {"vra_low_percentile", t.vra_low_percentile},
          {"vra_shift", t.vra_shift},                     {"vra_high_percentile", t.vra_high_percentile},
          {"ash_prune_percent", t.ash_prune_percent},     {"scale_top_percent", t.scale_top_percent},
          {"dice_sparsity", t.dice_sparsity}};
}

inline TruncationParams truncation_from_json(const nlohmann::json& j, TruncationParams t = {}) {
  if (!j.is_object()) throw SchemaError("\"truncation\" must be an object");
  auto read = [&](const char* key, double& field) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_number()) throw SchemaError(std::string("truncation.") + key + " must be a number");
    field = j.at(key).get<double>();
  };
  for (const auto& [key, value] : j.items()) {
    static const char* known[] = {"react_percentile",  "vra_low_percentile", "vra_shift",    "vra_high_percentile",
                                  "ash_prune_percent", "scale_top_percent",  "dice_sparsity"};
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) == std::end(known)) {
      throw SchemaError("unknown truncation key \"" + key + "\"");
    }
  }
  read("react_percentile", t.react_percentile);
  read("vra_low_percentile", t.vra_low_percentile);
  read("vra_shift", t.vra_shift);
  read("vra_high_percentile", t.vra_high_percentile);
  read("ash_prune_percent", t.ash_prune_percent);
  read("scale_top_percent", t.scale_top_percent);
  read("dice_sparsity", t.dice_sparsity);
  return t;
}

inline void save_stats(const CalibrationStats& s, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create stats directory " + dir.string() + ": " + ec.message());

  nlohmann::json fields = nlohmann::json::object();
  auto put_matrix = [&](const char* name, const Matrix& m) {
    const std::string file = std::string(name) + ".npy";
    save_array(from_matrix(m), dir / file);
    fields[name] = file;
  };
  auto put_vector = [&](const char* name, const Vector& v) {
    const std::string file = std::string(name) + ".npy";
    save_array(from_vector(v), dir / file);
    fields[name] = file;
  };
  put_matrix("class_means", s.class_means);
  put_vector("global_mean", s.global_mean);
  put_matrix("covariance", s.covariance);
  put_matrix("covariance_pinv", s.covariance_pinv);
  put_matrix("principal_basis", s.principal_basis);
  put_matrix("kl_templates", s.kl_templates);
  put_matrix("she_patterns", s.she_patterns);
  put_matrix("nn_bank", s.nn_bank);
  put_matrix("head_weights", s.head_weights);
  put_vector("head_bias", s.head_bias);

  Vector levels(static_cast<Eigen::Index>(s.activation_percentiles.size()));
  Vector values(levels.size());
  Eigen::Index k = 0;
  for (const auto& [level, value] : s.activation_percentiles) {
    levels[k] = level;
    values[k] = value;
    ++k;
  }
  put_vector("percentile_levels", levels);
  put_vector("percentile_values", values);

  nlohmann::json index = {
      {"toolkit_version", kVersion},
      {"fields", fields},
      {"vim_alpha", s.vim_alpha},
      {"config",
       {{"subspace_dim", s.subspace_dim}, {"k_nn", s.k_nn}, {"seed", s.seed}, {"truncation", truncation_to_json(s.truncation)}}},
  };
  const std::string text = index.dump(2) + "\n";
  write_file_bytes(dir / "stats.json", std::as_bytes(std::span(text.data(), text.size())));
}

inline CalibrationStats load_stats(const std::filesystem::path& dir) {
  std::ifstream in(dir / "stats.json");
  if (!in) throw IoError("cannot open " + (dir / "stats.json").string());
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("stats.json is not valid JSON: " + std::string(e.what()));
  }
  const auto& fields = detail::require(index, "fields", "stats.json");
  auto path_of = [&](const char* name) { return dir / detail::require_string(fields, name, "stats.json fields"); };

  CalibrationStats s;
  s.class_means = to_matrix(load_array(path_of("class_means")));
  s.global_mean = to_vector(load_array(path_of("global_mean")));
  s.covariance = to_matrix(load_array(path_of("covariance")));
  s.covariance_pinv = to_matrix(load_array(path_of("covariance_pinv")));
  s.principal_basis = to_matrix(load_array(path_of("principal_basis")));
  s.kl_templates = to_matrix(load_array(path_of("kl_templates")));
  s.she_patterns = to_matrix(load_array(path_of("she_patterns")));
  s.nn_bank = to_matrix(load_array(path_of("nn_bank")));
  s.head_weights = to_matrix(load_array(path_of("head_weights")));
  s.head_bias = to_vector(load_array(path_of("head_bias")));
  const Vector levels = to_vector(load_array(path_of("percentile_levels")));
  const Vector values = to_vector(load_array(path_of("percentile_values")));
  if (levels.size() != values.size()) throw ShapeError("percentile level/value arrays differ in length");
  for (Eigen::Index k = 0; k < levels.size(); ++k) s.activation_percentiles[levels[k]] = values[k];

  const auto& alpha = detail::require(index, "vim_alpha", "stats.json");
  if (!alpha.is_number()) throw SchemaError("vim_alpha must be a number");
  s.vim_alpha = alpha.get<double>();
  const auto& cfg = detail::require(index, "config", "stats.json");
  s.subspace_dim = detail::require(cfg, "subspace_dim", "stats.json config").get<int>();
  s.k_nn = detail::require(cfg, "k_nn", "stats.json config").get<int>();
  s.seed = detail::require(cfg, "seed", "stats.json config").get<std::uint64_t>();
  s.truncation = truncation_from_json(detail::require(cfg, "truncation", "stats.json config"));

  const auto K = s.class_means.rows();
  const auto d = s.class_means.cols();
  if (s.global_mean.size() != d || s.covariance.rows() != d || s.covariance.cols() != d ||
      s.principal_basis.rows() != d || s.she_patterns.rows() != K || s.kl_templates.rows() != K ||
      s.head_weights.rows() != K || s.head_weights.cols() != d || s.head_bias.size() != K ||
      (s.nn_bank.rows() > 0 && s.nn_bank.cols() != d)) {
    throw ShapeError("stats arrays in " + dir.string() + " have inconsistent shapes");
  }
  return s;
}

}  // namespace mme
