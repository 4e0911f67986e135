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

#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "closed_form_gtest.hpp"
#include "mme/calibration.hpp"
#include "mme/random.hpp"
#include "oracles.hpp"

namespace {

using namespace mme;

MME_CLOSED_FORM_SUITE(Calibration, closed_form::calibration_cases());

LabelVector cyclic_labels(std::size_t n, int k) {
  LabelVector y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<std::int64_t>(i % static_cast<std::size_t>(k));
  return y;
}

TEST(ClassMeans, MatchNaiveLoop) {
  std::mt19937_64 gen(31);
  const Matrix x = oracle::random_matrix(gen, 1000, 6, -5, 5);
  LabelVector y(1000);
  std::uniform_int_distribution<int> cls(0, 9);
  for (auto& v : y) v = cls(gen);
  for (int c = 0; c < 10; ++c) y[static_cast<std::size_t>(c)] = c;  // every class present
  const Matrix got = fit_class_means(x, y, 10);
  const Matrix want = oracle::naive_class_means(x, y, 10);
  EXPECT_LE((got - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ClassMeans, EmptyClassIsCalibrationError) {
  EXPECT_THROW(fit_class_means(Matrix::Zero(2, 2), {0, 0}, 2), CalibrationError);
}

TEST(Covariance, IsotropicSampleApproachesIdentity) {
  CounterRng rng(5, 1);
  const Eigen::Index n = 100000;
  Matrix x(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) << rng.normal(), rng.normal();
  const LabelVector y(static_cast<std::size_t>(n), 0);
  const auto fit = fit_shared_covariance(x, y, fit_class_means(x, y, 1));
  EXPECT_LE((fit.covariance - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 0.05);
}

TEST(Covariance, SingleRowIsCalibrationError) {
  const Matrix x = Matrix::Ones(1, 2);
  EXPECT_THROW(fit_shared_covariance(x, {0}, x), CalibrationError);
}

// No random orthonormal basis beats the fitted one at reconstructing the data.
TEST(PrincipalSubspace, ReconstructionIsMinimalAgainstRandomBases) {
  std::mt19937_64 gen(32);
  Matrix x = oracle::random_matrix(gen, 50, 8);
  x.col(0) *= 4.0;
  x.col(3) *= 2.5;
  const Vector mu = fit_global_mean(x);
  const Matrix xc = x.rowwise() - mu.transpose();
  const int D = 3;
  const Matrix u = fit_principal_subspace(x, mu, D);
  auto err = [&](const Matrix& basis) { return (xc - xc * basis * basis.transpose()).norm(); };
  const double fitted = err(u);
  for (int t = 0; t < 200; ++t) {
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(Eigen::MatrixXd(oracle::random_matrix(gen, 8, D)));
    const Matrix q = Eigen::MatrixXd(qr.householderQ()).leftCols(D);
    ASSERT_LE(fitted, err(q) + 1e-12) << "trial " << t;
  }
}

TEST(PrincipalSubspace, DimensionMustBeProper) {
  const Matrix x = Matrix::Random(10, 4);
  EXPECT_THROW(fit_principal_subspace(x, fit_global_mean(x), 0), ConfigError);
  EXPECT_THROW(fit_principal_subspace(x, fit_global_mean(x), 4), ConfigError);
}

TEST(VimAlpha, MatchesTwoPassOracle) {
  std::mt19937_64 gen(33);
  const Matrix x = oracle::random_matrix(gen, 200, 6);
  const Matrix logits = oracle::random_matrix(gen, 200, 4, 0.5, 3.0);
  const Vector mu = fit_global_mean(x);
  const Matrix u = fit_principal_subspace(x, mu, 2);
  long double max_sum = 0, res_sum = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    max_sum += logits.row(i).maxCoeff();
    Vector c = x.row(i).transpose() - mu;
    Vector proj = Vector::Zero(6);
    for (int k = 0; k < 2; ++k) proj += u.col(k) * u.col(k).dot(c);
    res_sum += (c - proj).norm();
  }
  const double want = static_cast<double>(max_sum / res_sum);
  EXPECT_NEAR(fit_vim_alpha(x, logits, u, mu), want, 1e-12 * want);
}

TEST(VimAlpha, NonPositiveIsCalibrationError) {
  std::mt19937_64 gen(34);
  const Matrix x = oracle::random_matrix(gen, 20, 4);
  const Vector mu = fit_global_mean(x);
  const Matrix u = fit_principal_subspace(x, mu, 2);
  EXPECT_THROW(fit_vim_alpha(x, Matrix::Constant(20, 3, -1.0), u, mu), CalibrationError);
}

TEST(Percentiles, MatchFullSortOracleExactly) {
  std::mt19937_64 gen(35);
  const Matrix x = oracle::random_matrix(gen, 100, 100, 0, 10);
  std::vector<double> flat(x.data(), x.data() + x.size());
  const std::vector<double> levels{0.5, 10, 60, 90, 95, 99.5};
  const auto got = fit_activation_percentiles(x, levels);
  for (double p : levels) EXPECT_EQ(got.at(p), oracle::sorted_percentile(flat, p)) << "level " << p;
}

TEST(KlTemplates, MatchNaiveGrouping) {
  std::mt19937_64 gen(36);
  const Matrix logits = oracle::random_matrix(gen, 300, 4, -3, 3);
  const auto y = cyclic_labels(300, 4);
  const Matrix got = fit_kl_templates(logits, y);
  for (int c = 0; c < 4; ++c) {
    std::vector<long double> acc(4, 0);
    long double n = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      Eigen::Index best = 0;
      for (Eigen::Index j = 1; j < 4; ++j)
        if (logits(i, j) > logits(i, best)) best = j;
      if (best != c) continue;
      const auto p = oracle::softmax_ld(logits.row(i));
      for (int j = 0; j < 4; ++j) acc[static_cast<std::size_t>(j)] += p[static_cast<std::size_t>(j)];
      n += 1;
    }
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(got(c, j), static_cast<double>(acc[static_cast<std::size_t>(j)] / n), 1e-12);
  }
}

TEST(ShePatterns, MatchNaiveLoop) {
  std::mt19937_64 gen(37);
  const Matrix x = oracle::random_matrix(gen, 120, 5);
  const Matrix logits = oracle::random_matrix(gen, 120, 3);
  const auto y = cyclic_labels(120, 3);
  const Matrix mu = fit_class_means(x, y, 3);
  const Matrix got = fit_she_patterns(x, logits, y, mu);
  for (int c = 0; c < 3; ++c) {
    RowVector acc = RowVector::Zero(5);
    int n = 0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      Eigen::Index best = 0;
      for (Eigen::Index j = 1; j < 3; ++j)
        if (logits(i, j) > logits(i, best)) best = j;
      if (y[static_cast<std::size_t>(i)] == c && best == c) {
        acc += x.row(i);
        ++n;
      }
    }
    ASSERT_GT(n, 0);
    EXPECT_LE((got.row(c) - acc / n).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(NnBank, IndependentOfRowOrderAndSeeded) {
  std::mt19937_64 gen(38);
  const Matrix x = oracle::random_matrix(gen, 40, 5);
  std::vector<Eigen::Index> perm(40);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), gen);
  Matrix shuffled(40, 5);
  for (Eigen::Index i = 0; i < 40; ++i) shuffled.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
  EXPECT_EQ(build_nn_bank(x, 15, 9), build_nn_bank(shuffled, 15, 9));
  EXPECT_NE(build_nn_bank(x, 15, 9), build_nn_bank(x, 15, 10));
  EXPECT_THROW(build_nn_bank(x, 41, 9), ConfigError);
  Matrix zero_row = x;
  zero_row.row(3).setZero();
  EXPECT_THROW(build_nn_bank(zero_row, 40, 9), NumericError);
}

// Small K=2, d=4, N=20 manifest: every field populated, invariants hold.
TEST(Calibrate, SmallManifestPassesInvariantSuite) {
  std::mt19937_64 gen(39);
  const Matrix x = oracle::random_matrix(gen, 20, 4, 0, 2);
  const Matrix w = oracle::random_matrix(gen, 2, 4);
  const Vector b = Vector::Constant(2, 3.0);  // keeps mean max-logit positive
  const Matrix logits = oracle::naive_matmul_head(x, w, b);
  const auto y = cyclic_labels(20, 2);
  CalibrationConfig cfg;
  cfg.seed = 4;
  const auto s = calibrate(x, logits, y, w, b, cfg);
  EXPECT_TRUE(check_invariants(s).empty());
  EXPECT_EQ(s.class_means.rows(), 2);
  EXPECT_EQ(s.principal_basis.cols(), 2);
  EXPECT_EQ(s.nn_bank.rows(), 20);
  EXPECT_EQ(s.kl_templates.rows(), 2);
  EXPECT_EQ(s.she_patterns.rows(), 2);
  EXPECT_GT(s.vim_alpha, 0);
  for (double p : cfg.percentile_levels()) EXPECT_TRUE(s.activation_percentiles.count(p)) << p;
}

TEST(Calibrate, InvariantCheckerFlagsCorruption) {
  const auto dir = oracle::temp_dir("calib_corrupt");
  toy::write_toy_dataset(dir);
  auto s = calibrate_all(load_manifest(dir / "manifest.json"), {});
  ASSERT_TRUE(check_invariants(s).empty());
  auto bad = s;
  bad.principal_basis.col(0) *= 2.0;
  EXPECT_FALSE(check_invariants(bad).empty());
  bad = s;
  bad.nn_bank.row(0) *= 0.5;
  EXPECT_FALSE(check_invariants(bad).empty());
  bad = s;
  bad.covariance(0, 1) += 1.0;
  EXPECT_FALSE(check_invariants(bad).empty());
  bad = s;
  bad.vim_alpha = 0;
  EXPECT_FALSE(check_invariants(bad).empty());
}

TEST(Calibrate, StatsRoundTripThroughDisk) {
  const auto dir = oracle::temp_dir("calib_roundtrip");
  toy::write_toy_dataset(dir / "toy");
  CalibrationConfig cfg;
  cfg.truncation.react_percentile = 85;
  cfg.extra_percentiles = {50};
  const auto s = calibrate_all(load_manifest(dir / "toy" / "manifest.json"), cfg);
  save_stats(s, dir / "stats");
  const auto r = load_stats(dir / "stats");
  EXPECT_EQ(r.class_means, s.class_means);
  EXPECT_EQ(r.covariance_pinv, s.covariance_pinv);
  EXPECT_EQ(r.principal_basis, s.principal_basis);
  EXPECT_EQ(r.nn_bank, s.nn_bank);
  EXPECT_EQ(r.vim_alpha, s.vim_alpha);
  EXPECT_EQ(r.activation_percentiles, s.activation_percentiles);
  EXPECT_EQ(r.truncation.react_percentile, 85);
  EXPECT_EQ(r.k_nn, s.k_nn);
  EXPECT_EQ(r.head_bias, s.head_bias);
}

TEST(Calibrate, TruncationJsonRejectsUnknownKeys) {
  EXPECT_THROW(truncation_from_json(nlohmann::json{{"react", 80}}), SchemaError);
  const auto t = truncation_from_json(truncation_to_json(TruncationParams{}));
  EXPECT_EQ(t.vra_high_percentile, TruncationParams{}.vra_high_percentile);
}

}  // namespace
