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

#include <random>

#include <gtest/gtest.h>

#include "closed_form_gtest.hpp"
#include "mme/ensemble.hpp"
#include "mme/pipeline.hpp"
#include "mme/toy.hpp"
#include "oracles.hpp"

namespace {

using namespace mme;

MME_CLOSED_FORM_SUITE(Ensemble, closed_form::ensemble_cases());

// Largest reciprocal softmax(d / T) probability, by direct enumeration.
double nme_oracle(const RowVector& d, double t) {
  long double sum = 0;
  for (Eigen::Index j = 0; j < d.size(); ++j) sum += std::exp(static_cast<long double>(d[j]) / t);
  long double best = 0;
  for (Eigen::Index c = 0; c < d.size(); ++c) best = std::max(best, sum / std::exp(static_cast<long double>(d[c]) / t));
  return static_cast<double>(best);
}

TEST(NmePlus, MatchesSoftmaxReciprocal) {
  std::mt19937_64 gen(71);
  for (int t = 0; t < 500; ++t) {
    const RowVector d = oracle::random_matrix(gen, 1, 3, 0, 5).row(0);
    for (double temp : {0.1, 0.5, 1.0}) {
      const double want = nme_oracle(d, temp);
      ASSERT_NEAR(std::exp(nme_plus_log_row(d, temp)), want, 1e-9 * want);
    }
  }
}

TEST(NmePlus, AtLeastKOnRandomRows) {
  std::mt19937_64 gen(72);
  const int K = 7;
  const Matrix d = oracle::random_matrix(gen, 10000, K, 0, 20);
  for (Eigen::Index i = 0; i < d.rows(); ++i) ASSERT_GE(nme_plus_log_row(d.row(i), 0.5), std::log(double(K)) - 1e-12);
}

TEST(NmePlus, DistancesAreEuclidean) {
  const Matrix x = closed_form::mat({{0, 0}, {3, 4}});
  const Matrix mu = closed_form::mat({{0, 0}, {6, 8}});
  const Matrix d = class_distances(x, mu);
  EXPECT_NEAR(d(0, 1), 10, 1e-12);
  EXPECT_NEAR(d(1, 0), 5, 1e-12);
  EXPECT_NEAR(d(1, 1), 5, 1e-12);
}

struct ToyRun {
  std::filesystem::path dir = oracle::temp_dir("ensemble_toy");
  DatasetManifest manifest;
  LoadedStats stats;
  ToyRun() {
    toy::write_toy_dataset(dir / "toy");
    RunConfig cfg;
    cfg.manifest = dir / "toy" / "manifest.json";
    cfg.stats_dir = dir / "stats";
    cfg.detectors = {"mme"};
    stats = cmd_calibrate(cfg);
    manifest = load_manifest(cfg.manifest);
  }
};

// log MME equals the sum of component scores computed through the
// stand-alone detectors.
TEST(Mme, EqualsSumOfIndependentComponents) {
  const ToyRun run;
  const EnsembleParams params;
  const auto ctx = run.stats.context(params);
  for (const auto& split : run.manifest.splits) {
    const Matrix x = to_matrix(split.features), l = to_matrix(split.logits);
    const auto total = compute_detector("mme", x, l, ctx).values;
    const auto e = compute_detector("energy@scale", x, l, ctx).values;
    const auto v = compute_detector("vim@vra", x, l, ctx).values;  // = -vim_raw
    const auto fd = compute_detector("fdbd@vra", x, l, ctx).values;
    const auto pc = compute_detector("pca@vra", x, l, ctx).values;
    const auto co = compute_detector("co+", x, l, ctx).values;
    const auto nm = compute_detector("nme+", x, l, ctx).values;
    for (std::size_t i = 0; i < total.size(); ++i) {
      const double want = e[i] + v[i] + std::log(std::max(fd[i], 1e-12)) + std::log(std::max(pc[i], 1e-12)) +
                          std::log(co[i]) + std::log(nm[i]);
      ASSERT_NEAR(total[i], want, 1e-9) << split.name << " row " << i;
    }
  }
}

TEST(Mme, LambdaOneMatchesNoCoPlus) {
  const ToyRun run;
  EnsembleParams one;
  one.lambda = 1.0;
  MmeLayout no_co;
  no_co.use_co_plus = false;
  for (const auto& split : run.manifest.splits) {
    const Matrix x = to_matrix(split.features), l = to_matrix(split.logits);
    EXPECT_EQ(mme::mme(x, l, run.stats.raw, &*run.stats.vra, one).values,
              mme::mme(x, l, run.stats.raw, &*run.stats.vra, EnsembleParams{}, no_co).values);
  }
}

TEST(Mme, CoPlusRaisesAgreeingRowsByLogLambda) {
  const ToyRun run;
  const auto& split = *run.manifest.find("test");
  const Matrix x = to_matrix(split.features), l = to_matrix(split.logits);
  EnsembleParams p;
  p.lambda = 3.0;
  const auto with = mme_components(x, l, run.stats.raw, &*run.stats.vra, p);
  MmeLayout off;
  off.use_co_plus = false;
  const auto without = mme_components(x, l, run.stats.raw, &*run.stats.vra, p, off);
  const auto pairs = predictions(x, l, run.stats.raw);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double diff = with.total[i] - without.total[i];
    EXPECT_NEAR(diff, pairs[i].consistent() ? std::log(3.0) : 0.0, 1e-12);
  }
}

TEST(Mme, VraLayoutWithoutVraStatsIsConfigError) {
  const ToyRun run;
  const auto& split = *run.manifest.find("test");
  EXPECT_THROW(mme::mme(to_matrix(split.features), to_matrix(split.logits), run.stats.raw, nullptr, {}), ConfigError);
}

TEST(Mme, ExtrasAddTheirLogTerm) {
  const ToyRun run;
  const auto& split = *run.manifest.find("test");
  const Matrix x = to_matrix(split.features), l = to_matrix(split.logits);
  MmeLayout with_gen;
  with_gen.extras = {"gen"};
  const auto base = mme::mme(x, l, run.stats.raw, &*run.stats.vra, {}).values;
  const auto plus = mme::mme(x, l, run.stats.raw, &*run.stats.vra, {}, with_gen).values;
  const auto g = gen(l).values;
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(plus[i] - base[i], g[i], 1e-9);
  with_gen.extras = {"msp"};
  EXPECT_THROW(mme::mme(x, l, run.stats.raw, &*run.stats.vra, {}, with_gen), ConfigError);
}

TEST(VraStats, RefitOnTruncatedFeaturesWithoutBank) {
  const ToyRun run;
  ASSERT_TRUE(run.stats.vra.has_value());
  EXPECT_EQ(run.stats.vra->nn_bank.rows(), 0);
  EXPECT_TRUE(check_invariants(*run.stats.vra).empty());
  EXPECT_NE(run.stats.vra->global_mean, run.stats.raw.global_mean);
}

// Product ensembles of scores satisfying the covariance premise widen the gap.
TEST(ProductEnsemble, GapDominatesEachFactor) {
  SyntheticSpec spec;
  spec.n_id = spec.n_ood = 5000;
  for (std::uint64_t t = 0; t < 10; ++t) {
    const auto s = generate_paired_scores(spec, CounterRng(t, 3));
    std::vector<double> all1 = s.s1_id, all2 = s.s2_id;
    all1.insert(all1.end(), s.s1_ood.begin(), s.s1_ood.end());
    all2.insert(all2.end(), s.s2_ood.begin(), s.s2_ood.end());
    const std::vector<double> shifts{unit_floor_shift(all1), unit_floor_shift(all2)};
    auto exp_of = [](std::vector<double> v) {
      for (double& x : v) x = std::exp(x);
      return v;
    };
    const auto pid = exp_of(product_ensemble({make_scores(s.s1_id, "a"), make_scores(s.s2_id, "b")}, shifts).values);
    const auto pood = exp_of(product_ensemble({make_scores(s.s1_ood, "a"), make_scores(s.s2_ood, "b")}, shifts).values);
    EXPECT_GE(v_gap(pid, pood), std::max(v_gap(s.s1_id, s.s1_ood), v_gap(s.s2_id, s.s2_ood)) - 1e-6);
  }
}

TEST(ProductEnsemble, ShiftRulesAndErrors) {
  EXPECT_EQ(unit_floor_shift({2.0, 3.0}), 0.0);
  EXPECT_EQ(unit_floor_shift({-0.5, 3.0}), 1.5);
  const auto a = make_scores({-0.5, 3.0}, "a");
  const auto p = product_ensemble({a, a});
  EXPECT_NEAR(p.values[0], 0.0, 1e-15);  // (-0.5 + 1.5)^2 = 1
  EXPECT_EQ(p.detector_name, "prod(a,a)");
  EXPECT_THROW(product_ensemble({a, a}, std::vector<double>{0.0, 0.0}), NumericError);
  EXPECT_THROW(product_ensemble({a, make_scores({1.0}, "b")}), ShapeError);
}

TEST(Params, Validate) {
  EnsembleParams p;
  p.lambda = 0.5;
  EXPECT_THROW(p.validate(), ConfigError);
  p = {};
  p.temperature = 0;
  EXPECT_THROW(p.validate(), ConfigError);
}

}  // namespace
