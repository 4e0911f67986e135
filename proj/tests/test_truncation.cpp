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

#include <algorithm>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "closed_form_gtest.hpp"
#include "mme/truncation.hpp"
#include "oracles.hpp"

namespace {

using namespace mme;

MME_CLOSED_FORM_SUITE(Truncation, closed_form::truncation_cases());

RowVector random_row(std::mt19937_64& gen, Eigen::Index n, double lo = 0.0, double hi = 3.0) {
  return oracle::random_matrix(gen, 1, n, lo, hi).row(0);
}

// Sort-based reference: keep the `keep` largest, rescale by exp(total / kept).
RowVector naive_ash(const RowVector& z, std::size_t keep) {
  std::vector<std::pair<double, Eigen::Index>> v;
  for (Eigen::Index i = 0; i < z.size(); ++i) v.emplace_back(z[i], i);
  std::stable_sort(v.begin(), v.end(), [](auto a, auto b) { return a.first > b.first; });
  long double total = 0, kept = 0;
  for (double x : std::vector<double>(z.data(), z.data() + z.size())) total += x;
  for (std::size_t j = 0; j < keep; ++j) kept += v[j].first;
  RowVector out = RowVector::Zero(z.size());
  const double f = std::exp(static_cast<double>(total / kept));
  for (std::size_t j = 0; j < keep; ++j) out[v[j].second] = v[j].first * f;
  return out;
}

TEST(AshS, MatchesSortOracle) {
  std::mt19937_64 gen(41);
  for (int t = 0; t < 100; ++t) {
    const RowVector z = random_row(gen, 64);
    // 90% of 64 = 57.6 -> prune 58, keep 6.
    const RowVector got = ash_s(z, 90).values;
    const RowVector want = naive_ash(z, 6);
    ASSERT_LE((got - want).cwiseAbs().maxCoeff(), 1e-9 * want.cwiseAbs().maxCoeff()) << "trial " << t;
  }
}

TEST(AshS, KeepsAtLeastOneEntryAndFlagsDegenerateRows) {
  const auto r = ash_s(closed_form::row({0.2, 0.1}), 99.9);
  EXPECT_EQ((r.values.array() != 0).count(), 1);
  const auto zero = ash_s(RowVector::Zero(4), 50);
  EXPECT_TRUE(zero.degenerate);
  EXPECT_EQ(zero.values, RowVector::Zero(4));
}

TEST(ScaleShape, IsAPositiveMultipleOfTheInput) {
  std::mt19937_64 gen(42);
  for (int t = 0; t < 100; ++t) {
    const RowVector z = random_row(gen, 32);
    const RowVector got = scale_shape(z, 10).values;
    std::vector<double> sorted(z.data(), z.data() + z.size());
    std::sort(sorted.rbegin(), sorted.rend());
    const double top = sorted[0] + sorted[1] + sorted[2];  // 10% of 32 -> 3
    const double factor = std::exp(z.sum() / top);
    ASSERT_LE((got - factor * z).cwiseAbs().maxCoeff(), 1e-9 * got.cwiseAbs().maxCoeff());
  }
}

// Shaping keeps the relative order of the surviving entries.
TEST(Shaping, PreservesOrderOfKeptEntries) {
  std::mt19937_64 gen(43);
  for (int t = 0; t < 50; ++t) {
    const RowVector z = random_row(gen, 20);
    for (const RowVector& out : {ash_s(z, 60).values, scale_shape(z, 30).values}) {
      for (Eigen::Index i = 0; i < z.size(); ++i) {
        for (Eigen::Index j = 0; j < z.size(); ++j) {
          if (out[i] != 0 && out[j] != 0 && z[i] > z[j]) ASSERT_GT(out[i], out[j]);
        }
      }
    }
  }
}

TEST(React, NeverIncreasesEntries) {
  std::mt19937_64 gen(44);
  for (int t = 0; t < 50; ++t) {
    const RowVector z = random_row(gen, 16, -2, 2);
    const RowVector out = react(z, 0.7);
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      ASSERT_LE(out[i], z[i]);
      ASSERT_LE(out[i], 0.7);
    }
  }
}

TEST(Vra, OutputsLieInTheExpectedBands) {
  std::mt19937_64 gen(45);
  const double low = 0.4, shift = 0.5, high = 1.6;
  for (int t = 0; t < 50; ++t) {
    const RowVector z = random_row(gen, 16, -1, 3);
    const RowVector out = vra(z, low, shift, high);
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      if (z[i] < low) ASSERT_EQ(out[i], 0.0);
      else if (z[i] <= high) ASSERT_EQ(out[i], z[i] + shift);
      else ASSERT_EQ(out[i], high);
    }
  }
  EXPECT_THROW(vra(RowVector::Zero(2), 1.0, 0.5, 1.0), ConfigError);
}

TEST(Dice, MatchesNaiveMaskedMatmul) {
  std::mt19937_64 gen(46);
  for (int t = 0; t < 20; ++t) {
    const Matrix w = oracle::random_matrix(gen, 4, 10);
    const Vector b = oracle::random_matrix(gen, 4, 1);
    const Vector mean = oracle::random_matrix(gen, 10, 1, 0.1, 2.0);
    const RowVector z = random_row(gen, 10);
    // Oracle: rank contributions, keep the top 30% (12 of 40).
    std::vector<std::pair<double, int>> contrib;
    for (int c = 0; c < 4; ++c)
      for (int i = 0; i < 10; ++i) contrib.emplace_back(w(c, i) * mean[i], c * 10 + i);
    std::stable_sort(contrib.begin(), contrib.end(), [](auto a, auto b) { return a.first > b.first; });
    RowVector want(4);
    for (int c = 0; c < 4; ++c) {
      long double acc = b[c];
      for (int j = 0; j < 12; ++j) {
        const int flat = contrib[static_cast<std::size_t>(j)].second;
        if (flat / 10 == c) acc += static_cast<long double>(w(c, flat % 10)) * z[flat % 10];
      }
      want[c] = static_cast<double>(acc);
    }
    ASSERT_LE((dice_forward(z, w, b, 70, mean) - want).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Resolve, MissingPercentileIsConfigError) {
  TruncationParams p;
  EXPECT_THROW(resolve_truncation(p, {{90.0, 1.0}}), ConfigError);
  std::map<double, double> all;
  for (double level : p.required_percentiles()) all[level] = level / 100.0;
  const auto r = resolve_truncation(p, all);
  EXPECT_EQ(r.react_clip, 0.9);
  EXPECT_EQ(r.vra_low, 0.6);
  EXPECT_EQ(r.vra_high, 0.95);
}

TEST(Resolve, ParamsValidateRanges) {
  TruncationParams p;
  p.ash_prune_percent = 100;
  EXPECT_THROW(p.validate(), ConfigError);
  p = {};
  p.vra_low_percentile = 96;
  EXPECT_THROW(p.validate(), ConfigError);
}

TEST(Names, RoundTrip) {
  for (auto t : {Truncation::kNone, Truncation::kReact, Truncation::kVra, Truncation::kAshS, Truncation::kScale,
                 Truncation::kDice}) {
    EXPECT_EQ(parse_truncation(truncation_name(t)), t);
  }
  EXPECT_THROW(parse_truncation("clip"), ConfigError);
}

TEST(Batch, CountsDegenerateRowsAndLeavesDiceFeaturesAlone) {
  Matrix x(3, 4);
  x << 1, 2, 3, 4, 0, 0, 0, 0, 4, 3, 2, 1;
  ResolvedTruncation r;
  r.scale_top_percent = 50;
  const auto scaled = truncate_features(Truncation::kScale, x, r);
  EXPECT_EQ(scaled.degenerate_rows, 1u);
  EXPECT_EQ(scaled.features.row(1), RowVector::Zero(4));
  EXPECT_EQ(truncate_features(Truncation::kDice, x, r).features, x);
  EXPECT_EQ(truncate_features(Truncation::kNone, x, r).features, x);
}

}  // namespace
