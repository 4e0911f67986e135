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

// Reference implementations used only by tests. They use plain loops and
// std containers and share no code with the library beyond the data types.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "mme/types.hpp"

namespace oracle {

using mme::Matrix;
using mme::RowVector;
using mme::Vector;

/// O(n*m) pair count; ties count one half.
inline double pairwise_auroc(const std::vector<double>& id, const std::vector<double>& ood) {
  long double wins = 0;
  for (double a : id) {
    for (double b : ood) {
      if (a > b) wins += 1;
      else if (a == b) wins += 0.5L;
    }
  }
  return static_cast<double>(wins / (static_cast<long double>(id.size()) * static_cast<long double>(ood.size())));
}

struct Fpr {
  double fpr;
  double threshold;
};

/// Scans every candidate threshold and keeps the highest one whose ID
/// acceptance rate reaches `level`.
inline Fpr threshold_scan_fpr(const std::vector<double>& id, const std::vector<double>& ood, double level) {
  std::set<double> candidates(id.begin(), id.end());
  candidates.insert(ood.begin(), ood.end());
  for (auto it = candidates.rbegin(); it != candidates.rend(); ++it) {
    const double t = *it;
    std::size_t id_pass = 0, ood_pass = 0;
    for (double a : id) id_pass += a >= t;
    for (double b : ood) ood_pass += b >= t;
    if (static_cast<double>(id_pass) / static_cast<double>(id.size()) >= level) {
      return {static_cast<double>(ood_pass) / static_cast<double>(ood.size()), t};
    }
  }
  return {1.0, -INFINITY};
}

inline long double energy_ld(const RowVector& logits) {
  long double m = logits.maxCoeff();
  long double s = 0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) s += std::exp(static_cast<long double>(logits[i]) - m);
  return m + std::log(s);
}

inline std::vector<long double> softmax_ld(const RowVector& logits) {
  long double m = logits.maxCoeff();
  std::vector<long double> p(static_cast<std::size_t>(logits.size()));
  long double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] = std::exp(static_cast<long double>(logits[static_cast<Eigen::Index>(i)]) - m);
  for (auto& v : p) v /= s;
  return p;
}

inline Matrix naive_matmul_head(const Matrix& z, const Matrix& w, const Vector& b) {
  Matrix out(z.rows(), w.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    for (Eigen::Index c = 0; c < w.rows(); ++c) {
      long double acc = b[c];
      for (Eigen::Index j = 0; j < z.cols(); ++j) acc += static_cast<long double>(z(i, j)) * w(c, j);
      out(i, c) = static_cast<double>(acc);
    }
  }
  return out;
}

inline Matrix naive_class_means(const Matrix& x, const std::vector<std::int64_t>& y, int k) {
  Matrix out = Matrix::Zero(k, x.cols());
  for (int c = 0; c < k; ++c) {
    long double n = 0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      long double acc = 0;
      n = 0;
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        if (y[static_cast<std::size_t>(i)] == c) {
          acc += x(i, j);
          n += 1;
        }
      }
      out(c, j) = static_cast<double>(acc / n);
    }
  }
  return out;
}

/// Percentile by full sort and linear interpolation at level/100 * (n - 1).
inline double sorted_percentile(std::vector<double> v, double level) {
  std::sort(v.begin(), v.end());
  const double pos = level / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (v[hi] - v[lo]) * (pos - static_cast<double>(lo));
}

inline std::vector<double> uniform_vector(std::mt19937_64& gen, std::size_t n, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(gen);
  return v;
}

inline Matrix random_matrix(std::mt19937_64& gen, Eigen::Index rows, Eigen::Index cols, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = d(gen);
  return m;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mme_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace oracle
