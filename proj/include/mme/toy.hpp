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

// Deterministic toy dataset: 3 classes, 8-dimensional non-negative features,
// 60 training rows, plus an ID test split and near / far OOD splits.

#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "mme/random.hpp"
#include "mme/tensor_store.hpp"
#include "mme/types.hpp"

namespace mme::toy {

inline constexpr int kClasses = 3;
inline constexpr int kDim = 8;

struct ToySplit {
  Matrix features;
  Matrix logits;
  LabelVector labels;
};

struct ToyDataset {
  Matrix weights;
  Vector bias;
  ToySplit train, test, ood_near, ood_far;
};

inline ToyDataset make_toy_dataset(std::uint64_t seed = 7) {
  const CounterRng root(seed, /*stream=*/0x746f79ULL);
  Matrix prototypes = Matrix::Constant(kClasses, kDim, 0.3);
  for (int c = 0; c < kClasses; ++c) {
    prototypes(c, 2 * c) += 1.5;
    prototypes(c, 2 * c + 1) += 1.5;
  }

  ToyDataset ds;
  auto rng_head = root.split(0);
  const RowVector centre = prototypes.colwise().mean();
  ds.weights.resize(kClasses, kDim);
  for (int c = 0; c < kClasses; ++c) {
    for (int j = 0; j < kDim; ++j) ds.weights(c, j) = 1.2 * (prototypes(c, j) - centre[j]) + 0.05 * rng_head.normal();
  }
  ds.bias = Vector::Constant(kClasses, 0.1);

  auto finish = [&](ToySplit& s) {
    // Stored as float32; logits follow the stored features.
    const Matrix stored = s.features.cast<float>().cast<double>();
    s.features = stored;
    s.logits = (stored * ds.weights.transpose()).rowwise() + ds.bias.transpose();
  };
  auto class_rows = [&](int per_class, CounterRng rng) {
    ToySplit s;
    s.features.resize(per_class * kClasses, kDim);
    for (int c = 0; c < kClasses; ++c) {
      for (int k = 0; k < per_class; ++k) {
        const int r = c * per_class + k;
        for (int j = 0; j < kDim; ++j) s.features(r, j) = std::max(0.0, prototypes(c, j) + 0.35 * rng.normal());
        s.labels.push_back(c);
      }
    }
    finish(s);
    return s;
  };
  ds.train = class_rows(20, root.split(1));
  ds.test = class_rows(10, root.split(2));

  {
    auto rng = root.split(3);
    ds.ood_near.features.resize(30, kDim);
    for (int r = 0; r < 30; ++r) {
      const int a = r % kClasses;
      const int b = (r + 1) % kClasses;
      for (int j = 0; j < kDim; ++j) {
        ds.ood_near.features(r, j) = std::max(0.0, 0.5 * (prototypes(a, j) + prototypes(b, j)) + 0.35 * rng.normal());
      }
    }
    finish(ds.ood_near);
  }
  {
    auto rng = root.split(4);
    ds.ood_far.features.resize(30, kDim);
    for (int r = 0; r < 30; ++r) {
      for (int j = 0; j < kDim; ++j) ds.ood_far.features(r, j) = 0.05 + 0.6 * rng.pareto_excess(2.0);
    }
    finish(ds.ood_far);
  }
  return ds;
}

/// Writes the arrays plus manifest.json into `dir`.
inline void write_toy_dataset(const std::filesystem::path& dir, std::uint64_t seed = 7) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const auto ds = make_toy_dataset(seed);
  save_array(from_matrix(ds.weights, DType::kFloat32), dir / "W.npy");
  save_array(from_vector(ds.bias, DType::kFloat32), dir / "b.npy");

  nlohmann::ordered_json splits = nlohmann::ordered_json::object();
  auto put = [&](const std::string& name, const char* role, const ToySplit& s, bool with_labels, const char* group) {
    save_array(from_matrix(s.features, DType::kFloat32), dir / (name + "_features.npy"));
    save_array(from_matrix(s.logits, DType::kFloat32), dir / (name + "_logits.npy"));
    nlohmann::ordered_json entry = {{"role", role},
                                    {"features", name + "_features.npy"},
                                    {"logits", name + "_logits.npy"}};
    if (with_labels) {
      save_array(from_labels(s.labels), dir / (name + "_labels.npy"));
      entry["labels"] = name + "_labels.npy";
    }
    if (group != nullptr) entry["group"] = group;
    splits[name] = entry;
  };
  put("train", "id_train", ds.train, true, nullptr);
  put("test", "id_test", ds.test, true, nullptr);
  put("ood_near", "ood", ds.ood_near, false, "near");
  put("ood_far", "ood", ds.ood_far, false, "far");

  nlohmann::ordered_json manifest = {{"name", "toy"},
                                     {"num_classes", kClasses},
                                     {"feature_dim", kDim},
                                     {"head", {{"weights", "W.npy"}, {"bias", "b.npy"}}},
                                     {"splits", splits}};
  const std::string text = manifest.dump(2) + "\n";
  write_file_bytes(dir / "manifest.json", std::as_bytes(std::span(text.data(), text.size())));
}

}  // namespace mme::toy
