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

// Dense array and dataset-manifest I/O.
//
// Arrays use the NPY v1.0 container (little-endian, C order) with one of
// three element types: '<f4', '<f8', '<i8'. Manifests are JSON documents
// that tie feature/logit/label arrays of each split to a classifier head.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "mme/error.hpp"
#include "mme/types.hpp"

namespace mme {

static_assert(std::endian::native == std::endian::little,
              "NPY payloads are read and written in host order; big-endian hosts are unsupported");

enum class DType { kFloat32, kFloat64, kInt64 };

inline std::string_view dtype_descr(DType t) {
  switch (t) {
    case DType::kFloat32: return "<f4";
    case DType::kFloat64: return "<f8";
    case DType::kInt64: return "<i8";
  }
  return "?";
}

inline std::size_t dtype_size(DType t) { return t == DType::kFloat32 ? 4 : 8; }

/// A dense row-major array exactly as stored on disk. Float32 payloads stay
/// float32 here; widening to double happens in `to_matrix` / `to_vector`.
struct ArrayBlob {
  std::vector<std::uint64_t> shape;
  std::variant<std::vector<float>, std::vector<double>, std::vector<std::int64_t>> data;

  DType dtype() const noexcept { return static_cast<DType>(data.index()); }

  std::uint64_t element_count() const noexcept {
    std::uint64_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }

  std::size_t stored_count() const noexcept {
    return std::visit([](const auto& v) { return v.size(); }, data);
  }

  /// Raw payload bytes.
  std::span<const std::byte> bytes() const noexcept {
    return std::visit([](const auto& v) { return std::as_bytes(std::span(v)); }, data);
  }

  friend bool operator==(const ArrayBlob&, const ArrayBlob&) = default;
};

namespace detail {

inline std::string shape_string(const std::vector<std::uint64_t>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  if (shape.size() == 1) s += ",";
  return s + ")";
}

/// Minimal parser for the Python-literal header dictionary numpy emits.
struct NpyHeader {
  std::string descr;
  bool fortran_order = false;
  std::vector<std::uint64_t> shape;
};

inline NpyHeader parse_npy_header(std::string_view text) {
  NpyHeader h;
  auto fail = [](const std::string& why) -> NpyHeader { throw FormatError("bad NPY header: " + why); };
  auto find_value = [&](std::string_view key) -> std::size_t {
    const std::string quoted1 = "'" + std::string(key) + "'";
    const std::string quoted2 = "\"" + std::string(key) + "\"";
    std::size_t pos = text.find(quoted1);
    std::size_t len = quoted1.size();
    if (pos == std::string_view::npos) {
      pos = text.find(quoted2);
      len = quoted2.size();
    }
    if (pos == std::string_view::npos) return std::string_view::npos;
    pos = text.find(':', pos + len);
    if (pos == std::string_view::npos) return pos;
    ++pos;
    while (pos < text.size() && text[pos] == ' ') ++pos;
    return pos;
  };

  if (text.empty() || text.front() != '{') return fail("not a dict");

  std::size_t p = find_value("descr");
  if (p == std::string_view::npos || p >= text.size()) return fail("missing descr");
  const char q = text[p];
  if (q != '\'' && q != '"') return fail("descr not a string");
  const std::size_t end = text.find(q, p + 1);
  if (end == std::string_view::npos) return fail("unterminated descr");
  h.descr = std::string(text.substr(p + 1, end - p - 1));

  p = find_value("fortran_order");
  if (p == std::string_view::npos) return fail("missing fortran_order");
  if (text.substr(p, 4) == "True") {
    h.fortran_order = true;
  } else if (text.substr(p, 5) == "False") {
    h.fortran_order = false;
  } else {
    return fail("fortran_order not a bool");
  }

  p = find_value("shape");
  if (p == std::string_view::npos || p >= text.size() || text[p] != '(') return fail("missing shape tuple");
  const std::size_t close = text.find(')', p);
  if (close == std::string_view::npos) return fail("unterminated shape");
  std::string_view body = text.substr(p + 1, close - p - 1);
  std::size_t i = 0;
  while (i < body.size()) {
    while (i < body.size() && (body[i] == ' ' || body[i] == ',')) ++i;
    if (i >= body.size()) break;
    std::uint64_t v = 0;
    std::size_t digits = 0;
    while (i < body.size() && body[i] >= '0' && body[i] <= '9') {
      v = v * 10 + static_cast<std::uint64_t>(body[i] - '0');
      ++i;
      ++digits;
    }
    if (digits == 0) return fail("non-integer shape entry");
    if (i < body.size() && body[i] == 'L') ++i;
    h.shape.push_back(v);
  }
  return h;
}

inline DType dtype_from_descr(const std::string& descr) {
  if (descr == "<f4") return DType::kFloat32;
  if (descr == "<f8") return DType::kFloat64;
  if (descr == "<i8") return DType::kInt64;
  throw FormatError("unsupported dtype descr '" + descr + "'");
}

}  // namespace detail

/// Parses an NPY container from memory.
inline ArrayBlob parse_npy(std::span<const std::byte> buf) {
  constexpr unsigned char kMagic[6] = {0x93, 'N', 'U', 'M', 'P', 'Y'};
  if (buf.size() < 10 || std::memcmp(buf.data(), kMagic, 6) != 0) throw FormatError("missing NPY magic");
  const auto major = static_cast<unsigned char>(buf[6]);
  std::size_t header_len = 0;
  std::size_t offset = 0;
  if (major == 1) {
    header_len = static_cast<std::size_t>(buf[8]) | (static_cast<std::size_t>(buf[9]) << 8);
    offset = 10;
  } else if (major == 2 || major == 3) {
    if (buf.size() < 12) throw FormatError("truncated NPY preamble");
    header_len = 0;
    for (int k = 0; k < 4; ++k) header_len |= static_cast<std::size_t>(buf[8 + k]) << (8 * k);
    offset = 12;
  } else {
    throw FormatError("unsupported NPY version " + std::to_string(major));
  }
  if (buf.size() < offset + header_len) throw FormatError("truncated NPY header");
  std::string_view text(reinterpret_cast<const char*>(buf.data() + offset), header_len);
  const auto header = detail::parse_npy_header(text);
  if (header.fortran_order) throw FormatError("fortran_order arrays are not supported");

  ArrayBlob blob;
  blob.shape = header.shape;
  const DType dtype = detail::dtype_from_descr(header.descr);
  const std::uint64_t count = blob.element_count();
  const std::size_t payload = buf.size() - offset - header_len;
  const std::uint64_t expected = count * dtype_size(dtype);
  if (payload != expected) {
    throw FormatError("payload holds " + std::to_string(payload) + " bytes, header declares " +
                      std::to_string(expected));
  }
  const std::byte* src = buf.data() + offset + header_len;
  auto fill = [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> v(count);
    if (count) std::memcpy(v.data(), src, expected);
    blob.data = std::move(v);
  };
  switch (dtype) {
    case DType::kFloat32: fill(float{}); break;
    case DType::kFloat64: fill(double{}); break;
    case DType::kInt64: fill(std::int64_t{}); break;
  }
  return blob;
}

/// Serializes to NPY v1.0 bytes. Identical blobs produce identical bytes.
inline std::vector<std::byte> serialize_npy(const ArrayBlob& blob) {
  if (blob.element_count() != blob.stored_count()) {
    throw ShapeError("shape " + detail::shape_string(blob.shape) + " does not match " +
                     std::to_string(blob.stored_count()) + " stored elements");
  }
  std::string header = "{'descr': '" + std::string(dtype_descr(blob.dtype())) +
                       "', 'fortran_order': False, 'shape': " + detail::shape_string(blob.shape) + ", }";
  // Preamble (10 bytes) + header + '\n' padded to a multiple of 64.
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');
  if (header.size() > 0xffff) throw FormatError("header too long for NPY v1.0");

  std::vector<std::byte> out;
  const auto payload = blob.bytes();
  out.reserve(10 + header.size() + payload.size());
  for (int c : {0x93, int('N'), int('U'), int('M'), int('P'), int('Y'), 0x01, 0x00}) out.push_back(std::byte(c));
  out.push_back(std::byte(header.size() & 0xff));
  out.push_back(std::byte((header.size() >> 8) & 0xff));
  for (char c : header) out.push_back(std::byte(static_cast<unsigned char>(c)));
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

inline std::vector<std::byte> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::byte> buf(size);
  if (size && !in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size))) {
    throw IoError("short read on " + path.string());
  }
  return buf;
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed on " + path.string());
}

inline ArrayBlob load_array(const std::filesystem::path& path) {
  try {
    return parse_npy(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void save_array(const ArrayBlob& blob, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_npy(blob));
}

/// Throws ShapeError unless `blob` has the given rank, dims and dtype.
/// A negative dim is a wildcard.
inline void expect_array(const ArrayBlob& blob, std::vector<std::int64_t> dims,
                         std::optional<DType> dtype, std::string_view what) {
  auto describe = [&] {
    return std::string(what) + " has shape " + detail::shape_string(blob.shape) + " dtype " +
           std::string(dtype_descr(blob.dtype()));
  };
  if (blob.shape.size() != dims.size()) {
    throw ShapeError(describe() + ", expected rank " + std::to_string(dims.size()));
  }
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (dims[i] >= 0 && blob.shape[i] != static_cast<std::uint64_t>(dims[i])) {
      throw ShapeError(describe() + ", expected dim " + std::to_string(i) + " = " + std::to_string(dims[i]));
    }
  }
  if (dtype && blob.dtype() != *dtype) {
    throw ShapeError(describe() + ", expected dtype " + std::string(dtype_descr(*dtype)));
  }
}

inline ArrayBlob load_array(const std::filesystem::path& path, std::vector<std::int64_t> dims,
                            std::optional<DType> dtype = std::nullopt) {
  ArrayBlob blob = load_array(path);
  expect_array(blob, std::move(dims), dtype, path.string());
  return blob;
}

// ---------------------------------------------------------------------------
// Conversions between blobs and compute types.

/// Widens a rank-2 float blob to a float64 matrix.
inline Matrix to_matrix(const ArrayBlob& blob) {
  if (blob.shape.size() != 2) throw ShapeError("expected a rank-2 array, got rank " + std::to_string(blob.shape.size()));
  const auto rows = static_cast<Eigen::Index>(blob.shape[0]);
  const auto cols = static_cast<Eigen::Index>(blob.shape[1]);
  Matrix m(rows, cols);
  std::visit(
      [&](const auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        if constexpr (std::is_same_v<T, std::int64_t>) {
          throw ShapeError("expected a floating-point array, got int64");
        } else {
          for (std::size_t i = 0; i < v.size(); ++i) m.data()[i] = static_cast<double>(v[i]);
        }
      },
      blob.data);
  return m;
}

inline Vector to_vector(const ArrayBlob& blob) {
  if (blob.shape.size() != 1) throw ShapeError("expected a rank-1 array, got rank " + std::to_string(blob.shape.size()));
  Vector out(static_cast<Eigen::Index>(blob.shape[0]));
  std::visit(
      [&](const auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        if constexpr (std::is_same_v<T, std::int64_t>) {
          throw ShapeError("expected a floating-point array, got int64");
        } else {
          for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Eigen::Index>(i)] = static_cast<double>(v[i]);
        }
      },
      blob.data);
  return out;
}

inline LabelVector to_labels(const ArrayBlob& blob) {
  expect_array(blob, {-1}, DType::kInt64, "labels");
  return std::get<std::vector<std::int64_t>>(blob.data);
}

inline ArrayBlob from_matrix(const Matrix& m, DType dtype = DType::kFloat64) {
  ArrayBlob blob;
  blob.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  const auto n = static_cast<std::size_t>(m.size());
  if (dtype == DType::kFloat32) {
    std::vector<float> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<float>(m.data()[i]);
    blob.data = std::move(v);
  } else if (dtype == DType::kFloat64) {
    blob.data = std::vector<double>(m.data(), m.data() + n);
  } else {
    throw ShapeError("matrices are stored as float32 or float64");
  }
  return blob;
}

template <typename Vec>
ArrayBlob from_vector(const Vec& values, DType dtype = DType::kFloat64) {
  ArrayBlob blob;
  const auto n = static_cast<std::size_t>(values.size());
  blob.shape = {n};
  if (dtype == DType::kFloat32) {
    std::vector<float> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<float>(values[i]);
    blob.data = std::move(v);
  } else if (dtype == DType::kFloat64) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<double>(values[i]);
    blob.data = std::move(v);
  } else {
    throw ShapeError("use from_labels for int64 arrays");
  }
  return blob;
}

inline ArrayBlob from_labels(const LabelVector& labels) {
  return ArrayBlob{{static_cast<std::uint64_t>(labels.size())}, labels};
}

// ---------------------------------------------------------------------------
// Dataset manifest.

enum class SplitRole { kIdTrain, kIdTest, kOod };

inline std::string_view role_name(SplitRole r) {
  switch (r) {
    case SplitRole::kIdTrain: return "id_train";
    case SplitRole::kIdTest: return "id_test";
    case SplitRole::kOod: return "ood";
  }
  return "?";
}

struct Split {
  std::string name;
  SplitRole role = SplitRole::kOod;
  /// Optional near/far grouping for OOD splits (manifest key "group").
  std::string group;
  ArrayBlob features;
  ArrayBlob logits;
  std::optional<ArrayBlob> labels;

  std::size_t size() const { return features.shape.empty() ? 0 : static_cast<std::size_t>(features.shape[0]); }
};

struct DatasetManifest {
  std::string name;
  int num_classes = 0;
  int feature_dim = 0;
  ArrayBlob head_weights;
  ArrayBlob head_bias;
  /// Ordered by split name.
  std::vector<Split> splits;

  const Split* find(std::string_view split_name) const {
    for (const auto& s : splits) {
      if (s.name == split_name) return &s;
    }
    return nullptr;
  }

  std::vector<const Split*> with_role(SplitRole role) const {
    std::vector<const Split*> out;
    for (const auto& s : splits) {
      if (s.role == role) out.push_back(&s);
    }
    return out;
  }
};

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) throw SchemaError("missing key \"" + std::string(key) + "\" in " + where);
  return obj.at(key);
}

inline std::string require_string(const nlohmann::json& obj, const char* key, const std::string& where) {
  const auto& v = require(obj, key, where);
  if (!v.is_string()) throw SchemaError("\"" + std::string(key) + "\" in " + where + " must be a string");
  return v.get<std::string>();
}

inline int require_positive_int(const nlohmann::json& obj, const char* key, const std::string& where) {
  const auto& v = require(obj, key, where);
  if (!v.is_number_integer() || v.get<long long>() <= 0) {
    throw SchemaError("\"" + std::string(key) + "\" in " + where + " must be a positive integer");
  }
  return static_cast<int>(v.get<long long>());
}

template <typename Vec>
void require_finite(const Vec& v, const std::string& what) {
  for (const auto& x : v) {
    if (!std::isfinite(static_cast<double>(x))) throw NumericError(what + " contains non-finite values");
  }
}

inline void require_finite_blob(const ArrayBlob& blob, const std::string& what) {
  std::visit(
      [&](const auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        if constexpr (!std::is_same_v<T, std::int64_t>) require_finite(v, what);
      },
      blob.data);
}

}  // namespace detail

/// Parses and fully validates a manifest document. Relative array paths are
/// resolved against `base_dir`.
inline DatasetManifest parse_manifest(const nlohmann::json& doc, const std::filesystem::path& base_dir) {
  using detail::require;
  using detail::require_string;
  if (!doc.is_object()) throw SchemaError("manifest root must be an object");

  DatasetManifest m;
  m.name = require_string(doc, "name", "manifest");
  m.num_classes = detail::require_positive_int(doc, "num_classes", "manifest");
  m.feature_dim = detail::require_positive_int(doc, "feature_dim", "manifest");
  const std::int64_t K = m.num_classes;
  const std::int64_t d = m.feature_dim;

  auto resolve = [&](const std::string& rel) { return base_dir / rel; };

  const auto& head = require(doc, "head", "manifest");
  m.head_weights = load_array(resolve(require_string(head, "weights", "head")));
  m.head_bias = load_array(resolve(require_string(head, "bias", "head")));
  expect_array(m.head_weights, {K, d}, std::nullopt, "head.weights");
  expect_array(m.head_bias, {K}, std::nullopt, "head.bias");
  if (m.head_weights.dtype() == DType::kInt64 || m.head_bias.dtype() == DType::kInt64) {
    throw ShapeError("head arrays must be floating point");
  }
  detail::require_finite_blob(m.head_weights, "head.weights");
  detail::require_finite_blob(m.head_bias, "head.bias");

  const auto& splits = require(doc, "splits", "manifest");
  if (!splits.is_object() || splits.empty()) throw SchemaError("\"splits\" must be a non-empty object");
  for (const auto& [split_name, entry] : splits.items()) {
    const std::string where = "split \"" + split_name + "\"";
    Split s;
    s.name = split_name;
    const std::string role = require_string(entry, "role", where);
    if (role == "id_train") {
      s.role = SplitRole::kIdTrain;
    } else if (role == "id_test") {
      s.role = SplitRole::kIdTest;
    } else if (role == "ood") {
      s.role = SplitRole::kOod;
    } else {
      throw SchemaError(where + " has unknown role \"" + role + "\"");
    }
    if (entry.contains("group")) s.group = require_string(entry, "group", where);
    s.features = load_array(resolve(require_string(entry, "features", where)));
    s.logits = load_array(resolve(require_string(entry, "logits", where)));
    expect_array(s.features, {-1, d}, std::nullopt, where + " features");
    const auto n = static_cast<std::int64_t>(s.features.shape[0]);
    expect_array(s.logits, {n, K}, std::nullopt, where + " logits");
    if (s.features.dtype() == DType::kInt64 || s.logits.dtype() == DType::kInt64) {
      throw ShapeError(where + " features/logits must be floating point");
    }
    detail::require_finite_blob(s.features, where + " features");
    detail::require_finite_blob(s.logits, where + " logits");

    if (entry.contains("labels")) {
      s.labels = load_array(resolve(require_string(entry, "labels", where)));
      expect_array(*s.labels, {n}, DType::kInt64, where + " labels");
      for (auto y : std::get<std::vector<std::int64_t>>(s.labels->data)) {
        if (y < 0 || y >= K) {
          throw LabelError(where + " label " + std::to_string(y) + " outside [0, " + std::to_string(K) + ")");
        }
      }
    } else if (s.role == SplitRole::kIdTrain) {
      throw SchemaError(where + " (id_train) requires \"labels\"");
    }
    m.splits.push_back(std::move(s));
  }
  std::sort(m.splits.begin(), m.splits.end(), [](const Split& a, const Split& b) { return a.name < b.name; });
  if (m.with_role(SplitRole::kIdTrain).empty()) throw SchemaError("manifest needs at least one id_train split");
  if (m.with_role(SplitRole::kIdTest).empty()) throw SchemaError("manifest needs at least one id_test split");
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_manifest(doc, path.parent_path());
}

}  // namespace mme
