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

#pragma once

#include <cstdio>
#include <filesystem>
#include <initializer_list>
#include <string>
#include <vector>

#include "mme/tensor_store.hpp"

namespace mme {

/// Six significant digits, printf %g style.
inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

/// Comma-separated table with a mandatory header row.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  class Row {
   public:
    Row& add(const std::string& s) {
      cells_.push_back(s);
      return *this;
    }
    Row& add(const char* s) { return add(std::string(s)); }
    Row& add(double v) { return add(format_number(v)); }
    Row& add(std::size_t v) { return add(std::to_string(v)); }
    Row& add(int v) { return add(std::to_string(v)); }

   private:
    friend class CsvTable;
    std::vector<std::string> cells_;
  };

  Row& row() { return rows_.emplace_back(); }

  std::size_t size() const { return rows_.size(); }
  const std::vector<std::string>& header() const { return header_; }
  const std::vector<std::string>& cells(std::size_t r) const { return rows_[r].cells_; }

  std::string str() const {
    std::string out;
    auto emit = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        out += cells[i];
      }
      out += '\n';
    };
    emit(header_);
    for (const auto& r : rows_) {
      if (r.cells_.size() != header_.size()) throw ShapeError("CSV row width does not match header");
      emit(r.cells_);
    }
    return out;
  }

  void save(const std::filesystem::path& path) const {
    const auto text = str();
    write_file_bytes(path, std::as_bytes(std::span(text.data(), text.size())));
  }

 private:
  std::vector<std::string> header_;
  std::vector<Row> rows_;
};

}  // namespace mme
