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

#include <stdexcept>
#include <string>

namespace mme {

/// Base class for every error raised by the toolkit. `exit_code()` is the
/// process status the command-line front end reports for it.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 2; }
  virtual const char* kind() const noexcept { return "Error"; }
};

#define MME_DEFINE_ERROR(Name, Code)                                  \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(#Name ": " + what) {} \
    int exit_code() const noexcept override { return Code; }          \
    const char* kind() const noexcept override { return #Name; }      \
  };

// Input / configuration problems.
MME_DEFINE_ERROR(FormatError, 2)
MME_DEFINE_ERROR(ShapeError, 2)
MME_DEFINE_ERROR(IoError, 2)
MME_DEFINE_ERROR(SchemaError, 2)
MME_DEFINE_ERROR(LabelError, 2)
MME_DEFINE_ERROR(ConfigError, 2)

// Numeric / statistical failures.
MME_DEFINE_ERROR(NumericError, 3)
MME_DEFINE_ERROR(CalibrationError, 3)
MME_DEFINE_ERROR(EvalError, 3)

#undef MME_DEFINE_ERROR

}  // namespace mme
