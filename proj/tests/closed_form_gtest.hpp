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

#include <cctype>
#include <string>

#include <gtest/gtest.h>

#include "closed_form_cases.hpp"

class ClosedForm : public ::testing::TestWithParam<closed_form::Case> {};

inline std::string closed_form_test_name(const ::testing::TestParamInfo<closed_form::Case>& info) {
  std::string out;
  for (char ch : info.param.name) out += std::isalnum(static_cast<unsigned char>(ch)) ? ch : '_';
  return std::to_string(info.index) + "_" + out;
}

#define MME_CLOSED_FORM_SUITE(Suite, cases)                                                           \
  TEST_P(ClosedForm, Holds) { EXPECT_EQ(closed_form::run_case(GetParam()), "") << GetParam().name; } \
  INSTANTIATE_TEST_SUITE_P(Suite, ClosedForm, ::testing::ValuesIn(cases), closed_form_test_name)
