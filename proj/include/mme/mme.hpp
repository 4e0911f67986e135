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

#include "mme/calibration.hpp"
#include "mme/csv.hpp"
#include "mme/ensemble.hpp"
#include "mme/error.hpp"
#include "mme/evaluation.hpp"
#include "mme/pipeline.hpp"
#include "mme/random.hpp"
#include "mme/scoring.hpp"
#include "mme/tensor_store.hpp"
#include "mme/toy.hpp"
#include "mme/truncation.hpp"
#include "mme/types.hpp"
#include "mme/version.hpp"
