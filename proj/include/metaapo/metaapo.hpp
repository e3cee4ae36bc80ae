// Copyright 2026 The MetaAPO Toy Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "metaapo/error.hpp"
#include "metaapo/rng.hpp"
#include "metaapo/io.hpp"
#include "metaapo/world.hpp"
#include "metaapo/policy.hpp"
#include "metaapo/scoring.hpp"
#include "metaapo/meta.hpp"
#include "metaapo/sampler.hpp"
#include "metaapo/trainer.hpp"
#include "metaapo/verify.hpp"

namespace metaapo {
inline constexpr const char* kVersion = "0.1.0";
}  // namespace metaapo
