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

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <span>

namespace metaapo {

/// SplitMix64 finaliser. Used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for the stream identified by (master, tags...). Folding is order
/// sensitive, so (s, 1, 2) and (s, 2, 1) name different streams.
inline std::uint64_t stream_seed(std::uint64_t master,
                                 std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = mix64(master);
  for (std::uint64_t t : tags) h = mix64(h ^ mix64(t));
  return h;
}

/// Seeded random stream with a fixed, documented draw sequence.
///
/// The engine is std::mt19937_64, whose output sequence is pinned by the
/// standard. The distribution transforms are written out here rather than
/// taken from <random>, whose distributions are implementation-defined:
///
///   uniform01()  = (next() >> 11) * 2^-53                      in [0, 1)
///   normal()     = sqrt(-2 ln(1 - a)) * cos(2 pi b), a then b uniform01()
///   index(n)     = next() % n, rejecting next() < (2^64 - n) mod n
///   categorical  = first i with u < cumsum(p)[i], u = uniform01() * sum(p)
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double normal() {
    const double a = uniform01();
    const double b = uniform01();
    return std::sqrt(-2.0 * std::log(1.0 - a)) *
           std::cos(2.0 * std::numbers::pi * b);
  }

  std::size_t index(std::size_t n) {
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      const std::uint64_t x = engine_();
      if (x >= threshold) return static_cast<std::size_t>(x % bound);
    }
  }

  /// Draw from unnormalised non-negative weights. At least one weight must be
  /// positive; the last positive entry absorbs rounding at the top end.
  std::size_t categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    const double u = uniform01() * total;
    double acc = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] <= 0.0) continue;
      acc += weights[i];
      last_positive = i;
      if (u < acc) return i;
    }
    return last_positive;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace metaapo
