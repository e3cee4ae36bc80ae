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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "metaapo/error.hpp"
#include "metaapo/io.hpp"
#include "metaapo/rng.hpp"
#include "metaapo/world.hpp"

namespace metaapo {

/// Tabular softmax policy: one logit vector per prompt.
struct PolicyParams {
  std::vector<std::vector<double>> logits;

  int num_prompts() const { return static_cast<int>(logits.size()); }

  std::span<const double> row(int prompt) const {
    if (prompt < 0 || prompt >= num_prompts())
      throw DomainError("prompt out of range: " + std::to_string(prompt));
    return logits[prompt];
  }

  bool operator==(const PolicyParams&) const = default;
};

/// Same shape as PolicyParams; frozen once constructed.
class ReferencePolicy {
 public:
  ReferencePolicy() = default;
  explicit ReferencePolicy(PolicyParams params) : params_(std::move(params)) {}

  const PolicyParams& params() const { return params_; }
  std::span<const double> row(int prompt) const { return params_.row(prompt); }

 private:
  PolicyParams params_;
};

/// Gradient over every policy logit; rows not touched stay zero.
using PolicyGradient = std::vector<std::vector<double>>;

inline PolicyGradient zero_gradient(const PolicyParams& like) {
  PolicyGradient g(like.logits.size());
  for (std::size_t p = 0; p < g.size(); ++p) g[p].assign(like.logits[p].size(), 0.0);
  return g;
}

inline double logsumexp(std::span<const double> x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : x) s += std::exp(v - mx);
  return mx + std::log(s);
}

inline std::vector<double> softmax(std::span<const double> x,
                                   double temperature = 1.0) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> p(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    p[i] = std::exp((x[i] - mx) / temperature);
    s += p[i];
  }
  for (double& v : p) v /= s;
  return p;
}

inline double log_prob(std::span<const double> logits, int response) {
  if (response < 0 || response >= static_cast<int>(logits.size()))
    throw DomainError("response out of range: " + std::to_string(response));
  return logits[response] - logsumexp(logits);
}

inline double log_prob(const PolicyParams& policy, int prompt, int response) {
  return log_prob(policy.row(prompt), response);
}

inline double log_prob(const ReferencePolicy& ref, int prompt, int response) {
  return log_prob(ref.row(prompt), response);
}

/// d log pi(response | prompt) / d logits = onehot(response) - softmax.
inline std::vector<double> grad_log_prob(const PolicyParams& policy, int prompt,
                                         int response) {
  auto row = policy.row(prompt);
  if (response < 0 || response >= static_cast<int>(row.size()))
    throw DomainError("response out of range: " + std::to_string(response));
  auto g = softmax(row);
  for (double& v : g) v = -v;
  g[response] += 1.0;
  return g;
}

/// K i.i.d. draws from softmax(logits / temperature).
inline std::vector<int> sample_k(const PolicyParams& policy, int prompt, int k,
                                 double temperature, Rng& rng) {
  if (k < 1) throw ConfigError("k must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  const auto probs = softmax(policy.row(prompt), temperature);
  std::vector<int> out(k);
  for (int& y : out) y = static_cast<int>(rng.categorical(probs));
  return out;
}

/// Behavior-policy logits (reward / temperature) plus N(0, noise_std^2)
/// perturbation, drawn prompt-major from one stream.
inline ReferencePolicy make_reference(const ToyWorld& world,
                                      double behavior_temperature,
                                      double noise_std, std::uint64_t seed) {
  if (!(noise_std >= 0.0)) throw ConfigError("reference noise std must be >= 0");
  PolicyParams p;
  p.logits.resize(world.num_prompts);
  Rng rng(seed);
  for (int x = 0; x < world.num_prompts; ++x) {
    p.logits[x] = behavior_logits(world, x, behavior_temperature);
    for (double& v : p.logits[x]) v += noise_std * rng.normal() + 0.0;
  }
  return ReferencePolicy(std::move(p));
}

/// Expected true reward and pooled standard deviation when every prompt is
/// answered by sampling at `temperature`, prompts weighted uniformly.
struct RewardStats {
  double mean = 0.0;
  double std = 0.0;
};

inline RewardStats expected_reward(const PolicyParams& policy,
                                   const ToyWorld& world, double temperature,
                                   std::span<const int> prompts) {
  double m1 = 0.0, m2 = 0.0;
  for (int x : prompts) {
    const auto probs = softmax(policy.row(x), temperature);
    for (std::size_t y = 0; y < probs.size(); ++y) {
      const double r = world.reward(x, static_cast<int>(y));
      m1 += probs[y] * r;
      m2 += probs[y] * r * r;
    }
  }
  const double n = static_cast<double>(prompts.size());
  RewardStats s;
  s.mean = m1 / n;
  s.std = std::sqrt(std::max(0.0, m2 / n - s.mean * s.mean));
  return s;
}

inline std::string policy_to_json(const PolicyParams& p) {
  return "{\n  \"logits\": " + io::json_matrix(p.logits) + "\n}\n";
}

inline PolicyParams policy_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  PolicyParams p;
  p.logits = j.at("logits").get<std::vector<std::vector<double>>>();
  for (const auto& row : p.logits)
    for (double v : row)
      if (!std::isfinite(v)) throw DomainError("non-finite logit in checkpoint");
  return p;
}

}  // namespace metaapo
