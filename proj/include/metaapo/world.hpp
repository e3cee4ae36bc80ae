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
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "metaapo/error.hpp"
#include "metaapo/io.hpp"
#include "metaapo/rng.hpp"

namespace metaapo {

/// Synthetic alignment environment: every prompt has the same number of
/// discrete responses, each with a noiseless reward and a token-count analog.
struct ToyWorld {
  int num_prompts = 0;
  int responses_per_prompt = 0;
  std::vector<std::vector<double>> true_reward;     // [prompt][response]
  std::vector<std::vector<int>> response_length;    // [prompt][response], >= 1

  double reward(int prompt, int response) const {
    check(prompt, response);
    return true_reward[prompt][response];
  }

  int length(int prompt, int response) const {
    check(prompt, response);
    return response_length[prompt][response];
  }

  bool valid_prompt(int prompt) const {
    return prompt >= 0 && prompt < num_prompts;
  }

  bool valid_response(int response) const {
    return response >= 0 && response < responses_per_prompt;
  }

  void check(int prompt, int response) const {
    if (!valid_prompt(prompt) || !valid_response(response)) {
      throw DomainError("index out of range: prompt " + std::to_string(prompt) +
                        ", response " + std::to_string(response));
    }
  }

  /// Throws ConfigError when the shape or value invariants are broken.
  void validate() const {
    if (num_prompts < 1) throw ConfigError("world needs num_prompts >= 1");
    if (responses_per_prompt < 2)
      throw ConfigError("world needs responses_per_prompt >= 2");
    if (static_cast<int>(true_reward.size()) != num_prompts ||
        static_cast<int>(response_length.size()) != num_prompts)
      throw ConfigError("world tables do not match num_prompts");
    for (int p = 0; p < num_prompts; ++p) {
      if (static_cast<int>(true_reward[p].size()) != responses_per_prompt ||
          static_cast<int>(response_length[p].size()) != responses_per_prompt)
        throw ConfigError("world row " + std::to_string(p) +
                          " does not match responses_per_prompt");
      for (int r = 0; r < responses_per_prompt; ++r) {
        if (!std::isfinite(true_reward[p][r]))
          throw ConfigError("non-finite reward in world");
        if (response_length[p][r] < 1)
          throw ConfigError("response length must be >= 1");
      }
    }
  }

  bool operator==(const ToyWorld&) const = default;
};

struct LengthRange {
  int low = 1;
  int high = 1;
};

/// Shape of the synthetic world and its offline dataset (toy defaults).
struct WorldConfig {
  int prompts = 200;
  int responses = 16;
  double reward_scale = 1.0;
  LengthRange lengths{1, 8};
  int pairs_per_prompt = 30;
  double behavior_temperature = 2.0;
  double label_noise_rate = 0.3;
};

struct OfflinePair {
  int prompt = 0;
  int chosen = 0;    // y_w
  int rejected = 0;  // y_l

  bool operator==(const OfflinePair&) const = default;
};

struct OfflineDataset {
  std::vector<OfflinePair> pairs;
  double label_noise_rate = 0.0;
  double behavior_temperature = 1.0;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

/// Rewards are reward_scale * N(0, 1), drawn prompt-major from one stream
/// seeded with `seed`; lengths are drawn afterwards from the same stream,
/// uniformly in [low, high], also prompt-major.
inline ToyWorld build_world(int num_prompts, int responses_per_prompt,
                            double reward_scale, LengthRange lengths,
                            std::uint64_t seed) {
  if (num_prompts < 1) throw ConfigError("num_prompts must be >= 1");
  if (responses_per_prompt < 2)
    throw ConfigError("responses_per_prompt must be >= 2");
  if (lengths.low < 1 || lengths.high < lengths.low)
    throw ConfigError("length range must satisfy 1 <= low <= high");
  if (!std::isfinite(reward_scale) || reward_scale < 0.0)
    throw ConfigError("reward_scale must be finite and >= 0");

  ToyWorld w;
  w.num_prompts = num_prompts;
  w.responses_per_prompt = responses_per_prompt;
  w.true_reward.assign(num_prompts, std::vector<double>(responses_per_prompt));
  w.response_length.assign(num_prompts, std::vector<int>(responses_per_prompt));

  Rng rng(seed);
  for (auto& row : w.true_reward)
    for (double& r : row) r = reward_scale * rng.normal() + 0.0;  // no -0.0
  const auto span = static_cast<std::size_t>(lengths.high - lengths.low + 1);
  for (auto& row : w.response_length)
    for (int& len : row) len = lengths.low + static_cast<int>(rng.index(span));
  return w;
}

/// Logits of the reward-softmax behavior policy that produced the offline data.
inline std::vector<double> behavior_logits(const ToyWorld& world, int prompt,
                                           double temperature) {
  if (!world.valid_prompt(prompt)) throw DomainError("prompt out of range");
  std::vector<double> out(world.true_reward[prompt]);
  for (double& x : out) x /= temperature;
  return out;
}

/// Orders two distinct responses by true reward; ties go to the lower index.
inline OfflinePair label_by_reward(const ToyWorld& world, int prompt, int a,
                                   int b) {
  const double ra = world.reward(prompt, a);
  const double rb = world.reward(prompt, b);
  const bool a_wins = ra > rb || (ra == rb && a < b);
  return a_wins ? OfflinePair{prompt, a, b} : OfflinePair{prompt, b, a};
}

/// Pairs are emitted round-major: round 0 visits every prompt once, then
/// round 1, and so on. Contiguous slices of the dataset therefore cover
/// (nearly) all prompts. Per pair the stream yields: first response,
/// second response (conditioned on being distinct), flip draw.
inline OfflineDataset generate_offline_dataset(const ToyWorld& world,
                                               double behavior_temperature,
                                               int pairs_per_prompt,
                                               double label_noise_rate,
                                               std::uint64_t seed) {
  if (world.responses_per_prompt < 2)
    throw ConfigError("offline pairs need responses_per_prompt >= 2");
  if (!(label_noise_rate >= 0.0 && label_noise_rate <= 1.0))
    throw ConfigError("label_noise_rate must lie in [0, 1]");
  if (!(behavior_temperature > 0.0) || !std::isfinite(behavior_temperature))
    throw ConfigError("behavior_temperature must be positive");
  if (pairs_per_prompt < 0) throw ConfigError("pairs_per_prompt must be >= 0");

  const int n = world.responses_per_prompt;
  std::vector<std::vector<double>> probs(world.num_prompts);
  for (int p = 0; p < world.num_prompts; ++p) {
    auto logits = behavior_logits(world, p, behavior_temperature);
    double mx = logits[0];
    for (double x : logits) mx = std::max(mx, x);
    probs[p].resize(n);
    for (int r = 0; r < n; ++r) probs[p][r] = std::exp(logits[r] - mx);
  }

  OfflineDataset ds;
  ds.label_noise_rate = label_noise_rate;
  ds.behavior_temperature = behavior_temperature;
  ds.pairs.reserve(static_cast<std::size_t>(pairs_per_prompt) *
                   world.num_prompts);
  Rng rng(seed);
  std::vector<double> rest(n);
  for (int round = 0; round < pairs_per_prompt; ++round) {
    for (int p = 0; p < world.num_prompts; ++p) {
      const int a = static_cast<int>(rng.categorical(probs[p]));
      rest = probs[p];
      rest[a] = 0.0;
      double mass = 0.0;
      for (double x : rest) mass += x;
      int b;
      if (mass > 0.0) {
        b = static_cast<int>(rng.categorical(rest));
      } else {
        // Every other response underflowed; fall back to uniform.
        b = static_cast<int>(rng.index(static_cast<std::size_t>(n - 1)));
        if (b >= a) ++b;
      }
      OfflinePair pair = label_by_reward(world, p, a, b);
      if (rng.uniform01() < label_noise_rate) std::swap(pair.chosen, pair.rejected);
      ds.pairs.push_back(pair);
    }
  }
  return ds;
}

// ---- serialization ---------------------------------------------------------

inline std::string world_to_json(const ToyWorld& w) {
  std::ostringstream out;
  out << "{\n  \"num_prompts\": " << w.num_prompts
      << ",\n  \"responses_per_prompt\": " << w.responses_per_prompt
      << ",\n  \"true_reward\": " << io::json_matrix(w.true_reward)
      << ",\n  \"response_length\": " << io::json_matrix(w.response_length)
      << "\n}\n";
  return out.str();
}

inline ToyWorld world_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ToyWorld w;
  w.num_prompts = j.at("num_prompts").get<int>();
  w.responses_per_prompt = j.at("responses_per_prompt").get<int>();
  w.true_reward = j.at("true_reward").get<std::vector<std::vector<double>>>();
  w.response_length =
      j.at("response_length").get<std::vector<std::vector<int>>>();
  w.validate();
  return w;
}

inline std::string dataset_to_jsonl(const OfflineDataset& ds) {
  std::string out;
  for (const auto& p : ds.pairs) {
    out += "{\"prompt\": " + std::to_string(p.prompt) +
           ", \"chosen\": " + std::to_string(p.chosen) +
           ", \"rejected\": " + std::to_string(p.rejected) + "}\n";
  }
  return out;
}

/// Noise rate and temperature are not part of the JSON-lines records; they
/// travel in the run manifest and are passed back in here.
inline OfflineDataset dataset_from_jsonl(const std::string& text,
                                         const ToyWorld& world,
                                         double label_noise_rate,
                                         double behavior_temperature) {
  OfflineDataset ds;
  ds.label_noise_rate = label_noise_rate;
  ds.behavior_temperature = behavior_temperature;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line);
    OfflinePair p{j.at("prompt").get<int>(), j.at("chosen").get<int>(),
                  j.at("rejected").get<int>()};
    world.check(p.prompt, p.chosen);
    world.check(p.prompt, p.rejected);
    if (p.chosen == p.rejected)
      throw DomainError("offline pair with chosen == rejected");
    ds.pairs.push_back(p);
  }
  return ds;
}

}  // namespace metaapo
