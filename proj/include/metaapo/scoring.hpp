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
#include <string>
#include <vector>

#include "metaapo/error.hpp"
#include "metaapo/policy.hpp"
#include "metaapo/world.hpp"

namespace metaapo {

enum class Objective { DPO, SimPO };

inline std::string to_string(Objective o) {
  return o == Objective::DPO ? "dpo" : "simpo";
}

inline Objective parse_objective(const std::string& s) {
  if (s == "dpo") return Objective::DPO;
  if (s == "simpo") return Objective::SimPO;
  throw ConfigError("unknown objective '" + s + "' (expected dpo|simpo)");
}

struct ScoringConfig {
  Objective objective = Objective::DPO;
  double beta = 0.1;
  double gamma = 0.6;  // SimPO target margin; ignored by DPO

  void validate() const {
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be > 0");
    if (!std::isfinite(gamma)) throw ConfigError("gamma must be finite");
  }
};

/// log sigma(margin) of a preference pair; always <= 0.
struct PreferenceScore {
  double value = 0.0;
};

/// (prompt, chosen, rejected); shared by offline and online pairs.
using PreferencePair = OfflinePair;

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log sigma(x) = -softplus(-x), without overflow in either tail.
inline double log_sigmoid(double x) {
  return -std::log1p(std::exp(-std::abs(x))) - std::max(-x, 0.0);
}

inline double log_ratio(const PolicyParams& policy, const ReferencePolicy& ref,
                        int prompt, int response) {
  return log_prob(policy, prompt, response) - log_prob(ref, prompt, response);
}

/// beta * [log(pi/ref)(y_w) - log(pi/ref)(y_l)], via log-probabilities so the
/// shared normalisers cancel numerically rather than by construction.
inline double dpo_margin(const PolicyParams& policy, const ReferencePolicy& ref,
                         double beta, const PreferencePair& pair) {
  return beta * (log_ratio(policy, ref, pair.prompt, pair.chosen) -
                 log_ratio(policy, ref, pair.prompt, pair.rejected));
}

inline double simpo_margin(const PolicyParams& policy, const ToyWorld& world,
                           double beta, double gamma,
                           const PreferencePair& pair) {
  const double lw = world.length(pair.prompt, pair.chosen);
  const double ll = world.length(pair.prompt, pair.rejected);
  return beta / lw * log_prob(policy, pair.prompt, pair.chosen) -
         beta / ll * log_prob(policy, pair.prompt, pair.rejected) - gamma;
}

inline PreferenceScore score_dpo(const PolicyParams& policy,
                                 const ReferencePolicy& ref,
                                 const ScoringConfig& cfg,
                                 const PreferencePair& pair) {
  if (cfg.objective != Objective::DPO)
    throw ConfigError("score_dpo called with a non-DPO scoring config");
  return {log_sigmoid(dpo_margin(policy, ref, cfg.beta, pair))};
}

/// Reference-free; the reference policy is never read.
inline PreferenceScore score_simpo(const PolicyParams& policy,
                                   const ToyWorld& world,
                                   const ScoringConfig& cfg,
                                   const PreferencePair& pair) {
  if (cfg.objective != Objective::SimPO)
    throw ConfigError("score_simpo called with a non-SimPO scoring config");
  return {log_sigmoid(simpo_margin(policy, world, cfg.beta, cfg.gamma, pair))};
}

/// Everything a score needs, bundled for call sites that do not care which
/// objective is active.
struct ScoringContext {
  const PolicyParams& policy;
  const ReferencePolicy& reference;
  const ToyWorld& world;
  ScoringConfig cfg;

  double margin(const PreferencePair& pair) const {
    return cfg.objective == Objective::DPO
               ? dpo_margin(policy, reference, cfg.beta, pair)
               : simpo_margin(policy, world, cfg.beta, cfg.gamma, pair);
  }

  PreferenceScore score(const PreferencePair& pair) const {
    return {log_sigmoid(margin(pair))};
  }
};

/// d score / d logits of the pair's prompt:
///   DPO:   sigma(-m) * beta * (g_w - g_l)
///   SimPO: sigma(-m) * (beta/|y_w| g_w - beta/|y_l| g_l)
/// with g_y = grad log pi(y | x).
inline std::vector<double> grad_score(const PolicyParams& policy,
                                      const ReferencePolicy& ref,
                                      const ToyWorld& world,
                                      const ScoringConfig& cfg,
                                      const PreferencePair& pair) {
  const ScoringContext ctx{policy, ref, world, cfg};
  const double outer = sigmoid(-ctx.margin(pair));
  double cw = cfg.beta, cl = cfg.beta;
  if (cfg.objective == Objective::SimPO) {
    cw /= world.length(pair.prompt, pair.chosen);
    cl /= world.length(pair.prompt, pair.rejected);
  }
  // cw*g_w - cl*g_l = cw*e_w - cl*e_l - (cw - cl)*softmax
  const auto probs = softmax(policy.row(pair.prompt));
  std::vector<double> g(probs.size());
  for (std::size_t j = 0; j < probs.size(); ++j) g[j] = -(cw - cl) * probs[j];
  g[pair.chosen] += cw;
  g[pair.rejected] -= cl;
  for (double& v : g) v *= outer;
  return g;
}

}  // namespace metaapo
