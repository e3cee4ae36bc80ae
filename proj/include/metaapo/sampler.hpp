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
#include <limits>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "metaapo/error.hpp"
#include "metaapo/meta.hpp"
#include "metaapo/policy.hpp"
#include "metaapo/rng.hpp"
#include "metaapo/scoring.hpp"
#include "metaapo/world.hpp"

namespace metaapo {

// ---- weights -----------------------------------------------------------------

/// Source of the per-pair weight w: the learned network, a fixed sigmoid
/// heuristic sigma(a * l_off + b), or a constant.
struct Weighter {
  enum class Kind { Network, Heuristic, Constant };

  Kind kind = Kind::Network;
  const MetaLearnerParams* network = nullptr;
  MetaInput input = MetaInput::Score;
  double a = 1.0;
  double b = 0.0;
  double constant = 0.5;

  static Weighter of(const MetaLearnerParams& net, MetaInput input = MetaInput::Score) {
    Weighter w;
    w.network = &net;
    w.input = input;
    return w;
  }
  static Weighter heuristic(double a, double b) {
    Weighter w;
    w.kind = Kind::Heuristic;
    w.a = a;
    w.b = b;
    return w;
  }
  static Weighter fixed(double c) {
    Weighter w;
    w.kind = Kind::Constant;
    w.constant = c;
    return w;
  }

  double operator()(const ScoringContext& ctx, const PreferencePair& offline,
                    double l_off) const {
    switch (kind) {
      case Kind::Network:
        return meta_forward(*network, meta_features(ctx, offline, l_off, input)).value;
      case Kind::Heuristic:
        return clamp_open_unit(sigmoid(a * l_off + b));
      case Kind::Constant:
        break;
    }
    return constant;
  }
};

// ---- selection ---------------------------------------------------------------

struct SamplingDecision {
  std::size_t offline_index = 0;
  MetaWeight weight;
  double draw = 0.0;
  bool selected = false;
};

/// u ~ Uniform[0, 1); selected iff u > w (strict).
inline SamplingDecision decide(MetaWeight weight, Rng& rng) {
  SamplingDecision d;
  d.weight = weight;
  d.draw = rng.uniform01();
  d.selected = d.draw > weight.value;
  return d;
}

struct Annotation {
  bool degenerate = false;
  int chosen_position = 0;
  int rejected_position = 0;
  int chosen = 0;    // response index
  int rejected = 0;  // response index
};

/// Best and worst candidate by true reward; ties go to the earliest position.
inline Annotation annotate(const ToyWorld& world, int prompt,
                           std::span<const int> candidates) {
  if (candidates.empty()) throw DomainError("annotate: empty candidate list");
  Annotation a;
  double best = world.reward(prompt, candidates[0]);
  double worst = best;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const double r = world.reward(prompt, candidates[i]);
    if (r > best) {
      best = r;
      a.chosen_position = static_cast<int>(i);
    }
    if (r < worst) {
      worst = r;
      a.rejected_position = static_cast<int>(i);
    }
  }
  a.chosen = candidates[a.chosen_position];
  a.rejected = candidates[a.rejected_position];
  a.degenerate = a.chosen == a.rejected;
  return a;
}

// ---- variants ----------------------------------------------------------------

/// Selection rule. MetaAPO and FixedHeuristic use u > w; the others ignore w
/// for selection but still weight the loss with the learned network.
struct Variant {
  enum class Kind { MetaAPO, Random, Threshold, All, FixedHeuristic };

  Kind kind = Kind::MetaAPO;
  double param = 0.0;  // p for Random, tau for Threshold

  static Variant metaapo() { return {}; }
  static Variant random(double p) { return {Kind::Random, p}; }
  static Variant threshold(double tau) { return {Kind::Threshold, tau}; }
  static Variant all() { return {Kind::All, 0.0}; }
  static Variant fixed_heuristic() { return {Kind::FixedHeuristic, 0.0}; }

  void validate() const {
    if (kind == Kind::Random && !(param >= 0.0 && param <= 1.0))
      throw ConfigError("random sampling probability must lie in [0, 1]");
    if (kind == Kind::Threshold && std::isnan(param))
      throw ConfigError("threshold must not be NaN");
  }
};

inline std::string to_string(const Variant& v) {
  switch (v.kind) {
    case Variant::Kind::MetaAPO: return "metaapo";
    case Variant::Kind::Random: return "random:" + io::fmt(v.param);
    case Variant::Kind::Threshold: return "threshold:" + io::fmt(v.param);
    case Variant::Kind::All: return "all";
    case Variant::Kind::FixedHeuristic: return "fixed-heuristic";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  auto number = [&](std::size_t colon) {
    try {
      std::size_t used = 0;
      const std::string tail = s.substr(colon + 1);
      const double v = std::stod(tail, &used);
      if (used != tail.size()) throw std::invalid_argument(tail);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("bad numeric parameter in variant '" + s + "'");
    }
  };
  if (s == "metaapo") return Variant::metaapo();
  if (s == "all") return Variant::all();
  if (s == "fixed-heuristic") return Variant::fixed_heuristic();
  if (s.rfind("random:", 0) == 0) return Variant::random(number(6));
  if (s.rfind("threshold:", 0) == 0) {
    const std::string tail = s.substr(10);
    if (tail == "-inf") return Variant::threshold(-std::numeric_limits<double>::infinity());
    if (tail == "inf") return Variant::threshold(std::numeric_limits<double>::infinity());
    return Variant::threshold(number(9));
  }
  throw ConfigError("unknown variant '" + s +
                    "' (expected metaapo|random:p|threshold:t|all|fixed-heuristic)");
}

// ---- augmentation ------------------------------------------------------------

struct AnnotationBudgetReport {
  std::size_t offline_count = 0;
  std::size_t selected_count = 0;
  std::size_t generated_responses = 0;
  std::size_t degenerate_count = 0;

  double annotation_ratio() const {
    return offline_count == 0 ? 0.0
                              : static_cast<double>(selected_count) /
                                    static_cast<double>(offline_count);
  }
};

/// One line of the sampling audit: every offline pair, selected or not.
struct AuditRecord {
  int iteration = 0;
  std::size_t offline_index = 0;
  int prompt = 0;
  int off_chosen = 0;
  int off_rejected = 0;
  int on_chosen = -1;
  int on_rejected = -1;
  double weight = 0.0;
  double draw = 0.0;
  bool sampled = false;
  bool degenerate = false;
  bool shadow = false;  // online pair produced by the verification-only pass
  double l_off = 0.0;
  double l_on = 0.0;
};

struct SamplerConfig {
  ScoringConfig scoring;
  int k = 8;
  double temperature = 1.0;
  Variant variant;
  bool include_unselected_offline = false;
  // Verification mode: also generate (outside the budget) for unselected
  // pairs so every audit record carries an online score.
  bool shadow_generation = false;
  int workers = 1;
  std::uint64_t seed = 0;
  int iteration = 0;
};

struct SamplingResult {
  std::vector<AugmentedTuple> tuples;  // offline-dataset order
  AnnotationBudgetReport report;
  std::vector<AuditRecord> audit;      // one per offline pair
  double mean_l_off = 0.0;
  double mean_weight = 0.0;
};

/// Selection + generation + annotation over `pairs`, whose first element is
/// offline index `first_index` in the full dataset. Every pair owns the
/// stream stream_seed(cfg.seed, {iteration, offline_index}); it yields u,
/// then the K candidates. Results do not depend on cfg.workers.
inline SamplingResult build_augmented(std::span<const OfflinePair> pairs,
                                      std::size_t first_index,
                                      const ScoringContext& ctx,
                                      const Weighter& weighter,
                                      const SamplerConfig& cfg) {
  if (cfg.k < 2) throw ConfigError("K must be >= 2");
  if (!(cfg.temperature > 0.0)) throw ConfigError("temperature must be > 0");
  cfg.variant.validate();
  const std::size_t n = pairs.size();

  struct Slot {
    AuditRecord audit;
    bool emit = false;
    AugmentedTuple tuple;
  };
  std::vector<Slot> slots(n);

  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const OfflinePair& off = pairs[i];
      const std::size_t index = first_index + i;
      Rng rng(stream_seed(cfg.seed, {static_cast<std::uint64_t>(cfg.iteration),
                                     static_cast<std::uint64_t>(index)}));
      const double l_off = ctx.score(off).value;
      const double w = weighter(ctx, off, l_off);
      const SamplingDecision d = decide({w}, rng);
      bool selected = d.selected;
      switch (cfg.variant.kind) {
        case Variant::Kind::Random: selected = d.draw < cfg.variant.param; break;
        case Variant::Kind::Threshold: selected = l_off < cfg.variant.param; break;
        case Variant::Kind::All: selected = true; break;
        default: break;
      }

      Slot& s = slots[i];
      AuditRecord& a = s.audit;
      a.iteration = cfg.iteration;
      a.offline_index = index;
      a.prompt = off.prompt;
      a.off_chosen = off.chosen;
      a.off_rejected = off.rejected;
      a.weight = w;
      a.draw = d.draw;
      a.sampled = selected;
      a.l_off = l_off;

      if (selected || cfg.shadow_generation) {
        const auto cand = sample_k(ctx.policy, off.prompt, cfg.k, cfg.temperature, rng);
        const Annotation ann = annotate(ctx.world, off.prompt, cand);
        a.on_chosen = ann.chosen;
        a.on_rejected = ann.rejected;
        a.degenerate = ann.degenerate;
        a.shadow = !selected;
        a.l_on = ctx.score({off.prompt, ann.chosen, ann.rejected}).value;
        if (selected && !ann.degenerate) {
          s.emit = true;
          s.tuple = AugmentedTuple{off.prompt, off, ann.chosen, ann.rejected,
                                   true, l_off, a.l_on};
        }
      }
      if (!selected && cfg.include_unselected_offline) {
        s.emit = true;
        s.tuple = AugmentedTuple{off.prompt, off, -1, -1, false, l_off, 0.0};
      }
    }
  };

  const int workers = std::max(1, std::min<int>(cfg.workers, static_cast<int>(n)));
  if (workers <= 1) {
    work(0, n);
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (n + workers - 1) / workers;
    for (int t = 0; t < workers; ++t) {
      const std::size_t b = t * chunk, e = std::min(n, b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
  }

  SamplingResult out;
  out.report.offline_count = n;
  out.audit.reserve(n);
  double sum_l = 0.0, sum_w = 0.0;
  for (auto& s : slots) {
    const auto& a = s.audit;
    sum_l += a.l_off;
    sum_w += a.weight;
    if (a.sampled) {
      ++out.report.selected_count;
      out.report.generated_responses += static_cast<std::size_t>(cfg.k);
      if (a.degenerate) ++out.report.degenerate_count;
    }
    if (s.emit) out.tuples.push_back(s.tuple);
    out.audit.push_back(a);
  }
  if (n > 0) {
    out.mean_l_off = sum_l / static_cast<double>(n);
    out.mean_weight = sum_w / static_cast<double>(n);
  }
  return out;
}

/// Same pipeline with the selection rule swapped. FixedHeuristic replaces the
/// network by sigma(a * l_off + b) for selection.
inline SamplingResult build_variant(std::span<const OfflinePair> pairs,
                                    std::size_t first_index,
                                    const ScoringContext& ctx,
                                    const Weighter& weighter, SamplerConfig cfg,
                                    Variant variant) {
  cfg.variant = variant;
  return build_augmented(pairs, first_index, ctx, weighter, cfg);
}

inline std::string augmented_to_jsonl(const SamplingResult& r) {
  std::string out;
  for (const auto& a : r.audit) {
    if (!a.sampled || a.degenerate) continue;
    out += "{\"prompt\": " + std::to_string(a.prompt) +
           ", \"off_chosen\": " + std::to_string(a.off_chosen) +
           ", \"off_rejected\": " + std::to_string(a.off_rejected) +
           ", \"on_chosen\": " + std::to_string(a.on_chosen) +
           ", \"on_rejected\": " + std::to_string(a.on_rejected) +
           ", \"weight\": " + io::fmt(a.weight) + ", \"draw\": " + io::fmt(a.draw) +
           "}\n";
  }
  return out;
}

inline std::string audit_to_jsonl(std::span<const AuditRecord> records) {
  std::string out;
  for (const auto& a : records) {
    out += "{\"iteration\": " + std::to_string(a.iteration) +
           ", \"offline_index\": " + std::to_string(a.offline_index) +
           ", \"prompt\": " + std::to_string(a.prompt) +
           ", \"off_chosen\": " + std::to_string(a.off_chosen) +
           ", \"off_rejected\": " + std::to_string(a.off_rejected) +
           ", \"on_chosen\": " + std::to_string(a.on_chosen) +
           ", \"on_rejected\": " + std::to_string(a.on_rejected) +
           ", \"weight\": " + io::fmt(a.weight) + ", \"draw\": " + io::fmt(a.draw) +
           ", \"sampled\": " + (a.sampled ? "true" : "false") +
           ", \"degenerate\": " + (a.degenerate ? "true" : "false") +
           ", \"shadow\": " + (a.shadow ? "true" : "false") +
           ", \"l_off\": " + io::fmt(a.l_off) + ", \"l_on\": " + io::fmt(a.l_on) +
           "}\n";
  }
  return out;
}

}  // namespace metaapo
