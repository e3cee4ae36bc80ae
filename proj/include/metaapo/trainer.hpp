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
#include <climits>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "metaapo/error.hpp"
#include "metaapo/io.hpp"
#include "metaapo/meta.hpp"
#include "metaapo/policy.hpp"
#include "metaapo/rng.hpp"
#include "metaapo/sampler.hpp"
#include "metaapo/scoring.hpp"
#include "metaapo/world.hpp"

namespace metaapo {

// ---- configuration ---------------------------------------------------------------

enum class Weighting { Meta, Uniform };

struct Seeds {
  std::uint64_t world = 0;
  std::uint64_t data = 0;
  std::uint64_t policy = 0;
  std::uint64_t meta = 1;
  std::uint64_t sampling = 0;
};

struct TrainConfig {
  Objective objective = Objective::DPO;
  // Toy-scale defaults. Tabular log-ratios are O(1) rather than the O(10-100)
  // of sequence log-probabilities, hence beta = 2; alpha and eta are sized so
  // that a prompt moves over many small visits and the network over ~30
  // plain gradient steps per run.
  double beta = 2.0;
  double gamma = 0.6;
  int k = 8;
  int t_meta = 8;
  double alpha = 2.0;
  double eta = 0.5;
  int batch_size = 16;
  int iterations = 3;
  double temperature = 1.0;
  Seeds seeds;
  Variant variant;
  Weighting weighting = Weighting::Meta;

  double reference_noise = 0.5;
  int meta_hidden = 100;
  int meta_depth = 2;
  MetaInput meta_input = MetaInput::Score;
  double meta_init_scale = 0.5;
  bool meta_stale_scores = false;
  bool include_unselected_offline = false;
  bool shuffle = false;
  double heuristic_a = 1.0;
  double heuristic_b = 0.0;
  int workers = 1;
  bool audit = false;

  ScoringConfig scoring() const { return {objective, beta, gamma}; }

  void validate() const {
    scoring().validate();
    variant.validate();
    if (k < 2) throw ConfigError("k must be >= 2");
    if (t_meta < 1) throw ConfigError("t_meta must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be >= 0");
    if (!(eta >= 0.0) || !std::isfinite(eta)) throw ConfigError("eta must be >= 0");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
    if (!(reference_noise >= 0.0)) throw ConfigError("reference_noise must be >= 0");
    if (meta_hidden < 1) throw ConfigError("meta_hidden must be >= 1");
    if (meta_depth < 2) throw ConfigError("meta_depth must be >= 2");
    if (!(meta_init_scale >= 0.0)) throw ConfigError("meta_init_scale must be >= 0");
    if (workers < 1) throw ConfigError("workers must be >= 1");
  }
};

namespace detail {

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
}

inline long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError("'" + key + "' expects an integer, got '" + v + "'");
}

inline std::uint64_t parse_seed(const std::string& key, const std::string& v) {
  const long long x = parse_int(key, v);
  if (x < 0) throw ConfigError("'" + key + "' must be >= 0");
  return static_cast<std::uint64_t>(x);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("'" + key + "' expects true|false, got '" + v + "'");
}

inline int parse_count(const std::string& key, const std::string& v) {
  if (v == "inf") return INT_MAX;
  const long long x = parse_int(key, v);
  if (x < INT_MIN || x > INT_MAX) throw ConfigError("'" + key + "' out of range");
  return static_cast<int>(x);
}

}  // namespace detail

/// Applies one key=value assignment. Keys mirror the field names.
inline void apply_setting(TrainConfig& c, const std::string& key,
                          const std::string& v) {
  using namespace detail;
  if (key == "objective") c.objective = parse_objective(v);
  else if (key == "beta") c.beta = parse_real(key, v);
  else if (key == "gamma") c.gamma = parse_real(key, v);
  else if (key == "k") c.k = parse_count(key, v);
  else if (key == "t_meta") c.t_meta = parse_count(key, v);
  else if (key == "alpha") c.alpha = parse_real(key, v);
  else if (key == "eta") c.eta = parse_real(key, v);
  else if (key == "batch_size") c.batch_size = parse_count(key, v);
  else if (key == "iterations") c.iterations = parse_count(key, v);
  else if (key == "temperature") c.temperature = parse_real(key, v);
  else if (key == "seed_world") c.seeds.world = parse_seed(key, v);
  else if (key == "seed_data") c.seeds.data = parse_seed(key, v);
  else if (key == "seed_policy") c.seeds.policy = parse_seed(key, v);
  else if (key == "seed_meta") c.seeds.meta = parse_seed(key, v);
  else if (key == "seed_sampling") c.seeds.sampling = parse_seed(key, v);
  else if (key == "variant") c.variant = parse_variant(v);
  else if (key == "weighting") {
    if (v == "meta") c.weighting = Weighting::Meta;
    else if (v == "uniform") c.weighting = Weighting::Uniform;
    else throw ConfigError("unknown weighting '" + v + "' (expected meta|uniform)");
  }
  else if (key == "reference_noise") c.reference_noise = parse_real(key, v);
  else if (key == "meta_hidden") c.meta_hidden = parse_count(key, v);
  else if (key == "meta_depth") c.meta_depth = parse_count(key, v);
  else if (key == "meta_input") {
    if (v == "score") c.meta_input = MetaInput::Score;
    else if (v == "multi") c.meta_input = MetaInput::Multi;
    else throw ConfigError("unknown meta_input '" + v + "' (expected score|multi)");
  }
  else if (key == "meta_init_scale") c.meta_init_scale = parse_real(key, v);
  else if (key == "meta_stale_scores") c.meta_stale_scores = parse_bool(key, v);
  else if (key == "include_unselected_offline") c.include_unselected_offline = parse_bool(key, v);
  else if (key == "shuffle") c.shuffle = parse_bool(key, v);
  else if (key == "heuristic_a") c.heuristic_a = parse_real(key, v);
  else if (key == "heuristic_b") c.heuristic_b = parse_real(key, v);
  else if (key == "workers") c.workers = parse_count(key, v);
  else if (key == "audit") c.audit = parse_bool(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

/// Flat key=value text; '#' starts a comment, blank lines are ignored.
inline std::vector<std::pair<std::string, std::string>> parse_key_values(
    const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

inline std::string config_to_text(const TrainConfig& c) {
  std::ostringstream o;
  auto count = [](int v) { return v == INT_MAX ? std::string("inf") : std::to_string(v); };
  o << "objective=" << to_string(c.objective) << "\n"
    << "beta=" << io::fmt(c.beta) << "\n"
    << "gamma=" << io::fmt(c.gamma) << "\n"
    << "k=" << c.k << "\n"
    << "t_meta=" << count(c.t_meta) << "\n"
    << "alpha=" << io::fmt(c.alpha) << "\n"
    << "eta=" << io::fmt(c.eta) << "\n"
    << "batch_size=" << c.batch_size << "\n"
    << "iterations=" << c.iterations << "\n"
    << "temperature=" << io::fmt(c.temperature) << "\n"
    << "seed_world=" << c.seeds.world << "\n"
    << "seed_data=" << c.seeds.data << "\n"
    << "seed_policy=" << c.seeds.policy << "\n"
    << "seed_meta=" << c.seeds.meta << "\n"
    << "seed_sampling=" << c.seeds.sampling << "\n"
    << "variant=" << to_string(c.variant) << "\n"
    << "weighting=" << (c.weighting == Weighting::Meta ? "meta" : "uniform") << "\n"
    << "reference_noise=" << io::fmt(c.reference_noise) << "\n"
    << "meta_hidden=" << c.meta_hidden << "\n"
    << "meta_depth=" << c.meta_depth << "\n"
    << "meta_input=" << (c.meta_input == MetaInput::Score ? "score" : "multi") << "\n"
    << "meta_init_scale=" << io::fmt(c.meta_init_scale) << "\n"
    << "meta_stale_scores=" << (c.meta_stale_scores ? "true" : "false") << "\n"
    << "include_unselected_offline=" << (c.include_unselected_offline ? "true" : "false") << "\n"
    << "shuffle=" << (c.shuffle ? "true" : "false") << "\n"
    << "heuristic_a=" << io::fmt(c.heuristic_a) << "\n"
    << "heuristic_b=" << io::fmt(c.heuristic_b) << "\n"
    << "workers=" << c.workers << "\n"
    << "audit=" << (c.audit ? "true" : "false") << "\n";
  return o.str();
}

// ---- meta-weighted policy loss ---------------------------------------------------------

/// Per-tuple w, evaluated at the current policy and then held constant.
/// Tuples without an online pair get w = 1.
inline std::vector<double> frozen_weights(std::span<const AugmentedTuple> batch,
                                          const ScoringContext& ctx,
                                          const Weighter& weighter) {
  std::vector<double> w(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& t = batch[i];
    w[i] = t.has_online ? weighter(ctx, t.offline, ctx.score(t.offline).value) : 1.0;
  }
  return w;
}

/// -mean[w * l(off) + (1 - w) * l(on)] with the given weights.
inline double policy_loss(std::span<const AugmentedTuple> batch,
                          const ScoringContext& ctx, std::span<const double> w) {
  if (batch.empty()) throw DomainError("policy_loss on an empty batch");
  double s = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& t = batch[i];
    s += w[i] * ctx.score(t.offline).value;
    if (t.has_online) s += (1.0 - w[i]) * ctx.score(t.online()).value;
  }
  return -s / static_cast<double>(batch.size());
}

inline double policy_loss(std::span<const AugmentedTuple> batch,
                          const ScoringContext& ctx, const Weighter& weighter) {
  const auto w = frozen_weights(batch, ctx, weighter);
  return policy_loss(batch, ctx, w);
}

/// Gradient over all policy logits with w treated as a constant.
inline PolicyGradient grad_policy_loss(std::span<const AugmentedTuple> batch,
                                       const ScoringContext& ctx,
                                       std::span<const double> w) {
  if (batch.empty()) throw DomainError("grad_policy_loss on an empty batch");
  PolicyGradient g = zero_gradient(ctx.policy);
  const double scale = -1.0 / static_cast<double>(batch.size());
  auto add = [&](const PreferencePair& pair, double coeff) {
    if (coeff == 0.0) return;
    const auto gs = grad_score(ctx.policy, ctx.reference, ctx.world, ctx.cfg, pair);
    auto& row = g[pair.prompt];
    for (std::size_t j = 0; j < gs.size(); ++j) row[j] += scale * coeff * gs[j];
  };
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& t = batch[i];
    add(t.offline, w[i]);
    if (t.has_online) add(t.online(), 1.0 - w[i]);
  }
  return g;
}

inline PolicyGradient grad_policy_loss(std::span<const AugmentedTuple> batch,
                                       const ScoringContext& ctx,
                                       const Weighter& weighter) {
  const auto w = frozen_weights(batch, ctx, weighter);
  return grad_policy_loss(batch, ctx, w);
}

inline void gradient_step(PolicyParams& policy, const PolicyGradient& g,
                          double alpha) {
  for (std::size_t p = 0; p < policy.logits.size(); ++p)
    for (std::size_t j = 0; j < policy.logits[p].size(); ++j)
      policy.logits[p][j] -= alpha * g[p][j];
}

// ---- the training loop ---------------------------------------------------------------

struct IterationMetrics {
  int iteration = 0;
  double mean_offline_score = 0.0;
  double mean_reward = 0.0;
  double reward_std = 0.0;
  double annotation_ratio = 0.0;
  double mean_meta_weight = 0.0;
  double policy_loss = 0.0;
};

inline const char* metrics_csv_header() {
  return "iteration,mean_offline_score,mean_reward,reward_std,annotation_ratio,"
         "mean_meta_weight,policy_loss\n";
}

inline std::string metrics_csv_row(const IterationMetrics& m) {
  return std::to_string(m.iteration) + "," + io::fmt(m.mean_offline_score) + "," +
         io::fmt(m.mean_reward) + "," + io::fmt(m.reward_std) + "," +
         io::fmt(m.annotation_ratio) + "," + io::fmt(m.mean_meta_weight) + "," +
         io::fmt(m.policy_loss) + "\n";
}

struct TrainState {
  PolicyParams policy;
  MetaLearnerParams meta;
  MetaBuffer buffer;
};

/// Bookkeeping that tests and the alternation checks rely on.
struct IterationTrace {
  SamplingResult sampling;
  std::size_t batches = 0;
  std::size_t tuples_trained = 0;
  std::size_t meta_updates = 0;
  std::size_t meta_tuples_consumed = 0;
  std::size_t meta_tuples_discarded = 0;  // left in the buffer at iteration end
  std::vector<std::string> warnings;
};

/// Called after each policy step (batch index is 1-based) and after each meta
/// update, with the live state. Used by the alternation-discipline checks.
struct TrainObserver {
  std::function<void(std::size_t batch, const TrainState&)> after_policy_step;
  std::function<void(std::size_t batch, const TrainState&)> after_meta_update;
};

inline Weighter sampling_weighter(const TrainConfig& cfg, const MetaLearnerParams& meta) {
  if (cfg.variant.kind == Variant::Kind::FixedHeuristic)
    return Weighter::heuristic(cfg.heuristic_a, cfg.heuristic_b);
  return Weighter::of(meta, cfg.meta_input);
}

inline Weighter loss_weighter(const TrainConfig& cfg, const MetaLearnerParams& meta) {
  if (cfg.weighting == Weighting::Uniform) return Weighter::fixed(0.5);
  return sampling_weighter(cfg, meta);
}

/// Every prompt of the world, used for the generation-reward metrics.
inline std::vector<int> all_prompts(const ToyWorld& world) {
  std::vector<int> v(world.num_prompts);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

/// One iteration: sample D_aug from the current policy, then one pass over
/// it in batches. Each batch takes a policy step with the network frozen,
/// is appended to the meta buffer, and every t_meta-th batch triggers a
/// meta update with the policy frozen. The buffer starts empty.
inline IterationMetrics run_iteration(TrainState& state,
                                      std::span<const OfflinePair> subset,
                                      std::size_t first_index,
                                      const ToyWorld& world,
                                      const ReferencePolicy& ref,
                                      const TrainConfig& cfg, int iteration,
                                      IterationTrace* trace = nullptr,
                                      const TrainObserver* observer = nullptr) {
  IterationTrace local;
  IterationTrace& tr = trace ? *trace : local;
  tr = IterationTrace{};

  tr.meta_tuples_discarded += state.buffer.size();
  state.buffer.drain();

  const ScoringConfig sc = cfg.scoring();
  const ScoringContext ctx{state.policy, ref, world, sc};

  SamplerConfig scfg;
  scfg.scoring = sc;
  scfg.k = cfg.k;
  scfg.temperature = cfg.temperature;
  scfg.variant = cfg.variant;
  scfg.include_unselected_offline = cfg.include_unselected_offline;
  scfg.shadow_generation = cfg.audit;
  scfg.workers = cfg.workers;
  scfg.seed = cfg.seeds.sampling;
  scfg.iteration = iteration;
  tr.sampling = build_augmented(subset, first_index, ctx,
                                sampling_weighter(cfg, state.meta), scfg);

  std::vector<AugmentedTuple> daug = tr.sampling.tuples;
  if (cfg.shuffle) {
    Rng rng(stream_seed(cfg.seeds.sampling, {static_cast<std::uint64_t>(iteration),
                                             0x5348554646ULL}));
    for (std::size_t i = daug.size(); i > 1; --i) std::swap(daug[i - 1], daug[rng.index(i)]);
  }

  const bool meta_trainable = cfg.variant.kind != Variant::Kind::FixedHeuristic;
  const MetaUpdateOptions mopt{cfg.meta_input, cfg.meta_stale_scores};
  double loss_sum = 0.0;
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  for (std::size_t begin = 0; begin < daug.size(); begin += bs) {
    const std::span<const AugmentedTuple> batch(daug.data() + begin,
                                                std::min(bs, daug.size() - begin));
    ++tr.batches;
    {
      const Weighter lw = loss_weighter(cfg, state.meta);
      const auto w = frozen_weights(batch, ctx, lw);
      loss_sum += policy_loss(batch, ctx, w);
      if (cfg.alpha != 0.0) gradient_step(state.policy, grad_policy_loss(batch, ctx, w), cfg.alpha);
    }
    tr.tuples_trained += batch.size();
    if (observer && observer->after_policy_step) observer->after_policy_step(tr.batches, state);

    state.buffer.append(batch);
    if (tr.batches % static_cast<std::size_t>(cfg.t_meta) == 0) {
      if (meta_trainable) {
        const auto res = meta_update(state.meta, state.buffer, ctx, cfg.eta, mopt);
        if (res.warning) tr.warnings.push_back(*res.warning);
        if (!res.skipped) ++tr.meta_updates;
        tr.meta_tuples_consumed += res.consumed;
      } else {
        tr.meta_tuples_consumed += state.buffer.drain().size();
      }
      if (observer && observer->after_meta_update) observer->after_meta_update(tr.batches, state);
    }
  }

  IterationMetrics m;
  m.iteration = iteration;
  m.mean_offline_score = tr.sampling.mean_l_off;
  m.mean_meta_weight = tr.sampling.mean_weight;
  m.annotation_ratio = tr.sampling.report.annotation_ratio();
  m.policy_loss = tr.batches ? loss_sum / static_cast<double>(tr.batches) : 0.0;
  const auto prompts = all_prompts(world);
  const RewardStats rs = expected_reward(state.policy, world, cfg.temperature, prompts);
  m.mean_reward = rs.mean;
  m.reward_std = rs.std;
  return m;
}

struct ExperimentResult {
  std::vector<IterationMetrics> metrics;
  std::vector<IterationTrace> traces;
  IterationMetrics initial;  // reward stats before any training (iteration 0)
  PolicyParams policy;
  MetaLearnerParams meta;
  double meta_init_scale = 0.0;  // after any InitError retries
  std::vector<std::string> events;
};

/// Reference = perturbed behavior policy; the policy starts at the reference.
inline ReferencePolicy reference_for(const ToyWorld& world,
                                     const OfflineDataset& dataset,
                                     const TrainConfig& cfg) {
  return make_reference(world, dataset.behavior_temperature, cfg.reference_noise,
                        cfg.seeds.policy);
}

/// Initialises the network, halving the scale on InitError (at most 20 times).
inline MetaLearnerParams init_meta_with_retry(const TrainConfig& cfg,
                                              double* used_scale,
                                              std::vector<std::string>* events) {
  double scale = cfg.meta_init_scale;
  for (int attempt = 0;; ++attempt) {
    try {
      auto p = init_meta(cfg.meta_hidden, scale, cfg.seeds.meta, cfg.meta_depth,
                         cfg.meta_input);
      if (used_scale) *used_scale = scale;
      return p;
    } catch (const InitError& e) {
      if (attempt >= 20) throw;
      if (events) events->push_back(std::string(e.what()) + "; retrying with scale " +
                                    io::fmt(scale / 2));
      scale /= 2;
    }
  }
}

/// Splits the dataset into `iterations` contiguous slices
/// [t*N/T, (t+1)*N/T) and runs one iteration per slice.
inline ExperimentResult run_experiment(
    const ToyWorld& world, const OfflineDataset& dataset, const TrainConfig& cfg,
    const std::function<void(const IterationMetrics&)>& on_iteration = {},
    const TrainObserver* observer = nullptr) {
  cfg.validate();
  world.validate();
  if (dataset.empty()) throw ConfigError("offline dataset is empty");
  for (const auto& p : dataset.pairs) {
    world.check(p.prompt, p.chosen);
    world.check(p.prompt, p.rejected);
  }

  ExperimentResult out;
  const ReferencePolicy ref = reference_for(world, dataset, cfg);
  TrainState state;
  state.policy = ref.params();
  state.meta = init_meta_with_retry(cfg, &out.meta_init_scale, &out.events);

  const auto prompts = all_prompts(world);
  const RewardStats rs0 = expected_reward(state.policy, world, cfg.temperature, prompts);
  out.initial.mean_reward = rs0.mean;
  out.initial.reward_std = rs0.std;

  const std::size_t n = dataset.size();
  const std::size_t iters = static_cast<std::size_t>(cfg.iterations);
  for (std::size_t t = 0; t < iters; ++t) {
    const std::size_t b = t * n / iters, e = (t + 1) * n / iters;
    const std::span<const OfflinePair> subset(dataset.pairs.data() + b, e - b);
    IterationTrace trace;
    const auto m = run_iteration(state, subset, b, world, ref, cfg,
                                 static_cast<int>(t + 1), &trace, observer);
    for (const auto& w : trace.warnings) out.events.push_back(w);
    out.metrics.push_back(m);
    out.traces.push_back(std::move(trace));
    if (on_iteration) on_iteration(m);
  }
  out.policy = state.policy;
  out.meta = state.meta;
  return out;
}

}  // namespace metaapo
