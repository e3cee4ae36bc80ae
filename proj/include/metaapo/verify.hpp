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
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "metaapo/error.hpp"
#include "metaapo/io.hpp"
#include "metaapo/meta.hpp"
#include "metaapo/policy.hpp"
#include "metaapo/rng.hpp"
#include "metaapo/sampler.hpp"
#include "metaapo/scoring.hpp"
#include "metaapo/trainer.hpp"
#include "metaapo/world.hpp"

namespace metaapo::verify {

// ---- finite-difference gradient checks ----------------------------------------------

enum class FdTarget { GradLogProb, GradScoreDpo, GradScoreSimpo, GradMetaLoss, GradPolicyLoss };

inline constexpr FdTarget kAllFdTargets[] = {
    FdTarget::GradLogProb, FdTarget::GradScoreDpo, FdTarget::GradScoreSimpo,
    FdTarget::GradMetaLoss, FdTarget::GradPolicyLoss};

inline std::string to_string(FdTarget t) {
  switch (t) {
    case FdTarget::GradLogProb: return "grad_log_prob";
    case FdTarget::GradScoreDpo: return "grad_score_dpo";
    case FdTarget::GradScoreSimpo: return "grad_score_simpo";
    case FdTarget::GradMetaLoss: return "grad_meta_loss";
    case FdTarget::GradPolicyLoss: return "grad_policy_loss";
  }
  return "?";
}

inline FdTarget parse_fd_target(const std::string& s) {
  for (FdTarget t : kAllFdTargets)
    if (to_string(t) == s) return t;
  throw ConfigError("unknown fd target '" + s + "'");
}

struct FdOptions {
  int trials = 100;
  std::uint64_t seed = 0;
  int responses = 5;              // response-set size of the random worlds
  double step = 1e-6;             // central-difference half width
  double tolerance = 1e-6;
  bool corrupt_analytic = false;  // negative control: +1e-3 on one component
  bool unfreeze_weights = false;  // negative control for the policy loss
  int workers = 1;
};

struct FdReport {
  FdTarget target = FdTarget::GradLogProb;
  int trials = 0;
  double max_rel_error = 0.0;
  int worst_trial = -1;
  std::string worst_detail;
  double tolerance = 1e-6;

  bool passed() const { return max_rel_error < tolerance; }
};

/// max_j |a_j - n_j| / max(max|a|, max|n|, 1e-12) over one gradient vector.
inline double relative_error(std::span<const double> analytic,
                             std::span<const double> numeric) {
  double diff = 0.0, sa = 0.0, sn = 0.0;
  for (std::size_t j = 0; j < analytic.size(); ++j) {
    diff = std::max(diff, std::abs(analytic[j] - numeric[j]));
    sa = std::max(sa, std::abs(analytic[j]));
    sn = std::max(sn, std::abs(numeric[j]));
  }
  return diff / std::max({sa, sn, 1e-12});
}

/// Central differences of f over the coordinates exposed by `coords`.
inline std::vector<double> central_differences(std::vector<double*> coords,
                                               const std::function<double()>& f,
                                               double h) {
  std::vector<double> g(coords.size());
  for (std::size_t j = 0; j < coords.size(); ++j) {
    double& x = *coords[j];
    const double saved = x;
    x = saved + h;
    const double up = f();
    x = saved - h;
    const double down = f();
    x = saved;
    g[j] = (up - down) / (2.0 * h);
  }
  return g;
}

namespace detail {

inline ToyWorld random_world(Rng& rng, int prompts, int responses) {
  ToyWorld w;
  w.num_prompts = prompts;
  w.responses_per_prompt = responses;
  w.true_reward.assign(prompts, std::vector<double>(responses));
  w.response_length.assign(prompts, std::vector<int>(responses));
  for (auto& row : w.true_reward)
    for (double& r : row) r = rng.normal();
  for (auto& row : w.response_length)
    for (int& l : row) l = 1 + static_cast<int>(rng.index(12));
  return w;
}

inline PolicyParams random_policy(Rng& rng, int prompts, int responses, double scale) {
  PolicyParams p;
  p.logits.assign(prompts, std::vector<double>(responses));
  for (auto& row : p.logits)
    for (double& v : row) v = scale * rng.normal();
  return p;
}

inline PreferencePair random_pair(Rng& rng, int prompt, int responses) {
  const int a = static_cast<int>(rng.index(responses));
  int b = static_cast<int>(rng.index(responses - 1));
  if (b >= a) ++b;
  return {prompt, a, b};
}

inline MetaLearnerParams random_meta(Rng& rng, int hidden, int depth, int input_dim,
                                     double scale) {
  MetaLearnerParams p = make_meta_shape(hidden, depth, input_dim);
  for (auto& layer : p.layers) {
    const double std = scale / std::sqrt(static_cast<double>(layer.in));
    for (double& v : layer.weight) v = std * rng.normal();
    for (double& v : layer.bias) v = 0.3 * rng.normal();
  }
  return p;
}

inline std::vector<double*> coords_of(PolicyParams& p, int prompt) {
  std::vector<double*> c;
  for (double& v : p.logits[prompt]) c.push_back(&v);
  return c;
}

inline std::vector<double*> coords_of(PolicyParams& p) {
  std::vector<double*> c;
  for (auto& row : p.logits)
    for (double& v : row) c.push_back(&v);
  return c;
}

inline std::vector<double> flatten(const MetaLearnerParams& p) {
  std::vector<double> v;
  p.for_each([&](double x) { v.push_back(x); });
  return v;
}

inline std::vector<double> flatten(const PolicyGradient& g) {
  std::vector<double> v;
  for (const auto& row : g) v.insert(v.end(), row.begin(), row.end());
  return v;
}

}  // namespace detail

/// Runs `opt.trials` random instances of one analytic gradient against
/// central differences and reports the worst relative error.
inline FdReport fd_check(FdTarget target, const FdOptions& opt) {
  if (opt.trials < 1) throw ConfigError("fd_check needs trials >= 1");
  if (opt.responses < 2)
    throw ConfigError("fd_check needs at least 2 responses per prompt (no pair exists otherwise)");
  FdReport rep;
  rep.target = target;
  rep.trials = opt.trials;
  rep.tolerance = opt.tolerance;
  const int V = opt.responses;

  struct Outcome {
    double err = 0.0;
    std::string detail;
  };
  std::vector<Outcome> outcomes(opt.trials);
  auto run = [&](int trial) {
    Rng rng(stream_seed(opt.seed, {static_cast<std::uint64_t>(target),
                                   static_cast<std::uint64_t>(trial)}));
    std::vector<double> analytic, numeric;
    std::ostringstream detail;

    switch (target) {
      case FdTarget::GradLogProb: {
        PolicyParams pol = detail::random_policy(rng, 1, V, 1.5);
        const int y = static_cast<int>(rng.index(V));
        analytic = grad_log_prob(pol, 0, y);
        numeric = central_differences(detail::coords_of(pol, 0),
                                      [&] { return log_prob(pol, 0, y); }, opt.step);
        detail << "response " << y;
        break;
      }
      case FdTarget::GradScoreDpo:
      case FdTarget::GradScoreSimpo: {
        const bool dpo = target == FdTarget::GradScoreDpo;
        const ToyWorld world = detail::random_world(rng, 1, V);
        PolicyParams pol = detail::random_policy(rng, 1, V, 1.5);
        const ReferencePolicy ref(detail::random_policy(rng, 1, V, 1.5));
        ScoringConfig cfg{dpo ? Objective::DPO : Objective::SimPO,
                          0.1 + 2.9 * rng.uniform01(), rng.uniform01()};
        const PreferencePair pair = detail::random_pair(rng, 0, V);
        analytic = grad_score(pol, ref, world, cfg, pair);
        const ScoringContext ctx{pol, ref, world, cfg};
        numeric = central_differences(detail::coords_of(pol, 0),
                                      [&] { return ctx.score(pair).value; }, opt.step);
        detail << "beta " << io::fmt(cfg.beta) << ", pair (" << pair.chosen << ","
               << pair.rejected << ")";
        break;
      }
      case FdTarget::GradMetaLoss: {
        const int depth = (trial % 5 == 4) ? 3 : 2;
        const int in = (trial % 7 == 6) ? 3 : 1;
        // Width 100 only for the shallow shape; a square 100x100 layer makes each
        // trial cost seconds.
        const int hidden =
            (trial % 3 == 0 && depth == 2) ? 100 : 1 + static_cast<int>(rng.index(16));
        MetaLearnerParams p = detail::random_meta(rng, hidden, depth, in, 1.0);
        std::vector<MetaSample> batch(1 + rng.index(32));
        for (auto& m : batch) {
          m.l_off = log_sigmoid(3.0 * rng.normal());
          m.l_on = log_sigmoid(3.0 * rng.normal());
          m.features = {m.l_off};
          for (int f = 1; f < in; ++f) m.features.push_back(rng.normal());
        }
        analytic = detail::flatten(grad_meta_loss(p, batch));
        std::vector<double*> coords;
        p.for_each([&](double& v) { coords.push_back(&v); });
        numeric = central_differences(coords, [&] { return meta_loss(p, batch); }, opt.step);
        detail << "hidden " << hidden << ", depth " << depth << ", input " << in
               << ", batch " << batch.size();
        break;
      }
      case FdTarget::GradPolicyLoss: {
        const int prompts = 3;
        const ToyWorld world = detail::random_world(rng, prompts, V);
        PolicyParams pol = detail::random_policy(rng, prompts, V, 1.5);
        const ReferencePolicy ref(detail::random_policy(rng, prompts, V, 1.5));
        const bool dpo = rng.uniform01() < 0.5;
        ScoringConfig cfg{dpo ? Objective::DPO : Objective::SimPO,
                          0.1 + 2.9 * rng.uniform01(), rng.uniform01()};
        const MetaLearnerParams meta = detail::random_meta(rng, 8, 2, 1, 3.0);
        std::vector<AugmentedTuple> batch(1 + rng.index(16));
        for (auto& t : batch) {
          t.prompt = static_cast<int>(rng.index(prompts));
          t.offline = detail::random_pair(rng, t.prompt, V);
          const auto on = detail::random_pair(rng, t.prompt, V);
          t.online_chosen = on.chosen;
          t.online_rejected = on.rejected;
          t.has_online = rng.uniform01() < 0.9;
        }
        const Weighter weighter = Weighter::of(meta);
        const ScoringContext ctx{pol, ref, world, cfg};
        const auto frozen = frozen_weights(batch, ctx, weighter);
        analytic = detail::flatten(grad_policy_loss(batch, ctx, frozen));
        auto f = opt.unfreeze_weights
                     ? std::function<double()>([&] { return policy_loss(batch, ctx, weighter); })
                     : std::function<double()>([&] { return policy_loss(batch, ctx, frozen); });
        numeric = central_differences(detail::coords_of(pol), f, opt.step);
        detail << to_string(cfg.objective) << ", beta " << io::fmt(cfg.beta) << ", batch "
               << batch.size();
        break;
      }
    }

    if (opt.corrupt_analytic) analytic[trial % analytic.size()] += 1e-3;
    outcomes[trial] = {relative_error(analytic, numeric), detail.str()};
  };

  const int workers = std::max(1, std::min(opt.workers, opt.trials));
  {
    std::vector<std::jthread> pool;
    for (int t = 0; t < workers; ++t)
      pool.emplace_back([&, t] {
        for (int trial = t; trial < opt.trials; trial += workers) run(trial);
      });
  }
  for (int trial = 0; trial < opt.trials; ++trial) {
    if (outcomes[trial].err > rep.max_rel_error || rep.worst_trial < 0) {
      rep.max_rel_error = outcomes[trial].err;
      rep.worst_trial = trial;
      rep.worst_detail = outcomes[trial].detail;
    }
  }
  return rep;
}

// ---- meta-risk generalisation gap ----------------------------------------------------

struct RiskGapSample {
  std::size_t buffer_size = 0;  // m
  double mean_gap = 0.0;        // mean over resamples of sup_h |R(h) - R_m(h)|
  double std_gap = 0.0;
};

struct RiskGapOptions {
  std::vector<std::size_t> buffer_sizes{64, 256, 1024, 4096};
  int resamples = 200;
  int candidate_count = 20;
  std::size_t population_size = 100000;
  int candidate_hidden = 100;
  std::uint64_t seed = 0;
  int workers = 1;
};

struct RiskGapStudy {
  std::vector<RiskGapSample> samples;
  double slope = 0.0;      // least-squares slope of log(mean_gap) vs log(m)
  double max_loss = 0.0;   // M: largest per-item meta loss seen
  int inversions = 0;      // times mean_gap increased with m
};

/// Synthetic (l_off, l_on) population: l = log sigma(z) with correlated
/// Gaussian margins, the online margin shifted up by 0.5 on average.
inline std::vector<MetaSample> risk_population(std::size_t n, std::uint64_t seed) {
  Rng rng(stream_seed(seed, {0x706f70ULL}));
  std::vector<MetaSample> pop(n);
  for (auto& s : pop) {
    const double z_off = 1.5 * rng.normal();
    const double z_on = z_off + 0.5 + rng.normal();
    s.l_off = log_sigmoid(z_off);
    s.l_on = log_sigmoid(z_on);
    s.features = {s.l_off};
  }
  return pop;
}

/// Random meta-learners forming the finite hypothesis set.
inline std::vector<MetaLearnerParams> risk_candidates(int count, int hidden,
                                                      std::uint64_t seed) {
  Rng rng(stream_seed(seed, {0x63616eULL}));
  std::vector<MetaLearnerParams> out;
  for (int c = 0; c < count; ++c) out.push_back(detail::random_meta(rng, hidden, 2, 1, 2.0));
  return out;
}

inline double loglog_slope(std::span<const RiskGapSample> s) {
  const double n = static_cast<double>(s.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& p : s) {
    const double x = std::log(static_cast<double>(p.buffer_size));
    const double y = std::log(p.mean_gap);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

/// True risk is the mean meta loss over the whole population; each resample
/// draws m items without replacement. Sums always run in ascending
/// population index, so a full draw reproduces the true risk bit for bit.
inline RiskGapStudy risk_gap_study(const RiskGapOptions& opt,
                                   std::span<const MetaSample> population,
                                   std::span<const MetaLearnerParams> candidates) {
  if (opt.buffer_sizes.empty()) throw ConfigError("risk-gap needs at least one buffer size");
  for (std::size_t i = 0; i < opt.buffer_sizes.size(); ++i) {
    if (opt.buffer_sizes[i] < 1) throw ConfigError("buffer sizes must be >= 1");
    if (i && opt.buffer_sizes[i] <= opt.buffer_sizes[i - 1])
      throw ConfigError("buffer sizes must be strictly increasing");
  }
  if (opt.buffer_sizes.back() > population.size())
    throw ConfigError("population smaller than the largest buffer");
  if (candidates.empty()) throw ConfigError("risk-gap needs at least one candidate");
  if (opt.resamples < 1) throw ConfigError("risk-gap needs resamples >= 1");

  const std::size_t N = population.size();
  const std::size_t C = candidates.size();
  std::vector<std::vector<double>> loss(C, std::vector<double>(N));
  std::vector<double> true_risk(C, 0.0);
  RiskGapStudy study;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < N; ++i) {
      const auto& s = population[i];
      const double h = meta_forward(candidates[c], s.features).value;
      loss[c][i] = -(h * s.l_off + (1.0 - h) * s.l_on);
      study.max_loss = std::max(study.max_loss, loss[c][i]);
      true_risk[c] += loss[c][i];
    }
    true_risk[c] /= static_cast<double>(N);
  }

  const int workers = std::max(1, std::min(opt.workers, opt.resamples));
  for (std::size_t mi = 0; mi < opt.buffer_sizes.size(); ++mi) {
    const std::size_t m = opt.buffer_sizes[mi];
    std::vector<double> gaps(opt.resamples);
    // Resample r owns stream (seed, m, r). The partial shuffle is undone
    // after each draw so every trial starts from the identity permutation.
    auto work = [&](int rb, int re) {
      std::vector<std::size_t> perm(N), pick(m), swaps(m);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      for (int r = rb; r < re; ++r) {
        Rng rng(stream_seed(opt.seed, {0x676170ULL, m, static_cast<std::uint64_t>(r)}));
        for (std::size_t i = 0; i < m; ++i) {
          swaps[i] = i + rng.index(N - i);
          std::swap(perm[i], perm[swaps[i]]);
          pick[i] = perm[i];
        }
        for (std::size_t i = m; i-- > 0;) std::swap(perm[i], perm[swaps[i]]);
        std::sort(pick.begin(), pick.end());
        double sup = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          double sum = 0.0;
          for (std::size_t i : pick) sum += loss[c][i];
          sup = std::max(sup, std::abs(true_risk[c] - sum / static_cast<double>(m)));
        }
        gaps[r] = sup;
      }
    };
    if (workers == 1) {
      work(0, opt.resamples);
    } else {
      std::vector<std::jthread> pool;
      const int chunk = (opt.resamples + workers - 1) / workers;
      for (int t = 0; t < workers; ++t) {
        const int b = t * chunk, e = std::min(opt.resamples, b + chunk);
        if (b < e) pool.emplace_back(work, b, e);
      }
    }
    RiskGapSample smp;
    smp.buffer_size = m;
    for (double g : gaps) smp.mean_gap += g;
    smp.mean_gap /= opt.resamples;
    for (double g : gaps) smp.std_gap += (g - smp.mean_gap) * (g - smp.mean_gap);
    smp.std_gap = std::sqrt(smp.std_gap / opt.resamples);
    study.samples.push_back(smp);
  }
  for (std::size_t i = 1; i < study.samples.size(); ++i)
    if (study.samples[i].mean_gap > study.samples[i - 1].mean_gap) ++study.inversions;
  if (study.samples.size() >= 2 &&
      std::all_of(study.samples.begin(), study.samples.end(),
                  [](const RiskGapSample& s) { return s.mean_gap > 0.0; }))
    study.slope = loglog_slope(study.samples);
  return study;
}

inline RiskGapStudy risk_gap_study(const RiskGapOptions& opt) {
  if (opt.population_size < 1) throw ConfigError("population_size must be >= 1");
  const auto pop = risk_population(opt.population_size, opt.seed);
  const auto cands = risk_candidates(opt.candidate_count, opt.candidate_hidden, opt.seed);
  return risk_gap_study(opt, pop, cands);
}

inline std::string risk_gap_csv(const RiskGapStudy& s) {
  std::string out = "m,mean_gap,std_gap\n";
  for (const auto& p : s.samples)
    out += std::to_string(p.buffer_size) + "," + io::fmt(p.mean_gap) + "," +
           io::fmt(p.std_gap) + "\n";
  return out;
}

// ---- sampling scatter ----------------------------------------------------------------

struct ScatterPoint {
  int iteration = 0;
  int prompt = 0;
  double l_off = 0.0;
  double gap = 0.0;  // l_on - l_off
  bool sampled = false;
};

inline std::vector<AuditRecord> audit_from_jsonl(const std::string& text) {
  std::vector<AuditRecord> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line);
    AuditRecord a;
    a.iteration = j.at("iteration").get<int>();
    a.offline_index = j.at("offline_index").get<std::size_t>();
    a.prompt = j.at("prompt").get<int>();
    a.off_chosen = j.at("off_chosen").get<int>();
    a.off_rejected = j.at("off_rejected").get<int>();
    a.on_chosen = j.at("on_chosen").get<int>();
    a.on_rejected = j.at("on_rejected").get<int>();
    a.weight = j.at("weight").get<double>();
    a.draw = j.at("draw").get<double>();
    a.sampled = j.at("sampled").get<bool>();
    a.degenerate = j.at("degenerate").get<bool>();
    a.shadow = j.at("shadow").get<bool>();
    a.l_off = j.at("l_off").get<double>();
    a.l_on = j.at("l_on").get<double>();
    out.push_back(a);
  }
  return out;
}

/// One point per audited offline pair. Every record must carry an online
/// pair, which only holds for runs made with shadow generation enabled.
inline std::vector<ScatterPoint> scatter_points(std::span<const AuditRecord> audit) {
  if (audit.empty()) throw DomainError("audit dump is empty or absent");
  std::vector<ScatterPoint> out;
  out.reserve(audit.size());
  for (const auto& a : audit) {
    if (a.on_chosen < 0)
      throw DomainError("audit record without an online pair; rerun training with the audit dump enabled");
    out.push_back({a.iteration, a.prompt, a.l_off, a.l_on - a.l_off, a.sampled});
  }
  return out;
}

inline std::string scatter_csv(std::span<const ScatterPoint> pts) {
  std::string out = "iteration,prompt,l_off,gap,sampled\n";
  for (const auto& p : pts)
    out += std::to_string(p.iteration) + "," + std::to_string(p.prompt) + "," +
           io::fmt(p.l_off) + "," + io::fmt(p.gap) + "," + (p.sampled ? "1" : "0") + "\n";
  return out;
}

struct ScatterSummary {
  double mean_l_off_sampled = 0.0;
  double mean_l_off_unsampled = 0.0;
  std::size_t sampled = 0;
  std::size_t unsampled = 0;
};

inline ScatterSummary summarize(std::span<const ScatterPoint> pts, int iteration) {
  ScatterSummary s;
  for (const auto& p : pts) {
    if (p.iteration != iteration) continue;
    if (p.sampled) {
      s.mean_l_off_sampled += p.l_off;
      ++s.sampled;
    } else {
      s.mean_l_off_unsampled += p.l_off;
      ++s.unsampled;
    }
  }
  if (s.sampled) s.mean_l_off_sampled /= static_cast<double>(s.sampled);
  if (s.unsampled) s.mean_l_off_unsampled /= static_cast<double>(s.unsampled);
  return s;
}

}  // namespace metaapo::verify
