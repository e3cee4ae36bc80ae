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

// metaapo: gen-world | train | verify {fd, risk-gap, scatter}
//
// Exit codes: 0 ok, 1 a verification check failed, 2 usage/config/input error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "metaapo/metaapo.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace metaapo;

namespace {

constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;

struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_json(const fs::path& p, const json& j) { io::write_file(p, j.dump(2) + "\n"); }

// ---- gen-world -----------------------------------------------------------------------

struct GenWorldArgs {
  WorldConfig cfg;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> seed_data;
  std::string out;
};

int gen_world(const GenWorldArgs& a) {
  const auto& c = a.cfg;
  const std::uint64_t seed_data = a.seed_data.value_or(a.seed + 100);
  const ToyWorld world = build_world(c.prompts, c.responses, c.reward_scale, c.lengths, a.seed);
  const OfflineDataset ds = generate_offline_dataset(
      world, c.behavior_temperature, c.pairs_per_prompt, c.label_noise_rate, seed_data);

  const fs::path out(a.out);
  io::write_file(out / "world.json", world_to_json(world));
  io::write_file(out / "offline.jsonl", dataset_to_jsonl(ds));
  json m;
  m["tool"] = "metaapo";
  m["version"] = kVersion;
  m["command"] = "gen-world";
  m["config"] = {{"prompts", c.prompts},
                 {"responses", c.responses},
                 {"reward_scale", c.reward_scale},
                 {"len_min", c.lengths.low},
                 {"len_max", c.lengths.high},
                 {"pairs_per_prompt", c.pairs_per_prompt},
                 {"behavior_temperature", c.behavior_temperature},
                 {"label_noise_rate", c.label_noise_rate}};
  m["seeds"] = {{"world", a.seed}, {"data", seed_data}};
  m["artifacts"] = {"world.json", "offline.jsonl", "manifest.json"};
  write_json(out / "manifest.json", m);
  std::cout << "wrote " << (out / "world.json").string() << " (" << world.num_prompts << "x"
            << world.responses_per_prompt << "), " << ds.size() << " offline pairs\n";
  return 0;
}

// ---- train ---------------------------------------------------------------------------

struct TrainArgs {
  std::string world_dir, out, config_file;
  std::vector<std::pair<std::string, std::optional<std::string>>> values;
  std::vector<std::pair<std::string, bool>> flags;
};

int train(TrainArgs& a) {
  const fs::path wdir(a.world_dir), out(a.out);
  const json wman = json::parse(io::read_file(wdir / "manifest.json"));
  const ToyWorld world = world_from_json(io::read_file(wdir / "world.json"));
  const auto& wc = wman.at("config");
  const OfflineDataset ds = dataset_from_jsonl(io::read_file(wdir / "offline.jsonl"), world,
                                               wc.at("label_noise_rate").get<double>(),
                                               wc.at("behavior_temperature").get<double>());

  TrainConfig cfg;
  cfg.seeds.world = wman.at("seeds").at("world").get<std::uint64_t>();
  cfg.seeds.data = wman.at("seeds").at("data").get<std::uint64_t>();
  bool gamma_given = false;
  if (!a.config_file.empty()) {
    for (const auto& [k, v] : parse_key_values(io::read_file(a.config_file))) {
      apply_setting(cfg, k, v);
      gamma_given |= k == "gamma";
    }
  }
  for (const auto& [k, v] : a.values) {
    if (!v) continue;
    apply_setting(cfg, k, *v);
    gamma_given |= k == "gamma";
  }
  for (const auto& [k, on] : a.flags)
    if (on) apply_setting(cfg, k, "true");
  cfg.validate();
  if (cfg.objective == Objective::DPO && gamma_given)
    std::cerr << "warning: gamma is ignored under the dpo objective\n";

  const auto t0 = std::chrono::steady_clock::now();
  json man;
  man["tool"] = "metaapo";
  man["version"] = kVersion;
  man["command"] = "train";
  man["world_dir"] = fs::absolute(wdir).lexically_normal().string();
  man["config"] = config_to_text(cfg);
  man["seeds"] = {{"world", cfg.seeds.world},   {"data", cfg.seeds.data},
                  {"policy", cfg.seeds.policy}, {"meta", cfg.seeds.meta},
                  {"sampling", cfg.seeds.sampling}};
  json artifacts = {"config.txt", "metrics.csv", "policy.json", "meta.json", "manifest.json"};
  if (cfg.audit) {
    artifacts.push_back("audit.jsonl");
    for (int t = 1; t <= cfg.iterations; ++t)
      artifacts.push_back("daug_iter" + std::to_string(t) + ".jsonl");
  }
  man["artifacts"] = artifacts;
  man["status"] = "running";
  write_json(out / "manifest.json", man);
  io::write_file(out / "config.txt", config_to_text(cfg));

  std::ofstream csv(out / "metrics.csv", std::ios::binary);
  if (!csv) throw std::runtime_error("cannot open " + (out / "metrics.csv").string());
  csv << metrics_csv_header() << std::flush;
  const auto result = run_experiment(world, ds, cfg, [&](const IterationMetrics& m) {
    csv << metrics_csv_row(m) << std::flush;
    std::cout << "iter " << m.iteration << "  reward " << io::fmt(m.mean_reward) << "  std "
              << io::fmt(m.reward_std) << "  annotation " << io::fmt(m.annotation_ratio)
              << "\n";
  });
  csv.close();

  io::write_file(out / "policy.json", policy_to_json(result.policy));
  io::write_file(out / "meta.json", meta_to_json(result.meta));
  if (cfg.audit) {
    std::string audit;
    for (std::size_t t = 0; t < result.traces.size(); ++t) {
      const auto& s = result.traces[t].sampling;
      audit += audit_to_jsonl(s.audit);
      io::write_file(out / ("daug_iter" + std::to_string(t + 1) + ".jsonl"),
                     augmented_to_jsonl(s));
    }
    io::write_file(out / "audit.jsonl", audit);
  }

  json iters = json::array();
  for (const auto& tr : result.traces) {
    const auto& r = tr.sampling.report;
    iters.push_back({{"offline", r.offline_count},
                     {"selected", r.selected_count},
                     {"generated_responses", r.generated_responses},
                     {"degenerate", r.degenerate_count},
                     {"meta_updates", tr.meta_updates},
                     {"meta_tuples_consumed", tr.meta_tuples_consumed},
                     {"meta_tuples_discarded", tr.meta_tuples_discarded}});
  }
  man["iterations"] = iters;
  man["initial_mean_reward"] = result.initial.mean_reward;
  man["initial_reward_std"] = result.initial.reward_std;
  man["meta_init_scale_used"] = result.meta_init_scale;
  man["events"] = result.events;
  man["status"] = "complete";
  man["wall_clock_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_json(out / "manifest.json", man);
  for (const auto& e : result.events) std::cerr << "note: " << e << "\n";
  return 0;
}

// ---- verify --------------------------------------------------------------------------

struct FdArgs {
  std::string target = "all";
  int trials = 100;
  std::uint64_t seed = 0;
  bool negative_control = false;
  int workers = 1;
};

int verify_fd(const FdArgs& a) {
  std::vector<verify::FdTarget> targets;
  if (a.target == "all") targets.assign(std::begin(verify::kAllFdTargets),
                                        std::end(verify::kAllFdTargets));
  else targets.push_back(verify::parse_fd_target(a.target));

  bool ok = true;
  auto report = [&](const std::string& label, const verify::FdReport& r) {
    std::printf("%-32s trials %4d  max rel err %.3e  %s\n", label.c_str(), r.trials,
                r.max_rel_error, r.passed() ? "PASS" : "FAIL");
    if (!r.passed())
      std::printf("  worst: trial %d (%s)\n", r.worst_trial, r.worst_detail.c_str());
    ok &= r.passed();
  };
  for (auto t : targets) {
    verify::FdOptions o;
    o.trials = a.trials;
    o.seed = a.seed;
    o.workers = a.workers;
    o.corrupt_analytic = a.negative_control;
    report(verify::to_string(t) + (a.negative_control ? " [corrupted]" : ""),
           verify::fd_check(t, o));
    if (a.negative_control && t == verify::FdTarget::GradPolicyLoss) {
      o.corrupt_analytic = false;
      o.unfreeze_weights = true;
      report("grad_policy_loss [unfrozen w]", verify::fd_check(t, o));
    }
  }
  if (!ok) throw CheckFailure("finite-difference check failed");
  return 0;
}

struct RiskGapArgs {
  verify::RiskGapOptions opt;
  std::string sizes = "64,256,1024,4096";
  std::string out;
  double slope_low = -0.65, slope_high = -0.35;
};

int verify_risk_gap(RiskGapArgs& a) {
  a.opt.buffer_sizes.clear();
  std::stringstream ss(a.sizes);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    long long v = -1;
    try {
      v = std::stoll(item, &pos);
    } catch (const std::exception&) {
    }
    if (v < 1 || pos != item.size()) throw ConfigError("bad buffer size '" + item + "'");
    a.opt.buffer_sizes.push_back(static_cast<std::size_t>(v));
  }
  const auto s = verify::risk_gap_study(a.opt);
  if (!a.out.empty()) io::write_file(fs::path(a.out) / "risk_gap.csv", verify::risk_gap_csv(s));
  for (const auto& p : s.samples)
    std::printf("m %6zu  mean gap %.6f  std %.6f\n", p.buffer_size, p.mean_gap, p.std_gap);
  const bool slope_ok = s.slope >= a.slope_low && s.slope <= a.slope_high;
  const bool mono_ok = s.inversions <= 1;
  std::printf("max loss M %.4f\nslope %.4f (band [%g, %g]) %s\ninversions %d %s\n", s.max_loss,
              s.slope, a.slope_low, a.slope_high, slope_ok ? "PASS" : "FAIL", s.inversions,
              mono_ok ? "PASS" : "FAIL");
  if (!slope_ok || !mono_ok) throw CheckFailure("risk-gap study outside the declared band");
  return 0;
}

struct ScatterArgs {
  std::string run, out;
};

int verify_scatter(const ScatterArgs& a) {
  const fs::path audit = fs::path(a.run) / "audit.jsonl";
  if (!fs::exists(audit))
    throw DomainError("no audit dump at " + audit.string() + "; train with --audit-dump");
  const auto records = verify::audit_from_jsonl(io::read_file(audit));
  const auto pts = verify::scatter_points(records);
  const fs::path out = a.out.empty() ? fs::path(a.run) / "scatter.csv" : fs::path(a.out);
  io::write_file(out, verify::scatter_csv(pts));
  int last = 0;
  for (const auto& p : pts) last = std::max(last, p.iteration);
  for (int t = 1; t <= last; ++t) {
    const auto s = verify::summarize(pts, t);
    std::printf("iter %d  sampled %zu (mean l_off %.4f)  unsampled %zu (mean l_off %.4f)\n", t,
                s.sampled, s.mean_l_off_sampled, s.unsampled, s.mean_l_off_unsampled);
  }
  std::printf("wrote %s (%zu rows)\n", out.string().c_str(), pts.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metaapo toy simulator: synthetic worlds, training, verification"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  GenWorldArgs gw;
  auto* gen = app.add_subcommand("gen-world", "build a toy world and its offline dataset");
  gen->add_option("--prompts", gw.cfg.prompts, "number of prompts")->capture_default_str();
  gen->add_option("--responses", gw.cfg.responses, "responses per prompt (>= 2)")
      ->capture_default_str();
  gen->add_option("--reward-scale", gw.cfg.reward_scale)->capture_default_str();
  gen->add_option("--len-min", gw.cfg.lengths.low)->capture_default_str();
  gen->add_option("--len-max", gw.cfg.lengths.high)->capture_default_str();
  gen->add_option("--pairs-per-prompt", gw.cfg.pairs_per_prompt)->capture_default_str();
  gen->add_option("--behavior-temp", gw.cfg.behavior_temperature)->capture_default_str();
  gen->add_option("--label-noise", gw.cfg.label_noise_rate)->capture_default_str();
  gen->add_option("--seed", gw.seed, "world seed")->capture_default_str();
  gen->add_option("--seed-data", gw.seed_data, "dataset seed (default: seed + 100)");
  gen->add_option("--out", gw.out, "output directory")->required();

  TrainArgs tr;
  auto* trn = app.add_subcommand("train", "run the alternating training loop");
  trn->add_option("--world", tr.world_dir, "directory written by gen-world")->required();
  trn->add_option("--out", tr.out, "run directory")->required();
  trn->add_option("--config", tr.config_file, "key=value file; flags take precedence");
  const std::pair<const char*, const char*> value_opts[] = {
      {"--objective", "objective"},       {"--variant", "variant"},
      {"--weighting", "weighting"},       {"--t-meta", "t_meta"},
      {"--k", "k"},                       {"--beta", "beta"},
      {"--gamma", "gamma"},               {"--alpha", "alpha"},
      {"--eta", "eta"},                   {"--iters", "iterations"},
      {"--batch-size", "batch_size"},     {"--temperature", "temperature"},
      {"--reference-noise", "reference_noise"},
      {"--meta-hidden", "meta_hidden"},   {"--meta-depth", "meta_depth"},
      {"--meta-input", "meta_input"},     {"--meta-init-scale", "meta_init_scale"},
      {"--heuristic-a", "heuristic_a"},   {"--heuristic-b", "heuristic_b"},
      {"--seed-policy", "seed_policy"},   {"--seed-meta", "seed_meta"},
      {"--seed-sampling", "seed_sampling"}, {"--workers", "workers"}};
  tr.values.reserve(std::size(value_opts));
  for (const auto& [flag, key] : value_opts) {
    tr.values.emplace_back(key, std::nullopt);
    trn->add_option(flag, tr.values.back().second);
  }
  const std::pair<const char*, const char*> bool_opts[] = {
      {"--audit-dump", "audit"},
      {"--shuffle", "shuffle"},
      {"--meta-stale-scores", "meta_stale_scores"},
      {"--include-unselected-offline", "include_unselected_offline"}};
  tr.flags.reserve(std::size(bool_opts));
  for (const auto& [flag, key] : bool_opts) {
    tr.flags.emplace_back(key, false);
    trn->add_flag(flag, tr.flags.back().second);
  }

  auto* ver = app.add_subcommand("verify", "gradient oracles, risk-gap study and scatter export");
  ver->require_subcommand(1);
  FdArgs fd;
  auto* vfd = ver->add_subcommand("fd", "finite-difference gradient checks");
  vfd->add_option("--target", fd.target,
                  "all|grad_log_prob|grad_score_dpo|grad_score_simpo|grad_meta_loss|"
                  "grad_policy_loss")
      ->capture_default_str();
  vfd->add_option("--trials", fd.trials)->capture_default_str();
  vfd->add_option("--seed", fd.seed)->capture_default_str();
  vfd->add_flag("--negative-control", fd.negative_control,
                "corrupt the analytic gradients; the check must fail");
  vfd->add_option("--workers", fd.workers)->capture_default_str();

  RiskGapArgs rg;
  auto* vrg = ver->add_subcommand("risk-gap", "meta-risk gap versus buffer size");
  vrg->add_option("--sizes", rg.sizes, "comma-separated, strictly increasing")
      ->capture_default_str();
  vrg->add_option("--resamples", rg.opt.resamples)->capture_default_str();
  vrg->add_option("--candidates", rg.opt.candidate_count)->capture_default_str();
  vrg->add_option("--population", rg.opt.population_size)->capture_default_str();
  vrg->add_option("--hidden", rg.opt.candidate_hidden)->capture_default_str();
  vrg->add_option("--seed", rg.opt.seed)->capture_default_str();
  vrg->add_option("--workers", rg.opt.workers)->capture_default_str();
  vrg->add_option("--out", rg.out, "directory for risk_gap.csv");

  ScatterArgs sc;
  auto* vsc = ver->add_subcommand("scatter", "l_off vs online-offline gap from an audit dump");
  vsc->add_option("--run", sc.run, "train --audit-dump output directory")->required();
  vsc->add_option("--out", sc.out, "CSV path (default RUN/scatter.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*gen) return gen_world(gw);
    if (*trn) return train(tr);
    if (*vfd) return verify_fd(fd);
    if (*vrg) return verify_risk_gap(rg);
    if (*vsc) return verify_scatter(sc);
  } catch (const CheckFailure& e) {
    std::cerr << "check failed: " << e.what() << "\n";
    return kCheckFailed;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
