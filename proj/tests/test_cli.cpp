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

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "metaapo/io.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("metaapo_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct Run {
  int code = -1;
  std::string out, err;
};

Run cli(const std::string& args) {
  const auto o = scratch() / "stdout.txt", e = scratch() / "stderr.txt";
  const std::string cmd = std::string(METAAPO_CLI_PATH) + " " + args + " >" + o.string() +
                          " 2>" + e.string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = metaapo::io::read_file(o);
  r.err = metaapo::io::read_file(e);
  return r;
}

std::string slurp(const fs::path& p) { return metaapo::io::read_file(p); }

std::string small_world(const std::string& name) {
  const auto dir = (scratch() / name).string();
  const auto r = cli("gen-world --prompts 40 --responses 8 --pairs-per-prompt 6 --seed 3 --out " + dir);
  EXPECT_EQ(r.code, 0) << r.err;
  return dir;
}

}  // namespace

TEST(Cli, GenWorldIsByteIdentical) {
  const auto a = (scratch() / "wa").string(), b = (scratch() / "wb").string();
  ASSERT_EQ(cli("gen-world --prompts 200 --responses 16 --seed 0 --out " + a).code, 0);
  ASSERT_EQ(cli("gen-world --prompts 200 --responses 16 --seed 0 --out " + b).code, 0);
  for (const char* f : {"world.json", "offline.jsonl", "manifest.json"}) {
    ASSERT_TRUE(fs::exists(fs::path(a) / f)) << f;
    EXPECT_EQ(slurp(fs::path(a) / f), slurp(fs::path(b) / f)) << f;
  }
}

TEST(Cli, GenWorldUsageErrors) {
  EXPECT_EQ(cli("gen-world --prompts 10").code, 2);
  const auto r = cli("gen-world --responses 1 --out " + (scratch() / "bad").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(">= 2"), std::string::npos) << r.err;
  EXPECT_EQ(cli("no-such-command").code, 2);
}

TEST(Cli, TrainIsDeterministic) {
  const auto w = small_world("w_det");
  const auto a = (scratch() / "ra").string(), b = (scratch() / "rb").string();
  ASSERT_EQ(cli("train --world " + w + " --out " + a + " --variant metaapo --iters 3 --seed-policy 0").code, 0);
  ASSERT_EQ(cli("train --world " + w + " --out " + b + " --variant metaapo --iters 3 --seed-policy 0 --workers 3").code, 0);
  for (const char* f : {"metrics.csv", "policy.json", "meta.json"})
    EXPECT_EQ(slurp(fs::path(a) / f), slurp(fs::path(b) / f)) << f;
  const auto csv = slurp(fs::path(a) / "metrics.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "iteration,mean_offline_score,mean_reward,reward_std,annotation_ratio,"
            "mean_meta_weight,policy_loss");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_NE(slurp(fs::path(a) / "manifest.json").find("\"complete\""), std::string::npos);
}

TEST(Cli, AllSamplingRatioIsOne) {
  const auto w = small_world("w_all");
  const auto out = scratch() / "r_all";
  ASSERT_EQ(cli("train --world " + w + " --out " + out.string() + " --variant all --weighting uniform").code, 0);
  std::istringstream in(slurp(out / "metrics.csv"));
  std::string line;
  std::getline(in, line);
  int rows = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
    ASSERT_EQ(cols.size(), 7u);
    EXPECT_EQ(cols[4], "1");
    ++rows;
  }
  EXPECT_EQ(rows, 3);
}

TEST(Cli, GammaHandling) {
  const auto w = small_world("w_gamma");
  auto r = cli("train --world " + w + " --out " + (scratch() / "r_simpo").string() +
               " --objective simpo --gamma 0.6 --beta 2.5 --iters 1");
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.err.find("gamma"), std::string::npos);
  r = cli("train --world " + w + " --out " + (scratch() / "r_dpo").string() + " --gamma 0.6 --iters 1");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.err.find("gamma is ignored"), std::string::npos);
}

TEST(Cli, ConfigFileAndFlagPrecedence) {
  const auto w = small_world("w_cfg");
  const auto cfg = scratch() / "run.cfg";
  metaapo::io::write_file(cfg, "# test\niterations=2\nbeta=1.5\n");
  const auto out = scratch() / "r_cfg";
  ASSERT_EQ(cli("train --world " + w + " --out " + out.string() + " --config " + cfg.string() +
                " --beta 3").code, 0);
  const auto snap = slurp(out / "config.txt");
  EXPECT_NE(snap.find("iterations=2\n"), std::string::npos);
  EXPECT_NE(snap.find("beta=3\n"), std::string::npos);
}

TEST(Cli, TrainUsageErrors) {
  const auto w = small_world("w_err");
  EXPECT_EQ(cli("train --world " + w + " --out " + (scratch() / "x").string() + " --variant best").code, 2);
  EXPECT_EQ(cli("train --world " + w + " --out " + (scratch() / "x").string() + " --t-meta 0").code, 2);
  EXPECT_EQ(cli("train --world " + (scratch() / "missing").string() + " --out " + (scratch() / "x").string()).code, 2);
  EXPECT_EQ(cli("train --out " + (scratch() / "x").string()).code, 2);
}

TEST(Cli, VerifyFd) {
  auto r = cli("verify fd --trials 100 --seed 0");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
  r = cli("verify fd --negative-control --trials 10");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.out.find("worst"), std::string::npos);
}

TEST(Cli, VerifyRiskGapSmall) {
  const auto out = scratch() / "rg";
  const auto r = cli("verify risk-gap --sizes 32,128,512 --population 20000 --candidates 8 "
                     "--hidden 16 --workers 2 --out " + out.string());
  EXPECT_EQ(r.code, 0) << r.out;
  const auto csv = slurp(out / "risk_gap.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "m,mean_gap,std_gap");
  EXPECT_EQ(cli("verify risk-gap --sizes 128,32").code, 2);
}

TEST(Cli, VerifyScatter) {
  const auto w = small_world("w_sc");
  const auto plain = scratch() / "r_plain", audit = scratch() / "r_audit";
  ASSERT_EQ(cli("train --world " + w + " --out " + plain.string()).code, 0);
  EXPECT_EQ(cli("verify scatter --run " + plain.string()).code, 2);
  ASSERT_EQ(cli("train --world " + w + " --out " + audit.string() + " --audit-dump").code, 0);
  for (int t = 1; t <= 3; ++t)
    EXPECT_TRUE(fs::exists(audit / ("daug_iter" + std::to_string(t) + ".jsonl")));
  // Audit mode must not change training outputs.
  EXPECT_EQ(slurp(plain / "metrics.csv"), slurp(audit / "metrics.csv"));
  ASSERT_EQ(cli("verify scatter --run " + audit.string()).code, 0);
  const auto csv = slurp(audit / "scatter.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "iteration,prompt,l_off,gap,sampled");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 40 * 6 + 1);
}
