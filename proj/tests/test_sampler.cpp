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

#include "test_support.hpp"

using namespace metaapo;

namespace {

struct Fixture {
  ToyWorld world = build_world(40, 8, 1.0, {1, 6}, 3);
  OfflineDataset ds = generate_offline_dataset(world, 2.0, 5, 0.3, 4);
  ReferencePolicy ref = make_reference(world, 2.0, 0.5, 5);
  PolicyParams policy = ref.params();
  MetaLearnerParams meta = init_meta(100, 0.5, 1);

  ScoringContext ctx() const { return {policy, ref, world, {Objective::DPO, 2.0, 0.6}}; }

  SamplerConfig cfg(Variant v = {}) const {
    SamplerConfig c;
    c.scoring = {Objective::DPO, 2.0, 0.6};
    c.k = 8;
    c.variant = v;
    c.seed = 17;
    c.iteration = 1;
    return c;
  }

  SamplingResult run(const MetaLearnerParams& m, SamplerConfig c) const {
    return build_augmented(ds.pairs, 0, ctx(), Weighter::of(m), c);
  }
};

}  // namespace

TEST(Decide, EffectivelyOneNeverSelects) {
  Rng rng(1);
  const double w = clamp_open_unit(1.0 - 1e-16);
  for (int i = 0; i < 100000; ++i) EXPECT_FALSE(decide({w}, rng).selected);
}

TEST(Decide, NearZeroAlwaysSelects) {
  Rng rng(2);
  for (int i = 0; i < 100000; ++i) EXPECT_TRUE(decide({1e-300}, rng).selected);
}

TEST(Decide, SelectionRateIsOneMinusW) {
  for (double w : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    Rng rng(static_cast<std::uint64_t>(w * 1000));
    int sel = 0;
    for (int i = 0; i < 100000; ++i) {
      const auto d = decide({w}, rng);
      EXPECT_EQ(d.selected, d.draw > w);
      sel += d.selected;
    }
    EXPECT_NEAR(sel / 100000.0, 1 - w, 3 * std::sqrt(w * (1 - w) / 100000));
  }
}

TEST(Annotate, ArgmaxArgmin) {
  const auto w = support::make_world({{0.2, 0.9, 0.5}});
  const std::vector<int> cand{0, 1, 2};
  const auto a = annotate(w, 0, cand);
  EXPECT_FALSE(a.degenerate);
  EXPECT_EQ(a.chosen_position, 1);
  EXPECT_EQ(a.rejected_position, 0);
}

TEST(Annotate, IdenticalCandidatesDegenerate) {
  const auto w = support::make_world({{0.2, 0.9, 0.5}});
  const std::vector<int> cand(8, 2);
  EXPECT_TRUE(annotate(w, 0, cand).degenerate);
  EXPECT_THROW(annotate(w, 0, std::vector<int>{}), DomainError);
}

TEST(Annotate, TiesGoToFirstPosition) {
  const auto w = support::make_world({{0.1, 0.9, 0.9, 0.1}});
  const std::vector<int> cand{0, 1, 3, 2, 0};
  const auto a = annotate(w, 0, cand);
  EXPECT_EQ(a.chosen_position, 1);
  EXPECT_EQ(a.chosen, 1);
  EXPECT_EQ(a.rejected_position, 0);
}

TEST(BuildAugmented, WeightOneSelectsNothing) {
  Fixture f;
  const auto r = f.run(support::constant_meta(100.0), f.cfg());
  EXPECT_TRUE(r.tuples.empty());
  EXPECT_EQ(r.report.selected_count, 0u);
  EXPECT_EQ(r.report.annotation_ratio(), 0.0);
}

TEST(BuildAugmented, WeightZeroSelectsEverything) {
  Fixture f;
  const auto r = f.run(support::constant_meta(-800.0), f.cfg());
  EXPECT_EQ(r.report.selected_count, f.ds.size());
  EXPECT_EQ(r.report.generated_responses, f.ds.size() * 8);
  EXPECT_EQ(r.tuples.size() + r.report.degenerate_count, f.ds.size());
}

TEST(BuildAugmented, DeterministicAndWorkerIndependent) {
  Fixture f;
  auto c = f.cfg();
  const auto a = f.run(f.meta, c);
  const auto b = f.run(f.meta, c);
  c.workers = 7;
  const auto p = f.run(f.meta, c);
  EXPECT_EQ(a.tuples, b.tuples);
  EXPECT_EQ(a.tuples, p.tuples);
  EXPECT_EQ(audit_to_jsonl(a.audit), audit_to_jsonl(p.audit));
  EXPECT_EQ(augmented_to_jsonl(a), augmented_to_jsonl(b));
  EXPECT_GT(a.tuples.size(), 0u);
  EXPECT_LT(a.tuples.size(), f.ds.size());
}

TEST(BuildAugmented, AccountingConservation) {
  Fixture f;
  const auto r = f.run(f.meta, f.cfg());
  EXPECT_EQ(r.report.offline_count, f.ds.size());
  EXPECT_EQ(r.tuples.size() + r.report.degenerate_count, r.report.selected_count);
  EXPECT_EQ(r.report.generated_responses, r.report.selected_count * 8);
  for (const auto& t : r.tuples) {
    EXPECT_TRUE(t.has_online);
    EXPECT_NE(t.online_chosen, t.online_rejected);
    EXPECT_GE(f.world.reward(t.prompt, t.online_chosen), f.world.reward(t.prompt, t.online_rejected));
  }
}

TEST(BuildAugmented, LoweringWeightsNeverDropsSelections) {
  Fixture f;
  auto lo = f.meta;
  lo.layers.back().bias[0] -= 0.7;
  const auto a = f.run(f.meta, f.cfg());
  const auto b = f.run(lo, f.cfg());
  std::size_t extra = 0;
  for (std::size_t i = 0; i < a.audit.size(); ++i) {
    EXPECT_EQ(a.audit[i].draw, b.audit[i].draw);
    if (a.audit[i].sampled) {
      EXPECT_TRUE(b.audit[i].sampled);
    }
    extra += b.audit[i].sampled && !a.audit[i].sampled;
  }
  EXPECT_GT(extra, 0u);
}

TEST(BuildAugmented, ShadowPassLeavesBudgetAlone) {
  Fixture f;
  auto c = f.cfg();
  const auto plain = f.run(f.meta, c);
  c.shadow_generation = true;
  const auto shadow = f.run(f.meta, c);
  EXPECT_EQ(plain.tuples, shadow.tuples);
  EXPECT_EQ(plain.report.selected_count, shadow.report.selected_count);
  EXPECT_EQ(plain.report.generated_responses, shadow.report.generated_responses);
  EXPECT_EQ(plain.report.degenerate_count, shadow.report.degenerate_count);
  for (const auto& a : shadow.audit) {
    EXPECT_GE(a.on_chosen, 0);
    EXPECT_EQ(a.shadow, !a.sampled);
  }
  for (const auto& a : plain.audit)
    if (!a.sampled) {
      EXPECT_EQ(a.on_chosen, -1);
    }
}

TEST(BuildAugmented, IncludeUnselectedOffline) {
  Fixture f;
  auto c = f.cfg();
  const auto base = f.run(f.meta, c);
  c.include_unselected_offline = true;
  const auto r = f.run(f.meta, c);
  const std::size_t unselected = f.ds.size() - base.report.selected_count;
  EXPECT_EQ(r.tuples.size(), base.tuples.size() + unselected);
  std::size_t offline_only = 0;
  for (const auto& t : r.tuples) offline_only += !t.has_online;
  EXPECT_EQ(offline_only, unselected);
}

TEST(Variants, RandomHalf) {
  const auto world = build_world(400, 4, 1.0, {1, 1}, 0);
  const auto ds = generate_offline_dataset(world, 1.0, 160, 0.0, 1);
  ASSERT_EQ(ds.size(), 64000u);
  const ReferencePolicy ref = make_reference(world, 1.0, 0.0, 0);
  const ScoringContext ctx{ref.params(), ref, world, {Objective::DPO, 1.0, 0.0}};
  SamplerConfig c;
  c.k = 2;
  const auto meta = init_meta(4, 0.5, 1);
  const auto r = build_variant(ds.pairs, 0, ctx, Weighter::of(meta), c, Variant::random(0.5));
  EXPECT_NEAR(r.report.annotation_ratio(), 0.5, 3 * std::sqrt(0.25 / 64000));
}

TEST(Variants, AllAndThresholds) {
  Fixture f;
  const auto all = build_variant(f.ds.pairs, 0, f.ctx(), Weighter::of(f.meta), f.cfg(), Variant::all());
  EXPECT_EQ(all.report.annotation_ratio(), 1.0);
  const auto none = build_variant(f.ds.pairs, 0, f.ctx(), Weighter::of(f.meta), f.cfg(),
                                  Variant::threshold(-std::numeric_limits<double>::infinity()));
  EXPECT_EQ(none.report.selected_count, 0u);
  const auto some = build_variant(f.ds.pairs, 0, f.ctx(), Weighter::of(f.meta), f.cfg(),
                                  Variant::threshold(-0.69));
  for (const auto& a : some.audit) EXPECT_EQ(a.sampled, a.l_off < -0.69);
}

TEST(Variants, FixedHeuristicWeight) {
  Fixture f;
  const auto h = Weighter::heuristic(1.0, 0.0);
  const auto r = build_variant(f.ds.pairs, 0, f.ctx(), h, f.cfg(), Variant::fixed_heuristic());
  for (const auto& a : r.audit) EXPECT_NEAR(a.weight, sigmoid(a.l_off), 1e-15);
}

TEST(Variants, ParseAndPrint) {
  EXPECT_EQ(parse_variant("metaapo").kind, Variant::Kind::MetaAPO);
  EXPECT_EQ(parse_variant("random:0.5").param, 0.5);
  EXPECT_EQ(parse_variant("threshold:-0.69").param, -0.69);
  EXPECT_TRUE(std::isinf(parse_variant("threshold:-inf").param));
  EXPECT_EQ(parse_variant("all").kind, Variant::Kind::All);
  EXPECT_EQ(parse_variant("fixed-heuristic").kind, Variant::Kind::FixedHeuristic);
  for (const char* s : {"metaapo", "random:0.25", "threshold:-0.5", "all", "fixed-heuristic"})
    EXPECT_EQ(to_string(parse_variant(s)), s);
  EXPECT_THROW(parse_variant("bogus"), ConfigError);
  EXPECT_THROW(parse_variant("random:x"), ConfigError);
  EXPECT_THROW(parse_variant("random:1.5").validate(), ConfigError);
}

TEST(BuildAugmented, RejectsBadConfig) {
  Fixture f;
  auto c = f.cfg();
  c.k = 1;
  EXPECT_THROW(f.run(f.meta, c), ConfigError);
}
