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

// Straight-line evaluation of the two-layer map, independent of the layer code.
double oracle_forward(const MetaLearnerParams& p, double x) {
  const auto& w1 = p.w1();
  const auto& b1 = p.b1();
  const auto& w2 = p.w2();
  double z = p.b2();
  for (std::size_t j = 0; j < w1.size(); ++j) z += w2[j] * std::tanh(w1[j] * x + b1[j]);
  return 1.0 / (1.0 + std::exp(-z));
}

MetaLearnerParams random_meta(std::uint64_t seed, int hidden, double scale = 1.0) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> n(0.0, scale);
  auto p = make_meta_shape(hidden);
  p.for_each([&](double& v) { v = n(gen); });
  return p;
}

std::vector<MetaSample> random_batch(std::uint64_t seed, int n, double shift) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(-4.0, -0.05);
  std::uniform_real_distribution<double> d(0.05, 1.0);
  std::vector<MetaSample> b;
  for (int i = 0; i < n; ++i) {
    const double off = u(gen);
    b.push_back(scalar_sample(off, shift == 0.0 ? off : off + shift * d(gen)));
  }
  return b;
}

std::vector<double> flat(const MetaLearnerParams& p) {
  std::vector<double> v;
  p.for_each([&](double x) { v.push_back(x); });
  return v;
}

}  // namespace

TEST(MetaForward, ZeroHeadGivesHalf) {
  auto p = random_meta(1, 10);
  auto& head = p.layers.back();
  std::fill(head.weight.begin(), head.weight.end(), 0.0);
  head.bias[0] = 0.0;
  for (double x : {-100.0, -3.0, 0.0, 7.0}) EXPECT_EQ(meta_forward(p, {x}).value, 0.5);
}

TEST(MetaForward, ConstantBias) {
  const auto p = support::constant_meta(4.0);
  for (double x : {-5.0, -0.1, 0.0})
    EXPECT_NEAR(meta_forward(p, PreferenceScore{x}).value, 0.9820138, 1e-7);
}

TEST(MetaForward, MatchesStraightLineOracle) {
  const auto p = random_meta(2, 100, 0.7);
  for (double x = -6.0; x <= 1.0; x += 0.25)
    EXPECT_NEAR(meta_forward(p, {x}).value, oracle_forward(p, x), 1e-14);
}

TEST(MetaForward, StrictlyInsideUnitInterval) {
  for (int s = 0; s < 50; ++s) {
    const auto p = random_meta(s, 8, 30.0);
    for (double x : {-1e6, -50.0, -1.0, 0.0, 1e6}) {
      const double h = meta_forward(p, {x}).value;
      EXPECT_GT(h, 0.0);
      EXPECT_LT(h, 1.0);
    }
  }
  EXPECT_LT(meta_forward(support::constant_meta(1000.0), {0.0}).value, 1.0);
  EXPECT_GT(meta_forward(support::constant_meta(-1000.0), {0.0}).value, 0.0);
}

TEST(MetaLoss, EqualScoresGiveMinusScore) {
  const auto p = random_meta(3, 16);
  std::vector<MetaSample> b(5, scalar_sample(-0.8, -0.8));
  EXPECT_NEAR(meta_loss(p, b), 0.8, 1e-15);
}

TEST(MetaLoss, ForcedHalfWeight) {
  const auto p = support::constant_meta(0.0);
  const std::vector<MetaSample> b{scalar_sample(-1.0, -0.2)};
  EXPECT_NEAR(meta_loss(p, b), 0.6, 1e-15);
}

TEST(MetaLoss, BruteForceBatch32) {
  const auto p = random_meta(4, 100, 0.5);
  const auto b = random_batch(5, 32, 0.7);
  double s = 0;
  for (const auto& m : b) {
    const double h = oracle_forward(p, m.l_off);
    s += h * m.l_off + (1 - h) * m.l_on;
  }
  EXPECT_NEAR(meta_loss(p, b), -s / 32, 1e-12);
}

TEST(MetaLoss, EmptyBatch) {
  const auto p = support::constant_meta(0.0);
  EXPECT_THROW(meta_loss(p, {}), DomainError);
  EXPECT_THROW(grad_meta_loss(p, {}), DomainError);
}

TEST(GradMetaLoss, ExactlyZeroWhenScoresAgree) {
  const auto p = random_meta(6, 100);
  const auto g = grad_meta_loss(p, random_batch(7, 20, 0.0));
  g.for_each([](double v) { EXPECT_EQ(v, 0.0); });
}

TEST(GradMetaLoss, FiniteDifferencesSeed11) {
  auto p = random_meta(11, 12, 0.8);
  const auto b = random_batch(11, 16, 0.9);
  const auto analytic = flat(grad_meta_loss(p, b));
  std::vector<double*> coords;
  p.for_each([&](double& v) { coords.push_back(&v); });
  std::vector<double> numeric(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const double s = *coords[i];
    *coords[i] = s + 1e-6;
    const double up = meta_loss(p, b);
    *coords[i] = s - 1e-6;
    const double dn = meta_loss(p, b);
    *coords[i] = s;
    numeric[i] = (up - dn) / 2e-6;
  }
  EXPECT_LT(support::max_rel(analytic, numeric), 1e-6);
}

TEST(GradMetaLoss, HundredRandomDraws) {
  verify::FdOptions o;
  o.trials = 100;
  EXPECT_LT(verify::fd_check(verify::FdTarget::GradMetaLoss, o).max_rel_error, 1e-6);
}

TEST(GradMetaLoss, SignBehaviour) {
  for (int t = 0; t < 20; ++t) {
    for (double sign : {1.0, -1.0}) {
      auto p = init_meta(100, 0.5, 100 + t);
      const auto b = random_batch(200 + t, 24, sign);
      const auto before = p;
      gradient_step(p, grad_meta_loss(p, b), 5e-3);
      for (const auto& m : b) {
        const double h0 = meta_forward(before, m.features).value;
        const double h1 = meta_forward(p, m.features).value;
        if (sign > 0) EXPECT_LT(h1, h0);
        else EXPECT_GT(h1, h0);
      }
    }
  }
}

TEST(MetaUpdate, DrainsAndSkips) {
  const auto world = support::make_world({{0.0, 1.0, 2.0}});
  const auto pol = support::make_policy({{0.2, 0.0, -0.3}});
  const ReferencePolicy ref(support::make_policy({{0.0, 0.0, 0.0}}));
  const ScoringContext ctx{pol, ref, world, {Objective::DPO, 1.0, 0.0}};
  std::vector<AugmentedTuple> ts(3, AugmentedTuple{0, {0, 0, 1}, 2, 0, true, 0, 0});
  ts.push_back(AugmentedTuple{0, {0, 1, 2}, -1, -1, false, 0, 0});

  MetaBuffer buf;
  buf.append(ts);
  EXPECT_EQ(buf.size(), 3u);  // the offline-only tuple is not buffered

  auto p = init_meta(100, 0.5, 1);
  const auto before = p;
  auto r = meta_update(p, buf, ctx, 0.0);
  EXPECT_EQ(p, before);
  EXPECT_TRUE(buf.empty());
  EXPECT_EQ(r.consumed, 3u);
  EXPECT_FALSE(r.skipped);

  buf.append(ts);
  r = meta_update(p, buf, ctx, 0.1);
  EXPECT_FALSE(r.skipped);
  r = meta_update(p, buf, ctx, 0.1);
  EXPECT_TRUE(r.skipped);
  EXPECT_TRUE(r.warning.has_value());
  EXPECT_EQ(r.consumed, 0u);
}

TEST(MetaUpdate, DominatingOnlinePairsLowerMeanWeight) {
  const auto world = build_world(4, 6, 1.0, {1, 4}, 3);
  const auto pol = support::random_policy(8, 4, 6);
  const ReferencePolicy ref(support::random_policy(9, 4, 6));
  const ScoringContext ctx{pol, ref, world, {Objective::DPO, 1.0, 0.0}};
  MetaBuffer buf;
  std::vector<AugmentedTuple> ts;
  for (int x = 0; x < 4; ++x)
    for (int a = 0; a < 6; ++a)
      for (int b = 0; b < 6; ++b) {
        if (a == b) continue;
        const PreferencePair off{x, a, b}, on{x, b, a};
        if (ctx.score(on).value > ctx.score(off).value)
          ts.push_back({x, off, on.chosen, on.rejected, true, 0, 0});
      }
  ASSERT_GT(ts.size(), 10u);
  buf.append(ts);
  auto p = init_meta(100, 0.5, 1);
  auto mean_w = [&](const MetaLearnerParams& q) {
    double s = 0;
    for (const auto& t : ts) s += meta_forward(q, {ctx.score(t.offline).value}).value;
    return s / ts.size();
  };
  const double before = mean_w(p);
  meta_update(p, buf, ctx, 5e-3);
  EXPECT_LT(mean_w(p), before);
}

TEST(MetaUpdate, StaleScoresUseCachedValues) {
  const auto world = support::make_world({{0.0, 1.0}});
  const auto pol = support::make_policy({{0.0, 0.0}});
  const ReferencePolicy ref(pol);
  const ScoringContext ctx{pol, ref, world, {Objective::DPO, 1.0, 0.0}};
  const std::vector<AugmentedTuple> ts{{0, {0, 0, 1}, 1, 0, true, -2.0, -0.5}};
  const auto fresh = meta_batch(ts, ctx, {MetaInput::Score, false});
  const auto stale = meta_batch(ts, ctx, {MetaInput::Score, true});
  EXPECT_NEAR(fresh[0].l_off, -std::log(2.0), 1e-15);
  EXPECT_EQ(stale[0].l_off, -2.0);
  EXPECT_EQ(stale[0].l_on, -0.5);
  const auto multi = meta_batch(ts, ctx, {MetaInput::Multi, false});
  EXPECT_EQ(multi[0].features.size(), 3u);
}

TEST(InitMeta, ZeroScaleIsHalf) {
  const auto p = init_meta(100, 0.0, 5);
  for (double x : {-5.0, -1.0, 0.0}) EXPECT_EQ(meta_forward(p, {x}).value, 0.5);
}

TEST(InitMeta, DeterministicAndBanded) {
  const auto a = init_meta(100, 0.5, 1), b = init_meta(100, 0.5, 1);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, init_meta(100, 0.5, 2));
  for (int i = 0; i <= 100; ++i) {
    const double h = meta_forward(a, {-5.0 + 0.05 * i}).value;
    EXPECT_GT(h, 0.3);
    EXPECT_LT(h, 0.7);
  }
  for (double b2 : a.layers.back().bias) EXPECT_EQ(b2, 0.0);
}

TEST(InitMeta, DeeperAndWiderShapes) {
  const auto p = init_meta(16, 0.5, 3, 5, MetaInput::Multi);
  EXPECT_EQ(p.depth(), 5);
  EXPECT_EQ(p.input_dim(), 3);
  EXPECT_EQ(p.num_params(), 3u * 16 + 16 + 3 * (16 * 16 + 16) + 16 + 1);
  EXPECT_THROW(init_meta(0, 0.5, 1), ConfigError);
  EXPECT_THROW(make_meta_shape(4, 1), ConfigError);
}

TEST(MetaCheckpoint, RoundTrip) {
  const auto p = random_meta(9, 7, 3.0);
  const auto text = meta_to_json(p);
  EXPECT_EQ(meta_from_json(text), p);
  EXPECT_EQ(meta_to_json(meta_from_json(text)), text);
  EXPECT_THROW(meta_from_json("{\"layers\": []}"), DomainError);
}
