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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "metaapo/error.hpp"
#include "metaapo/io.hpp"
#include "metaapo/rng.hpp"
#include "metaapo/scoring.hpp"

namespace metaapo {

// ---- parameters --------------------------------------------------------------

/// Fully connected layer, weight stored row-major as [out][in].
struct DenseLayer {
  int in = 0;
  int out = 0;
  std::vector<double> weight;
  std::vector<double> bias;

  double& w(int o, int i) { return weight[static_cast<std::size_t>(o) * in + i]; }
  double w(int o, int i) const { return weight[static_cast<std::size_t>(o) * in + i]; }

  bool operator==(const DenseLayer&) const = default;
};

/// Weighting network h_phi: tanh hidden layers, scalar sigmoid head.
///
/// The default (depth 2, input_dim 1) is the two-layer shape
///   w = sigmoid(w2 . tanh(w1 * l + b1) + b2)
/// with w1, b1, w2 of length H and scalar b2. Deeper nets repeat the
/// H-wide tanh layer; input_dim 3 feeds (l_off, delta_w, delta_l).
struct MetaLearnerParams {
  std::vector<DenseLayer> layers;

  int input_dim() const { return layers.empty() ? 0 : layers.front().in; }
  int hidden_size() const { return layers.empty() ? 0 : layers.front().out; }
  int depth() const { return static_cast<int>(layers.size()); }

  // Two-layer accessors.
  const std::vector<double>& w1() const { return layers.front().weight; }
  const std::vector<double>& b1() const { return layers.front().bias; }
  const std::vector<double>& w2() const { return layers.back().weight; }
  double b2() const { return layers.back().bias[0]; }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  /// Visits every scalar parameter in a fixed order (layer, weights, bias).
  template <typename F>
  void for_each(F&& f) {
    for (auto& l : layers) {
      for (double& v : l.weight) f(v);
      for (double& v : l.bias) f(v);
    }
  }
  template <typename F>
  void for_each(F&& f) const {
    for (const auto& l : layers) {
      for (double v : l.weight) f(v);
      for (double v : l.bias) f(v);
    }
  }

  bool operator==(const MetaLearnerParams&) const = default;
};

/// Same shape as the parameters it differentiates.
using MetaGradient = MetaLearnerParams;

inline MetaLearnerParams zeros_like(const MetaLearnerParams& p) {
  MetaLearnerParams z = p;
  z.for_each([](double& v) { v = 0.0; });
  return z;
}

/// Builds an all-zero network of the given shape.
inline MetaLearnerParams make_meta_shape(int hidden_size, int depth = 2,
                                         int input_dim = 1) {
  if (hidden_size < 1) throw ConfigError("meta hidden size must be >= 1");
  if (depth < 2) throw ConfigError("meta depth must be >= 2");
  if (input_dim < 1) throw ConfigError("meta input dim must be >= 1");
  MetaLearnerParams p;
  int in = input_dim;
  for (int l = 0; l < depth; ++l) {
    const int out = (l + 1 == depth) ? 1 : hidden_size;
    DenseLayer layer;
    layer.in = in;
    layer.out = out;
    layer.weight.assign(static_cast<std::size_t>(in) * out, 0.0);
    layer.bias.assign(out, 0.0);
    p.layers.push_back(std::move(layer));
    in = out;
  }
  return p;
}

// ---- forward / backward --------------------------------------------------------

/// h_phi output, kept strictly inside (0, 1) even when the sigmoid saturates
/// in double precision.
struct MetaWeight {
  double value = 0.5;
};

inline double clamp_open_unit(double h) {
  constexpr double lo = std::numeric_limits<double>::min();
  constexpr double hi = 1.0 - 0x1.0p-53;
  return std::clamp(h, lo, hi);
}

namespace detail {

struct ForwardTrace {
  std::vector<std::vector<double>> activations;  // input, then each hidden
  double output = 0.5;
};

inline ForwardTrace forward_trace(const MetaLearnerParams& p,
                                  std::span<const double> x) {
  if (static_cast<int>(x.size()) != p.input_dim())
    throw DomainError("meta input has " + std::to_string(x.size()) +
                      " features, network expects " +
                      std::to_string(p.input_dim()));
  ForwardTrace t;
  t.activations.emplace_back(x.begin(), x.end());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& layer = p.layers[l];
    const auto& a = t.activations.back();
    std::vector<double> z(layer.out);
    for (int o = 0; o < layer.out; ++o) {
      double s = layer.bias[o];
      for (int i = 0; i < layer.in; ++i) s += layer.w(o, i) * a[i];
      z[o] = s;
    }
    if (l + 1 == p.layers.size()) {
      t.output = clamp_open_unit(sigmoid(z[0]));
    } else {
      for (double& v : z) v = std::tanh(v);
      t.activations.push_back(std::move(z));
    }
  }
  return t;
}

/// grad += scale * d h / d phi, by backprop through the trace.
inline void accumulate_grad(const MetaLearnerParams& p, const ForwardTrace& t,
                            double scale, MetaGradient& grad) {
  const double h = t.output;
  std::vector<double> delta{scale * h * (1.0 - h)};  // d/dz at the head
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    const auto& layer = p.layers[l];
    auto& g = grad.layers[l];
    const auto& a = t.activations[l];
    for (int o = 0; o < layer.out; ++o) {
      g.bias[o] += delta[o];
      for (int i = 0; i < layer.in; ++i) g.w(o, i) += delta[o] * a[i];
    }
    if (l == 0) break;
    std::vector<double> prev(layer.in, 0.0);
    for (int o = 0; o < layer.out; ++o)
      for (int i = 0; i < layer.in; ++i) prev[i] += layer.w(o, i) * delta[o];
    for (int i = 0; i < layer.in; ++i) prev[i] *= 1.0 - a[i] * a[i];  // tanh'
    delta = std::move(prev);
  }
}

}  // namespace detail

inline MetaWeight meta_forward(const MetaLearnerParams& p,
                               std::span<const double> features) {
  return {detail::forward_trace(p, features).output};
}

inline MetaWeight meta_forward(const MetaLearnerParams& p,
                               PreferenceScore score) {
  const double x[1] = {score.value};
  return meta_forward(p, x);
}

// ---- meta objective --------------------------------------------------------------

/// One buffered item as the meta objective sees it.
struct MetaSample {
  std::vector<double> features;  // network input; features[0] is l_off
  double l_off = 0.0;
  double l_on = 0.0;
};

inline MetaSample scalar_sample(double l_off, double l_on) {
  return {{l_off}, l_off, l_on};
}

/// -mean[h(l_off) * l_off + (1 - h(l_off)) * l_on]
inline double meta_loss(const MetaLearnerParams& p,
                        std::span<const MetaSample> batch) {
  if (batch.empty()) throw DomainError("meta_loss on an empty batch");
  double s = 0.0;
  for (const auto& m : batch) {
    const double h = meta_forward(p, m.features).value;
    s += h * m.l_off + (1.0 - h) * m.l_on;
  }
  return -s / static_cast<double>(batch.size());
}

/// mean[(l_on - l_off) * grad_phi h(l_off)]
inline MetaGradient grad_meta_loss(const MetaLearnerParams& p,
                                   std::span<const MetaSample> batch) {
  if (batch.empty()) throw DomainError("grad_meta_loss on an empty batch");
  MetaGradient g = zeros_like(p);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& m : batch) {
    const double advantage = m.l_on - m.l_off;
    if (advantage == 0.0) continue;
    detail::accumulate_grad(p, detail::forward_trace(p, m.features),
                            advantage * inv_n, g);
  }
  return g;
}

inline void gradient_step(MetaLearnerParams& p, const MetaGradient& g,
                          double eta) {
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& dst = p.layers[l];
    const auto& src = g.layers[l];
    for (std::size_t i = 0; i < dst.weight.size(); ++i) dst.weight[i] -= eta * src.weight[i];
    for (std::size_t i = 0; i < dst.bias.size(); ++i) dst.bias[i] -= eta * src.bias[i];
  }
}

// ---- augmented tuples and the meta buffer ---------------------------------------

/// (x, offline pair, online pair). Tuples without an online pair only occur
/// when unselected offline items are folded back into training; they carry
/// a fixed weight of 1 and never enter the meta buffer.
struct AugmentedTuple {
  int prompt = 0;
  OfflinePair offline;
  int online_chosen = -1;
  int online_rejected = -1;
  bool has_online = true;
  // Scores at collection time, used only in stale-score mode.
  double cached_l_off = 0.0;
  double cached_l_on = 0.0;

  PreferencePair online() const { return {prompt, online_chosen, online_rejected}; }

  bool operator==(const AugmentedTuple&) const = default;
};

class MetaBuffer {
 public:
  void append(std::span<const AugmentedTuple> tuples) {
    for (const auto& t : tuples)
      if (t.has_online) tuples_.push_back(t);
  }

  std::vector<AugmentedTuple> drain() {
    std::vector<AugmentedTuple> out;
    out.swap(tuples_);
    return out;
  }

  std::size_t size() const { return tuples_.size(); }
  bool empty() const { return tuples_.empty(); }
  const std::vector<AugmentedTuple>& tuples() const { return tuples_; }

 private:
  std::vector<AugmentedTuple> tuples_;
};

enum class MetaInput { Score, Multi };

inline int input_dim(MetaInput mode) { return mode == MetaInput::Score ? 1 : 3; }

/// Network input for an offline pair: l_off alone, or
/// (l_off, log pi/ref of y_w, log pi/ref of y_l).
inline std::vector<double> meta_features(const ScoringContext& ctx,
                                         const PreferencePair& offline,
                                         double l_off, MetaInput mode) {
  if (mode == MetaInput::Score) return {l_off};
  return {l_off, log_ratio(ctx.policy, ctx.reference, offline.prompt, offline.chosen),
          log_ratio(ctx.policy, ctx.reference, offline.prompt, offline.rejected)};
}

struct MetaUpdateOptions {
  MetaInput input = MetaInput::Score;
  bool stale_scores = false;
};

struct MetaUpdateResult {
  bool skipped = false;
  std::size_t consumed = 0;
  double loss_before = 0.0;
  std::optional<std::string> warning;
};

/// Builds the meta batch for the buffered tuples under the (frozen) policy.
inline std::vector<MetaSample> meta_batch(std::span<const AugmentedTuple> tuples,
                                          const ScoringContext& ctx,
                                          const MetaUpdateOptions& opt) {
  std::vector<MetaSample> batch;
  batch.reserve(tuples.size());
  for (const auto& t : tuples) {
    MetaSample m;
    if (opt.stale_scores) {
      m.l_off = t.cached_l_off;
      m.l_on = t.cached_l_on;
    } else {
      m.l_off = ctx.score(t.offline).value;
      m.l_on = ctx.score(t.online()).value;
    }
    m.features = meta_features(ctx, t.offline, m.l_off, opt.input);
    batch.push_back(std::move(m));
  }
  return batch;
}

/// One plain gradient step on the meta objective over the whole buffer,
/// then drains it. The policy inside `ctx` is only read.
inline MetaUpdateResult meta_update(MetaLearnerParams& params, MetaBuffer& buffer,
                                    const ScoringContext& ctx, double eta,
                                    const MetaUpdateOptions& opt = {}) {
  MetaUpdateResult res;
  if (buffer.empty()) {
    res.skipped = true;
    res.warning = "meta update skipped: empty meta buffer";
    return res;
  }
  const auto tuples = buffer.drain();
  const auto batch = meta_batch(tuples, ctx, opt);
  res.consumed = tuples.size();
  res.loss_before = meta_loss(params, batch);
  if (eta != 0.0) gradient_step(params, grad_meta_loss(params, batch), eta);
  return res;
}

// ---- initialisation --------------------------------------------------------------

/// Weights ~ N(0, (init_scale / sqrt(fan_in))^2), biases zero. For
/// init_scale <= 1 the resulting map must send every l in [-5, 0] into
/// (0.3, 0.7); otherwise InitError is thrown and the caller should retry
/// with a smaller scale.
inline MetaLearnerParams init_meta(int hidden_size, double init_scale,
                                   std::uint64_t seed, int depth = 2,
                                   MetaInput input = MetaInput::Score) {
  if (!(init_scale >= 0.0)) throw ConfigError("init_scale must be >= 0");
  MetaLearnerParams p = make_meta_shape(hidden_size, depth, input_dim(input));
  Rng rng(seed);
  for (auto& layer : p.layers) {
    const double std = init_scale / std::sqrt(static_cast<double>(layer.in));
    for (double& v : layer.weight) v = std * rng.normal() + 0.0;
  }
  if (init_scale <= 1.0) {
    std::vector<double> x(p.input_dim(), 0.0);
    for (int i = 0; i <= 50; ++i) {
      x[0] = -5.0 + 0.1 * i;
      const double h = meta_forward(p, x).value;
      if (!(h > 0.3 && h < 0.7))
        throw InitError("initial meta weight " + io::fmt(h) + " at input " +
                        io::fmt(x[0]) + " outside (0.3, 0.7)");
    }
  }
  return p;
}

// ---- serialization ---------------------------------------------------------------

inline std::string meta_to_json(const MetaLearnerParams& p) {
  std::string out = "{\n  \"input_dim\": " + std::to_string(p.input_dim()) +
                    ",\n  \"layers\": [\n";
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& layer = p.layers[l];
    out += "    {\"in\": " + std::to_string(layer.in) +
           ", \"out\": " + std::to_string(layer.out) +
           ",\n     \"weight\": " + io::json_array(layer.weight) +
           ",\n     \"bias\": " + io::json_array(layer.bias) + "}";
    out += (l + 1 < p.layers.size()) ? ",\n" : "\n";
  }
  return out + "  ]\n}\n";
}

inline MetaLearnerParams meta_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  MetaLearnerParams p;
  for (const auto& jl : j.at("layers")) {
    DenseLayer l;
    l.in = jl.at("in").get<int>();
    l.out = jl.at("out").get<int>();
    l.weight = jl.at("weight").get<std::vector<double>>();
    l.bias = jl.at("bias").get<std::vector<double>>();
    if (l.weight.size() != static_cast<std::size_t>(l.in) * l.out ||
        l.bias.size() != static_cast<std::size_t>(l.out))
      throw DomainError("meta checkpoint layer shape mismatch");
    p.layers.push_back(std::move(l));
  }
  if (p.layers.empty() || p.layers.back().out != 1)
    throw DomainError("meta checkpoint must end in a scalar head");
  return p;
}

}  // namespace metaapo
