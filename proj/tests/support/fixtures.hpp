#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "attnaudit/counterfactual.hpp"
#include "attnaudit/metrics.hpp"
#include "attnaudit/model.hpp"
#include "attnaudit/random.hpp"
#include "attnaudit/training.hpp"

namespace attnaudit::testing {

inline ModelConfig tiny_config(EncoderKind encoder, SimilarityKind similarity, bool conditioned = false,
                               std::uint64_t seed = 1, std::size_t arity = 2) {
  ModelConfig c;
  c.encoder = encoder;
  c.similarity = similarity;
  c.vocab_size = 10;
  c.embedding_dim = 4;
  c.hidden_dim = 4;
  c.output_arity = arity;
  c.output = arity == 2 ? OutputActivation::kSigmoid : OutputActivation::kSoftmax;
  c.kernel_sizes = {1, 3};
  c.filters = {2, 2};
  c.conditioned = conditioned;
  c.seed = seed;
  return c;
}

inline std::vector<TokenId> random_tokens(Rng& rng, std::size_t length, std::size_t vocab) {
  std::vector<TokenId> out(length);
  for (auto& t : out) t = rng.below(vocab);
  return out;
}

inline const std::vector<EncoderKind>& all_encoders() {
  static const std::vector<EncoderKind> v{EncoderKind::kAverage, EncoderKind::kBiRNN, EncoderKind::kConv};
  return v;
}

inline const std::vector<SimilarityKind>& all_similarities() {
  static const std::vector<SimilarityKind> v{SimilarityKind::kAdditive, SimilarityKind::kScaledDot};
  return v;
}

struct GradientComparison {
  double max_relative_error = 0.0;
  std::string worst;
  std::size_t coordinates = 0;
};

// Backprop through the full model vs central differences of the
// tensor-level loss, over every parameter coordinate.
inline GradientComparison compare_model_gradients(const Model& model, const std::vector<TokenId>& tokens,
                                                  const std::vector<TokenId>& query, std::size_t label,
                                                  double l2 = 1e-5, double step = 1e-5, double floor = 1e-6) {
  ad::Graph graph;
  ForwardOptions options;
  options.params_require_grad = true;
  const ForwardGraph fg = build_forward(graph, model, tokens, query, options);
  std::vector<ad::Var> params;
  for (const auto& [name, var] : fg.params) params.push_back(var);
  graph.backward(loss(fg.output, label, params, l2));

  GradientComparison out;
  Model probe = model;
  for (const auto& [name, var] : fg.params) {
    const Tensor& analytic = var.grad();
    Tensor& value = probe.params.at(name);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + step;
      const double up = loss(forward(probe, tokens, query), label, probe.params, l2);
      value[i] = saved - step;
      const double down = loss(forward(probe, tokens, query), label, probe.params, l2);
      value[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err =
          std::fabs(analytic[i] - numeric) / std::max({std::fabs(analytic[i]), std::fabs(numeric), floor});
      ++out.coordinates;
      if (err > out.max_relative_error) {
        out.max_relative_error = err;
        out.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

// Trace over hand-picked hidden states and attention; only the fields the
// counterfactual analyses read are filled.
inline ForwardTrace make_trace(const Model& model, Tensor hidden, std::vector<double> alpha) {
  ForwardTrace t;
  t.tokens.assign(alpha.size(), 0);
  t.output = decode(model, hidden, alpha);
  t.hidden = std::move(hidden);
  t.alpha = Tensor::vector(std::move(alpha));
  return t;
}

// Best JSD over the 1-simplex {(a, 1 - a)} at resolution `step` among
// points whose output stays within epsilon TVD of the original.
inline double grid_eps_max_jsd(const Model& model, const ForwardTrace& trace, double epsilon, double step = 1e-3) {
  const Tensor base = decode(model, trace.hidden, trace.alpha.values());
  double best = 0.0;
  const auto n = static_cast<std::size_t>(std::llround(1.0 / step));
  for (std::size_t i = 0; i <= n; ++i) {
    const double a = static_cast<double>(i) / static_cast<double>(n);
    const std::vector<double> alpha{a, 1.0 - a};
    const Tensor out = decode(model, trace.hidden, alpha);
    if (tvd(out.values(), base.values()) <= epsilon) best = std::max(best, jsd(alpha, trace.alpha.values()));
  }
  return best;
}

// Two-position model whose binary output swings strongly with attention:
// moving all weight from one position to the other changes the output by at
// least `min_swing` TVD.
inline std::pair<Model, ForwardTrace> sensitive_pair(Rng& rng, double min_swing = 0.2) {
  Model model = init_model(tiny_config(EncoderKind::kAverage, SimilarityKind::kAdditive));
  Tensor hidden(Shape{2, 4});
  for (;;) {
    for (double& v : model.params.at("decoder.theta").values()) v = rng.uniform(-3.0, 3.0);
    model.params.at("decoder.bias")[0] = rng.uniform(-0.5, 0.5);
    for (double& v : hidden.values()) v = rng.uniform(-1.0, 1.0);
    const Tensor left = decode(model, hidden, std::vector{1.0, 0.0});
    const Tensor right = decode(model, hidden, std::vector{0.0, 1.0});
    if (tvd(left.values(), right.values()) >= min_swing) break;
  }
  const double a = rng.uniform(0.05, 0.95);
  ForwardTrace trace = make_trace(model, std::move(hidden), {a, 1.0 - a});
  return {std::move(model), std::move(trace)};
}

}  // namespace attnaudit::testing
