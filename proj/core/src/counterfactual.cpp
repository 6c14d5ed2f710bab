#include "attnaudit/counterfactual.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "attnaudit/metrics.hpp"
#include "attnaudit/random.hpp"
#include "attnaudit/training.hpp"

namespace attnaudit {

using ad::Var;

double epsilon_for_task(TaskKind task) {
  switch (task) {
    case TaskKind::kBinaryClassification: return 0.01;
    case TaskKind::kQA:
    case TaskKind::kNLI: return 0.05;
  }
  throw std::invalid_argument("epsilon_for_task: unknown task kind");
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty sequence");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

namespace {

double max_of(const Tensor& t) { return *std::max_element(t.values().begin(), t.values().end()); }

}  // namespace

PermutationResult permutation_experiment(const Model& model, const ForwardTrace& trace, std::size_t permutations,
                                         std::uint64_t seed) {
  if (permutations == 0) throw std::invalid_argument("permutation_experiment: need at least one permutation");
  PermutationResult r;
  r.predicted_class = trace.predicted_class();
  r.max_alpha = max_of(trace.alpha);
  r.permutations = permutations;
  const std::size_t n = trace.length();
  if (n == 1) {
    r.degenerate = true;
    r.median_delta = 0.0;
    return r;
  }
  const Tensor original = decode(model, trace.hidden, trace.alpha.values());
  Rng rng(seed);
  std::vector<double> shuffled(trace.alpha.values().begin(), trace.alpha.values().end());
  std::vector<double> deltas;
  deltas.reserve(permutations);
  for (std::size_t p = 0; p < permutations; ++p) {
    std::copy(trace.alpha.values().begin(), trace.alpha.values().end(), shuffled.begin());
    rng.shuffle(shuffled);
    const Tensor out = decode(model, trace.hidden, shuffled);
    deltas.push_back(tvd(out.values(), original.values()));
  }
  r.median_delta = median(std::move(deltas));
  return r;
}

double adversarial_objective(std::span<const std::vector<double>> candidates, std::span<const double> original) {
  if (candidates.empty()) throw std::invalid_argument("adversarial_objective: no candidates");
  double total = 0.0;
  for (const auto& c : candidates) total += jsd(c, original);
  const std::size_t k = candidates.size();
  if (k > 1) {
    double pairwise = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = i + 1; j < k; ++j) pairwise += jsd(candidates[i], candidates[j]);
    }
    total += pairwise / static_cast<double>(k * (k - 1));
  }
  return total;
}

double eps_max_jsd(std::span<const Adversary> adversaries, double epsilon) {
  double best = 0.0;
  for (const auto& a : adversaries) {
    if (a.tvd <= epsilon) best = std::max(best, a.jsd);
  }
  return best;
}

namespace {

Var graph_jsd(Var p, Var q) {
  const Var mid = ad::scale(ad::add(p, q), 0.5);
  const Var own = ad::add(ad::scale(ad::sum(ad::xlogx(p)), 0.5), ad::scale(ad::sum(ad::xlogx(q)), 0.5));
  return ad::sub(own, ad::sum(ad::xlogx(mid)));
}

std::vector<double> softmax_of(const std::vector<double>& logits) {
  ad::Graph g;
  const Tensor out = ad::masked_softmax(g.constant(Tensor::vector(logits))).value();
  return {out.values().begin(), out.values().end()};
}

struct SearchContext {
  const Model& model;
  const Tensor& hidden;
  const std::vector<double>& original_alpha;
  const Tensor& original_output;
  const AdversarialConfig& config;

  Adversary measure(std::vector<double> alpha) const {
    Adversary a;
    const Tensor out = decode(model, hidden, alpha);
    a.output.assign(out.values().begin(), out.values().end());
    a.tvd = tvd(a.output, original_output.values());
    a.jsd = jsd(alpha, original_alpha);
    a.alpha = std::move(alpha);
    return a;
  }

  // Largest step toward `candidate` along the segment from the original
  // attention that keeps the output within epsilon.
  Adversary restore(const std::vector<double>& candidate) const {
    double lo = 0.0, hi = 1.0;
    std::vector<double> mix(candidate.size());
    auto blend = [&](double t) {
      for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = (1.0 - t) * original_alpha[i] + t * candidate[i];
      return mix;
    };
    for (int iter = 0; iter < 60; ++iter) {
      const double mid = 0.5 * (lo + hi);
      if (measure(blend(mid)).tvd <= config.epsilon) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    return measure(blend(lo));
  }
};

struct RunOutcome {
  std::vector<std::vector<double>> final_alpha;
  std::vector<Adversary> best_feasible;  // jsd < 0 marks "none seen"
  std::vector<double> trajectory;
  std::size_t iterations = 0;
};

RunOutcome run_search(const SearchContext& ctx, std::vector<std::vector<double>> logits, double learning_rate) {
  const AdversarialConfig& cfg = ctx.config;
  const std::size_t k = logits.size();
  const double pair_weight = k > 1 ? 1.0 / static_cast<double>(k * (k - 1)) : 0.0;
  const double penalty_weight = cfg.penalty / static_cast<double>(k);

  RunOutcome out;
  out.best_feasible.assign(k, Adversary{{}, {}, 0.0, -1.0});
  std::vector<AdamMoments> moments(k);
  double best_objective = -std::numeric_limits<double>::infinity();
  std::size_t last_improvement = 0;

  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    ad::Graph g;
    const Var hidden = g.constant(ctx.hidden);
    const Var theta = g.constant(ctx.model.params.at("decoder.theta"));
    const Var bias = g.constant(ctx.model.params.at("decoder.bias"));
    const Var original = g.constant(Tensor::vector(ctx.original_alpha));
    const Var target = g.constant(ctx.original_output);

    std::vector<Var> leaves, alphas, changes;
    Var objective = g.constant(Tensor::scalar(0.0));
    for (std::size_t i = 0; i < k; ++i) {
      leaves.push_back(g.leaf(Tensor::vector(logits[i])));
      alphas.push_back(ad::masked_softmax(leaves.back()));
      const Var output = layers::decode(hidden, alphas.back(), theta, bias, ctx.model.config.output);
      changes.push_back(ad::scale(ad::sum(ad::abs(ad::sub(output, target))), 0.5));
      objective = ad::add(objective, graph_jsd(alphas.back(), original));
    }
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = i + 1; j < k; ++j) {
        objective = ad::add(objective, ad::scale(graph_jsd(alphas[i], alphas[j]), pair_weight));
      }
    }
    for (std::size_t i = 0; i < k; ++i) {
      objective = ad::sub(objective, ad::scale(ad::relu(ad::add_scalar(changes[i], -cfg.epsilon)), penalty_weight));
    }

    const double value = objective.value()[0];
    if (!std::isfinite(value)) throw ad::NumericError("adversarial objective is not finite");
    out.trajectory.push_back(value);
    out.iterations = it;

    for (std::size_t i = 0; i < k; ++i) {
      if (changes[i].value()[0] > cfg.epsilon) continue;
      const auto values = alphas[i].value().values();
      Adversary a = ctx.measure({values.begin(), values.end()});
      if (a.tvd <= cfg.epsilon && a.jsd > out.best_feasible[i].jsd) out.best_feasible[i] = std::move(a);
    }

    if (value > best_objective + cfg.tolerance) {
      best_objective = value;
      last_improvement = it;
    } else if (it - last_improvement >= cfg.patience) {
      break;
    }
    if (it == cfg.iterations) break;

    g.backward(ad::scale(objective, -1.0));
    for (std::size_t i = 0; i < k; ++i) {
      Tensor param = Tensor::vector(logits[i]);
      adam_update(param, leaves[i].grad(), moments[i], it, learning_rate, 0.9, 0.999, cfg.adam_epsilon);
      logits[i].assign(param.values().begin(), param.values().end());
    }
  }
  for (const auto& l : logits) out.final_alpha.push_back(softmax_of(l));
  return out;
}

}  // namespace

AdversarialResult adversarial_search(const Model& model, const ForwardTrace& trace, const AdversarialConfig& config,
                                     std::uint64_t seed) {
  if (config.k == 0) throw std::invalid_argument("adversarial_search: k must be >= 1");
  if (!(config.epsilon >= 0.0)) throw std::invalid_argument("adversarial_search: epsilon must be nonnegative");
  if (config.iterations == 0) throw std::invalid_argument("adversarial_search: need at least one iteration");

  AdversarialResult result;
  result.predicted_class = trace.predicted_class();
  result.epsilon = config.epsilon;
  result.k = config.k;
  result.max_alpha = max_of(trace.alpha);
  result.learning_rate = config.learning_rate;

  const std::vector<double> original_alpha(trace.alpha.values().begin(), trace.alpha.values().end());
  const Tensor original_output = decode(model, trace.hidden, original_alpha);
  const SearchContext ctx{model, trace.hidden, original_alpha, original_output, config};
  const std::size_t n = trace.length();

  if (n == 1) {
    result.degenerate = true;
    for (std::size_t i = 0; i < config.k; ++i) result.adversaries.push_back(ctx.measure({1.0}));
    result.eps_max_jsd = eps_max_jsd(result.adversaries, config.epsilon);
    return result;
  }

  Rng rng(seed);
  std::vector<std::vector<double>> init(config.k, std::vector<double>(n));
  for (auto& logits : init) {
    for (std::size_t t = 0; t < n; ++t) logits[t] = std::log(original_alpha[t] + 1e-8) + config.init_noise * rng.normal();
  }

  RunOutcome outcome;
  double lr = config.learning_rate;
  for (std::size_t attempt = 0;; ++attempt) {
    try {
      outcome = run_search(ctx, init, lr);
      break;
    } catch (const ad::NumericError& e) {
      if (attempt >= config.max_restarts) {
        throw ad::NumericError(std::string("adversarial search diverged after ") + std::to_string(attempt + 1) +
                               " attempts (last step " + std::to_string(lr) + "): " + e.what());
      }
      lr *= 0.1;
      ++result.restarts;
    }
  }
  result.learning_rate = lr;
  result.trajectory = std::move(outcome.trajectory);
  result.iterations = outcome.iterations;
  result.objective_non_decreasing = result.trajectory.back() >= result.trajectory.front();

  for (std::size_t i = 0; i < config.k; ++i) {
    Adversary final = ctx.measure(outcome.final_alpha[i]);
    if (config.restore_feasibility) {
      if (final.tvd > config.epsilon) final = ctx.restore(final.alpha);
      if (outcome.best_feasible[i].jsd > final.jsd) final = std::move(outcome.best_feasible[i]);
    }
    result.adversaries.push_back(std::move(final));
  }
  result.eps_max_jsd = eps_max_jsd(result.adversaries, config.epsilon);
  return result;
}

}  // namespace attnaudit
