#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "attnaudit/data.hpp"
#include "attnaudit/model.hpp"

namespace attnaudit {

/// Output-change threshold: 0.01 for classification, 0.05 for QA and
/// query-conditioned NLI-style tasks.
double epsilon_for_task(TaskKind task);

/// Median; even-length input averages the two middle values.
double median(std::vector<double> values);

struct PermutationResult {
  std::string id;
  std::size_t predicted_class = 0;
  double max_alpha = 0.0;
  double median_delta = 0.0;  // median TVD over the permutations
  std::size_t permutations = 0;
  bool degenerate = false;  // T = 1: only the identity permutation exists
};

inline constexpr std::size_t kDefaultPermutations = 100;

/// Shuffles the trace's attention P times, decodes each shuffle over the
/// unchanged hidden states and reports the median output TVD.
PermutationResult permutation_experiment(const Model& model, const ForwardTrace& trace,
                                         std::size_t permutations = kDefaultPermutations, std::uint64_t seed = 1);

/// sum_i JSD(candidate_i, original) + 1/(k(k-1)) sum_{i<j} JSD(candidate_i, candidate_j).
/// For k = 1 the pairwise term is dropped.
double adversarial_objective(std::span<const std::vector<double>> candidates, std::span<const double> original);

struct AdversarialConfig {
  double epsilon = 0.01;
  std::size_t k = 5;
  double penalty = 500.0;  // lambda on the hinge TVD penalty
  double learning_rate = 0.1;
  // Logits of near-zero weights get gradients around 1e-9; a larger epsilon
  // would shrink their steps far below the learning rate.
  double adam_epsilon = 1e-12;
  std::size_t iterations = 500;
  // Early stop when the best penalized objective improves by less than
  // `tolerance` over `patience` iterations.
  std::size_t patience = 25;
  double tolerance = 1e-6;
  double init_noise = 0.5;
  std::size_t max_restarts = 2;
  // Pull candidates that end outside the TVD constraint back toward the
  // original attention (bisection on the segment) and keep the most
  // divergent feasible iterate seen.
  bool restore_feasibility = true;
};

struct Adversary {
  std::vector<double> alpha;
  std::vector<double> output;
  double tvd = 0.0;  // output change vs. the original prediction
  double jsd = 0.0;  // divergence from the original attention
};

struct AdversarialResult {
  std::string id;
  std::size_t predicted_class = 0;
  double epsilon = 0.0;
  std::size_t k = 0;
  double max_alpha = 0.0;
  std::vector<Adversary> adversaries;
  double eps_max_jsd = 0.0;
  std::vector<double> trajectory;  // penalized objective per iteration
  std::size_t iterations = 0;
  std::size_t restarts = 0;
  bool degenerate = false;  // T = 1
  bool objective_non_decreasing = true;  // final objective >= initial
  double learning_rate = 0.0;  // step used by the accepted run
};

/// Largest JSD among adversaries whose output change is within epsilon;
/// 0 when none qualifies.
double eps_max_jsd(std::span<const Adversary> adversaries, double epsilon);

/// Maximizes the diversity-augmented JSD objective minus the hinge penalty
/// (lambda / k) sum_i max(0, TVD_i - epsilon) with Adam over per-adversary
/// logits (softmax keeps every candidate on the simplex). Hidden states
/// stay fixed. Throws ad::NumericError if the objective stays non-finite
/// after all restarts.
AdversarialResult adversarial_search(const Model& model, const ForwardTrace& trace, const AdversarialConfig& config,
                                     std::uint64_t seed = 1);

}  // namespace attnaudit
