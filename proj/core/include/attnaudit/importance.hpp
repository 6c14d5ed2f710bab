#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attnaudit/metrics.hpp"
#include "attnaudit/model.hpp"
#include "attnaudit/plots.hpp"

namespace attnaudit {

/// |d y_target / d x_t| along the active one-hot coordinate of each position,
/// with the attention weights held fixed (graph cut at the attention
/// module). The target is the predicted-class probability.
std::vector<double> gradient_importance(const Model& model, std::span<const TokenId> tokens,
                                        std::span<const TokenId> query = {});

/// TVD between the full-input output and the output with token t removed
/// (sequence shortened, fully re-encoded). nullopt when T = 1.
std::optional<std::vector<double>> loo_importance(const Model& model, std::span<const TokenId> tokens,
                                                  std::span<const TokenId> query = {});

struct ImportanceRecord {
  std::string id;
  std::size_t label = 0;
  std::size_t predicted_class = 0;
  std::vector<double> alpha;
  std::vector<double> gradient;
  std::vector<double> loo;  // empty when the instance is too short for LOO
  std::optional<double> tau_g;
  std::optional<double> tau_loo;
  std::optional<double> tau_g_loo;
  double p_g = 0.0;
  double p_loo = 0.0;
  bool loo_excluded = false;
};

/// Fills the three rank correlations (attention vs gradient, attention vs
/// LOO, gradient vs LOO) and their normal-approximation p-values.
ImportanceRecord correlate(std::string id, std::size_t label, const ForwardTrace& trace, std::vector<double> gradient,
                           std::optional<std::vector<double>> loo, TauVariant variant = TauVariant::kB);

ImportanceRecord analyze_importance(const Model& model, const Instance& instance,
                                    TauVariant variant = TauVariant::kB);

struct TauStats {
  std::size_t count = 0;  // defined values only
  std::size_t undefined = 0;
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  // p < 0.05 among values carrying a p-value; nullopt when none does
  std::optional<double> fraction_significant;
};

struct CorrelationGroup {
  std::size_t records = 0;
  TauStats tau_g;
  TauStats tau_loo;
  TauStats tau_g_loo;
  // Means over records where both terms are defined.
  std::optional<double> mean_gloo_minus_alpha_loo;  // tau(g,loo) - tau(alpha,loo)
  std::optional<double> mean_gloo_minus_alpha_g;    // tau(g,loo) - tau(alpha,g)
};

struct CorrelationSummary {
  CorrelationGroup overall;
  std::map<std::size_t, CorrelationGroup> by_class;  // keyed by predicted class
  Histogram tau_g_histogram;
  Histogram tau_loo_histogram;
};

/// Throws std::invalid_argument when no record carries a defined tau.
CorrelationSummary aggregate_correlations(std::span<const ImportanceRecord> records, std::size_t bins = 20);

}  // namespace attnaudit
