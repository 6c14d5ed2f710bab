#include "attnaudit/importance.hpp"

#include <cmath>
#include <stdexcept>

namespace attnaudit {

std::vector<double> gradient_importance(const Model& model, std::span<const TokenId> tokens,
                                        std::span<const TokenId> query) {
  ad::Graph graph;
  ForwardOptions options;
  options.embedded_leaf = true;
  options.detach_attention = true;
  const ForwardGraph fg = build_forward(graph, model, tokens, query, options);

  const ForwardTrace trace = trace_from(fg, tokens);
  const std::size_t target = trace.predicted_class();
  const ad::Var y = ad::sum(ad::slice_cols(fg.output, target, target + 1));
  graph.backward(y);

  // d y / d x_{t,w} for the active word w equals E[w] . d y / d x_e[t].
  const Tensor& grad = fg.embedded.grad();
  const Tensor& table = model.params.at("embedding");
  const std::size_t d = table.cols();
  std::vector<double> out(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += table.at(tokens[t], j) * grad.at(t, j);
    if (!std::isfinite(acc)) throw ad::NumericError("gradient importance is not finite");
    out[t] = std::fabs(acc);
  }
  return out;
}

std::optional<std::vector<double>> loo_importance(const Model& model, std::span<const TokenId> tokens,
                                                  std::span<const TokenId> query) {
  if (tokens.size() < 2) return std::nullopt;
  const ForwardTrace full = forward(model, tokens, query);
  std::vector<double> out(tokens.size());
  std::vector<TokenId> reduced(tokens.size() - 1);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    std::size_t k = 0;
    for (std::size_t s = 0; s < tokens.size(); ++s) {
      if (s != t) reduced[k++] = tokens[s];
    }
    const ForwardTrace without = forward(model, reduced, query);
    out[t] = tvd(without.output.values(), full.output.values());
  }
  return out;
}

ImportanceRecord correlate(std::string id, std::size_t label, const ForwardTrace& trace, std::vector<double> gradient,
                           std::optional<std::vector<double>> loo, TauVariant variant) {
  const std::size_t n = trace.length();
  if (gradient.size() != n || (loo && loo->size() != n)) {
    throw std::invalid_argument("correlate: importance vectors differ in length from the attention");
  }
  ImportanceRecord r;
  r.id = std::move(id);
  r.label = label;
  r.predicted_class = trace.predicted_class();
  r.alpha.assign(trace.alpha.values().begin(), trace.alpha.values().end());
  r.gradient = std::move(gradient);
  r.loo_excluded = !loo.has_value();
  if (loo) r.loo = std::move(*loo);

  if (n >= 2) {
    const KendallTest g = kendall_tau_test(r.alpha, r.gradient, variant);
    r.tau_g = g.tau;
    r.p_g = g.p_value;
    if (!r.loo_excluded) {
      const KendallTest l = kendall_tau_test(r.alpha, r.loo, variant);
      r.tau_loo = l.tau;
      r.p_loo = l.p_value;
      r.tau_g_loo = kendall_tau(r.gradient, r.loo, variant);
    }
  }
  return r;
}

ImportanceRecord analyze_importance(const Model& model, const Instance& instance, TauVariant variant) {
  const ForwardTrace trace = forward(model, instance);
  return correlate(instance.id, instance.label, trace, gradient_importance(model, instance.tokens, instance.query),
                   loo_importance(model, instance.tokens, instance.query), variant);
}

namespace {

struct Accumulator {
  std::vector<double> values;
  std::size_t undefined = 0;
  std::size_t significant = 0;
  std::size_t tested = 0;

  void add(const std::optional<double>& v, std::optional<double> p = std::nullopt) {
    if (!v) {
      ++undefined;
      return;
    }
    values.push_back(*v);
    if (p && std::isfinite(*p)) {
      ++tested;
      significant += *p < 0.05 ? 1 : 0;
    }
  }

  TauStats stats() const {
    TauStats s;
    s.count = values.size();
    s.undefined = undefined;
    if (values.empty()) return s;
    double total = 0.0;
    for (double v : values) total += v;
    s.mean = total / static_cast<double>(values.size());
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(sq / static_cast<double>(values.size()));
    if (tested > 0) s.fraction_significant = static_cast<double>(significant) / static_cast<double>(tested);
    return s;
  }
};

std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double total = 0.0;
  for (double x : v) total += x;
  return total / static_cast<double>(v.size());
}

CorrelationGroup summarize(std::span<const ImportanceRecord* const> records) {
  Accumulator g, l, gl;
  std::vector<double> diff_loo, diff_g;
  for (const ImportanceRecord* r : records) {
    g.add(r->tau_g, r->p_g);
    l.add(r->tau_loo, r->p_loo);
    gl.add(r->tau_g_loo);
    if (r->tau_g_loo && r->tau_loo) diff_loo.push_back(*r->tau_g_loo - *r->tau_loo);
    if (r->tau_g_loo && r->tau_g) diff_g.push_back(*r->tau_g_loo - *r->tau_g);
  }
  CorrelationGroup out;
  out.records = records.size();
  out.tau_g = g.stats();
  out.tau_loo = l.stats();
  out.tau_g_loo = gl.stats();
  out.mean_gloo_minus_alpha_loo = mean_of(diff_loo);
  out.mean_gloo_minus_alpha_g = mean_of(diff_g);
  return out;
}

}  // namespace

CorrelationSummary aggregate_correlations(std::span<const ImportanceRecord> records, std::size_t bins) {
  if (records.empty()) throw std::invalid_argument("aggregate_correlations: no records");
  std::vector<const ImportanceRecord*> all;
  std::map<std::size_t, std::vector<const ImportanceRecord*>> grouped;
  std::vector<double> tau_g, tau_loo;
  for (const auto& r : records) {
    all.push_back(&r);
    grouped[r.predicted_class].push_back(&r);
    if (r.tau_g) tau_g.push_back(*r.tau_g);
    if (r.tau_loo) tau_loo.push_back(*r.tau_loo);
  }
  if (tau_g.empty() && tau_loo.empty()) throw std::invalid_argument("aggregate_correlations: every tau is undefined");

  CorrelationSummary s;
  s.overall = summarize(all);
  for (const auto& [cls, members] : grouped) s.by_class.emplace(cls, summarize(members));
  auto hist = [&](const std::vector<double>& v) {
    if (v.empty()) return Histogram{kTauRangeLo, kTauRangeHi, std::vector<std::size_t>(bins, 0)};
    return emit_histogram(v, bins, kTauRangeLo, kTauRangeHi);
  };
  s.tau_g_histogram = hist(tau_g);
  s.tau_loo_histogram = hist(tau_loo);
  return s;
}

}  // namespace attnaudit
