#include "attnaudit/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "attnaudit/random.hpp"

namespace attnaudit {

using ad::Var;

std::string_view encoder_name(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::kAverage: return "average";
    case EncoderKind::kBiRNN: return "birnn";
    case EncoderKind::kConv: return "conv";
  }
  return "unknown";
}

EncoderKind parse_encoder(std::string_view name) {
  if (name == "average") return EncoderKind::kAverage;
  if (name == "birnn" || name == "bilstm") return EncoderKind::kBiRNN;
  if (name == "conv" || name == "cnn") return EncoderKind::kConv;
  throw std::invalid_argument("unknown encoder '" + std::string(name) + "'");
}

std::string_view similarity_name(SimilarityKind kind) {
  return kind == SimilarityKind::kAdditive ? "additive" : "dot";
}

SimilarityKind parse_similarity(std::string_view name) {
  if (name == "additive") return SimilarityKind::kAdditive;
  if (name == "dot" || name == "scaled-dot") return SimilarityKind::kScaledDot;
  throw std::invalid_argument("unknown similarity '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& why) { throw std::invalid_argument("model config: " + why); };
  if (vocab_size < 1 || embedding_dim < 1 || hidden_dim < 1 || output_arity < 1) {
    fail("vocab size, embedding dim, hidden dim and output arity must be >= 1");
  }
  if (output == OutputActivation::kSigmoid && output_arity != 2) fail("sigmoid output needs exactly two classes");
  if (encoder == EncoderKind::kBiRNN && hidden_dim % 2 != 0) fail("birnn hidden dim must be even");
  if (encoder == EncoderKind::kConv) {
    if (kernel_sizes.empty() || kernel_sizes.size() != filters.size()) fail("conv kernels and filters differ in count");
    for (std::size_t k : kernel_sizes) {
      if (k % 2 == 0) fail("conv kernel widths must be odd for same-length padding");
    }
    if (std::accumulate(filters.begin(), filters.end(), std::size_t{0}) != hidden_dim) {
      fail("conv filter counts must sum to the hidden dim");
    }
  }
}

ModelConfig model_preset(std::string_view name, EncoderKind encoder) {
  ModelConfig c;
  c.encoder = encoder;
  if (name == "desk") {
    c.embedding_dim = 64;
    c.hidden_dim = 32;
    c.kernel_sizes = {1, 3};
    c.filters = {16, 16};
  } else if (name == "paper") {
    c.embedding_dim = 300;
    c.hidden_dim = encoder == EncoderKind::kBiRNN ? 128 : 256;
    c.kernel_sizes = {1, 3, 5, 7};
    c.filters = {64, 64, 64, 64};
  } else if (name == "babi") {
    c.embedding_dim = 50;
    c.hidden_dim = encoder == EncoderKind::kConv ? 32 : 30;
    c.kernel_sizes = {1, 3, 5, 7};
    c.filters = {8, 8, 8, 8};
  } else {
    throw std::invalid_argument("unknown model preset '" + std::string(name) + "'");
  }
  return c;
}

namespace {

Tensor uniform_tensor(Rng& rng, Shape shape, double bound) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

void init_encoder(Parameters& p, Rng& rng, const ModelConfig& c, const std::string& prefix) {
  const std::size_t d = c.embedding_dim, m = c.hidden_dim;
  switch (c.encoder) {
    case EncoderKind::kAverage:
      p[prefix + ".proj.W"] = uniform_tensor(rng, {d, m}, 1.0 / std::sqrt(static_cast<double>(d)));
      p[prefix + ".proj.b"] = Tensor(Shape{m});
      break;
    case EncoderKind::kBiRNN: {
      const std::size_t h = m / 2;
      const double bound = 1.0 / std::sqrt(static_cast<double>(m));
      for (const char* dir : {".fw", ".bw"}) {
        p[prefix + dir + ".Wx"] = uniform_tensor(rng, {d, 4 * h}, bound);
        p[prefix + dir + ".Wh"] = uniform_tensor(rng, {h, 4 * h}, bound);
        Tensor bias(Shape{4 * h});
        for (std::size_t j = h; j < 2 * h; ++j) bias[j] = c.forget_bias;
        p[prefix + dir + ".b"] = std::move(bias);
      }
      break;
    }
    case EncoderKind::kConv:
      for (std::size_t k = 0; k < c.kernel_sizes.size(); ++k) {
        const std::size_t fan_in = c.kernel_sizes[k] * d;
        const std::string name = prefix + ".conv" + std::to_string(k);
        p[name + ".W"] = uniform_tensor(rng, {fan_in, c.filters[k]}, 1.0 / std::sqrt(static_cast<double>(fan_in)));
        p[name + ".b"] = Tensor(Shape{c.filters[k]});
      }
      break;
  }
}

std::string param_key(std::string_view prefix, std::string_view suffix) {
  std::string key(prefix);
  key += suffix;
  return key;
}

Var param(const std::map<std::string, Var>& vars, const std::string& name) {
  auto it = vars.find(name);
  if (it == vars.end()) throw std::invalid_argument("model is missing parameter '" + name + "'");
  return it->second;
}

Var build_encoder(const ModelConfig& c, const std::map<std::string, Var>& vars, Var embedded,
                  std::string_view prefix) {
  switch (c.encoder) {
    case EncoderKind::kAverage:
      return layers::encode_average(embedded, param(vars, param_key(prefix, ".proj.W")),
                                    param(vars, param_key(prefix, ".proj.b")));
    case EncoderKind::kBiRNN: {
      auto weights = [&](std::string_view dir) {
        const std::string base = param_key(prefix, dir);
        return layers::LstmWeights{param(vars, base + ".Wx"), param(vars, base + ".Wh"), param(vars, base + ".b")};
      };
      return layers::encode_birnn(embedded, weights(".fw"), weights(".bw"));
    }
    case EncoderKind::kConv: {
      std::vector<layers::ConvKernel> kernels;
      for (std::size_t k = 0; k < c.kernel_sizes.size(); ++k) {
        const std::string base = param_key(prefix, ".conv" + std::to_string(k));
        kernels.push_back({c.kernel_sizes[k], param(vars, base + ".W"), param(vars, base + ".b")});
      }
      return layers::encode_conv(embedded, kernels);
    }
  }
  throw std::logic_error("unhandled encoder kind");
}

// Query summary: last forward state + first backward state for the BiRNN,
// mean of the hidden rows otherwise.
Var summarize_query(const ModelConfig& c, Var hidden) {
  ad::Graph& g = *hidden.graph;
  const std::size_t rows = hidden.value().rows(), m = c.hidden_dim;
  if (c.encoder == EncoderKind::kBiRNN) {
    const Var last = ad::slice_cols(ad::slice_rows(hidden, rows - 1, rows), 0, m / 2);
    const Var first = ad::slice_cols(ad::slice_rows(hidden, 0, 1), m / 2, m);
    const Var parts[] = {last, first};
    return ad::reshape(ad::concat_cols(parts), Shape{m});
  }
  const Var mean_row = g.constant(Tensor(Shape{1, rows}, 1.0 / static_cast<double>(rows)));
  return ad::reshape(ad::matmul(mean_row, hidden), Shape{m});
}

}  // namespace

Model init_model(const ModelConfig& config) {
  config.validate();
  Model model{config, {}};
  Rng rng(config.seed);
  Parameters& p = model.params;
  const std::size_t d = config.embedding_dim, m = config.hidden_dim;

  Tensor table(Shape{config.vocab_size, d});
  for (double& v : table.values()) v = rng.normal();
  p["embedding"] = std::move(table);

  init_encoder(p, rng, config, "encoder");
  if (config.conditioned) init_encoder(p, rng, config, "query_encoder");

  if (config.similarity == SimilarityKind::kAdditive) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(m));
    p["attention.W1"] = uniform_tensor(rng, {m, m}, bound);
    p["attention.W2"] = uniform_tensor(rng, {m, m}, bound);
    p["attention.v"] = uniform_tensor(rng, {m, 1}, bound);
  }

  const std::size_t out = config.output == OutputActivation::kSigmoid ? 1 : config.output_arity;
  p["decoder.theta"] = uniform_tensor(rng, {m, out}, 1.0 / std::sqrt(static_cast<double>(m)));
  p["decoder.bias"] = Tensor(Shape{out});
  return model;
}

std::size_t parameter_count(const Parameters& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

std::size_t ForwardTrace::predicted_class() const {
  const auto values = output.values();
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

namespace layers {

Var embed(Var table, std::span<const TokenId> tokens) { return ad::gather_rows(table, tokens); }

Var encode_average(Var embedded, Var projection, Var bias) {
  return ad::relu(ad::add_row(ad::matmul(embedded, projection), bias));
}

Var lstm(Var embedded, const LstmWeights& w, bool reverse) {
  ad::Graph& g = *embedded.graph;
  const std::size_t steps = embedded.value().rows();
  const std::size_t h = w.recurrent.value().rows();
  if (w.input.value().cols() != 4 * h || w.recurrent.value().cols() != 4 * h || w.bias.value().size() != 4 * h) {
    throw ShapeError("lstm: gate blocks do not match hidden size " + std::to_string(h));
  }
  const Var projected = ad::add_row(ad::matmul(embedded, w.input), w.bias);  // T x 4h
  std::vector<Var> states(steps);
  Var state{}, cell{};
  bool first = true;
  for (std::size_t i = 0; i < steps; ++i) {
    const std::size_t t = reverse ? steps - 1 - i : i;
    Var gates = ad::slice_rows(projected, t, t + 1);
    if (!first) gates = ad::add(gates, ad::matmul(state, w.recurrent));
    const Var in = ad::sigmoid(ad::slice_cols(gates, 0, h));
    const Var forget = ad::sigmoid(ad::slice_cols(gates, h, 2 * h));
    const Var candidate = ad::tanh(ad::slice_cols(gates, 2 * h, 3 * h));
    const Var out = ad::sigmoid(ad::slice_cols(gates, 3 * h, 4 * h));
    cell = first ? ad::mul(in, candidate) : ad::add(ad::mul(forget, cell), ad::mul(in, candidate));
    state = ad::mul(out, ad::tanh(cell));
    states[t] = state;
    first = false;
  }
  (void)g;
  return ad::concat_rows(states);
}

Var encode_birnn(Var embedded, const LstmWeights& forward, const LstmWeights& backward) {
  const Var parts[] = {lstm(embedded, forward, false), lstm(embedded, backward, true)};
  return ad::concat_cols(parts);
}

Var encode_conv(Var embedded, std::span<const ConvKernel> kernels) {
  std::vector<Var> maps;
  for (const auto& k : kernels) {
    if (k.width % 2 == 0) throw ShapeError("encode_conv: kernel width must be odd");
    const Var windows = ad::window_rows(embedded, k.width);
    maps.push_back(ad::add_row(ad::matmul(windows, k.weight), k.bias));
  }
  return ad::relu(ad::concat_cols(maps));
}

Var additive_similarity(Var hidden, Var query, Var v, Var w1, Var w2) {
  const std::size_t m = hidden.value().cols(), rows = hidden.value().rows();
  if (query.value().size() != m) throw ShapeError("additive_similarity: query size differs from hidden size");
  const Var projected_query = ad::matmul(ad::reshape(query, Shape{1, m}), w2);
  const Var mixed = ad::tanh(ad::add_row(ad::matmul(hidden, w1), projected_query));
  return ad::reshape(ad::matmul(mixed, v), Shape{rows});
}

Var scaled_dot_similarity(Var hidden, Var query) {
  const std::size_t m = hidden.value().cols(), rows = hidden.value().rows();
  if (query.value().size() != m) throw ShapeError("scaled_dot_similarity: query size differs from hidden size");
  const Var dots = ad::matmul(hidden, ad::reshape(query, Shape{m, 1}));
  return ad::reshape(ad::scale(dots, 1.0 / std::sqrt(static_cast<double>(m))), Shape{rows});
}

Var attend(Var scores, std::span<const bool> mask) { return ad::masked_softmax(scores, mask); }

Var decode(Var hidden, Var alpha, Var theta, Var bias, OutputActivation activation) {
  const std::size_t m = hidden.value().cols();
  if (theta.value().rows() != m) throw ShapeError("decode: theta rows differ from hidden size");
  const Var context = ad::weighted_row_sum(alpha, hidden);
  const std::size_t out = theta.value().cols();
  const Var logits = ad::add(ad::reshape(ad::matmul(ad::reshape(context, Shape{1, m}), theta), Shape{out}), bias);
  if (activation == OutputActivation::kSoftmax) return ad::masked_softmax(logits);
  const Var p = ad::sigmoid(logits);
  const Var parts[] = {ad::add_scalar(ad::scale(p, -1.0), 1.0), p};
  return ad::concat_cols(parts);
}

}  // namespace layers

ForwardGraph build_forward(ad::Graph& graph, const Model& model, std::span<const TokenId> tokens,
                           std::span<const TokenId> query, const ForwardOptions& options) {
  const ModelConfig& c = model.config;
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (c.conditioned && query.empty()) throw std::invalid_argument("forward: conditioned model needs a query");

  ForwardGraph fg;
  for (const auto& [name, value] : model.params) {
    fg.params.emplace(name, graph.leaf(value, options.params_require_grad));
  }
  const Var table = param(fg.params, "embedding");
  for (TokenId id : tokens) {
    if (id >= c.vocab_size) throw std::out_of_range("forward: token id " + std::to_string(id) + " out of range");
  }
  fg.embedded = layers::embed(table, tokens);
  if (options.embedded_leaf) fg.embedded = graph.leaf(fg.embedded.value(), true);
  fg.hidden = build_encoder(c, fg.params, fg.embedded, "encoder");

  if (c.conditioned) {
    for (TokenId id : query) {
      if (id >= c.vocab_size) throw std::out_of_range("forward: query id " + std::to_string(id) + " out of range");
    }
    const Var query_hidden = build_encoder(c, fg.params, layers::embed(table, query), "query_encoder");
    fg.query = summarize_query(c, query_hidden);
  } else {
    fg.query = graph.constant(Tensor(Shape{c.hidden_dim}));
  }

  fg.scores = c.similarity == SimilarityKind::kAdditive
                  ? layers::additive_similarity(fg.hidden, fg.query, param(fg.params, "attention.v"),
                                                param(fg.params, "attention.W1"), param(fg.params, "attention.W2"))
                  : layers::scaled_dot_similarity(fg.hidden, fg.query);
  fg.alpha = layers::attend(fg.scores);
  const Var alpha_in = options.detach_attention ? ad::detach(fg.alpha) : fg.alpha;
  fg.output = layers::decode(fg.hidden, alpha_in, param(fg.params, "decoder.theta"), param(fg.params, "decoder.bias"),
                             c.output);
  fg.context = ad::weighted_row_sum(alpha_in, fg.hidden);
  return fg;
}

ForwardTrace trace_from(const ForwardGraph& fg, std::span<const TokenId> tokens) {
  ForwardTrace t;
  t.tokens.assign(tokens.begin(), tokens.end());
  t.embedded = fg.embedded.value();
  t.hidden = fg.hidden.value();
  t.query = fg.query.value();
  t.scores = fg.scores.value();
  t.alpha = fg.alpha.value();
  t.context = fg.context.value();
  t.output = fg.output.value();
  return t;
}

Tensor embed(std::span<const TokenId> tokens, const Tensor& table) {
  ad::Graph g;
  return layers::embed(g.constant(table), tokens).value();
}

Tensor encode(const Model& model, const Tensor& embedded, std::string_view prefix) {
  ad::Graph g;
  std::map<std::string, Var> vars;
  for (const auto& [name, value] : model.params) {
    if (name.starts_with(prefix)) vars.emplace(name, g.constant(value));
  }
  return build_encoder(model.config, vars, g.constant(embedded), prefix).value();
}

Tensor similarity(const Model& model, const Tensor& hidden, const Tensor& query) {
  ad::Graph g;
  const Var h = g.constant(hidden), q = g.constant(query);
  if (model.config.similarity == SimilarityKind::kScaledDot) return layers::scaled_dot_similarity(h, q).value();
  return layers::additive_similarity(h, q, g.constant(model.params.at("attention.v")),
                                     g.constant(model.params.at("attention.W1")),
                                     g.constant(model.params.at("attention.W2")))
      .value();
}

Tensor attend(const Tensor& scores, std::span<const bool> mask) {
  ad::Graph g;
  return layers::attend(g.constant(scores), mask).value();
}

namespace {

void require_simplex(std::span<const double> alpha, std::size_t rows) {
  if (alpha.size() != rows) {
    throw std::invalid_argument("decode: " + std::to_string(alpha.size()) + " attention weights for " +
                                std::to_string(rows) + " positions");
  }
  double total = 0.0;
  for (double a : alpha) {
    if (!(a >= -1e-6)) throw std::invalid_argument("decode: negative attention weight");
    total += a;
  }
  if (std::fabs(total - 1.0) > 1e-6) throw std::invalid_argument("decode: attention does not sum to 1");
}

}  // namespace

Tensor decode(const Model& model, const Tensor& hidden, std::span<const double> alpha) {
  require_simplex(alpha, hidden.rows());
  ad::Graph g;
  const Var a = g.constant(Tensor::vector({alpha.begin(), alpha.end()}));
  return layers::decode(g.constant(hidden), a, g.constant(model.params.at("decoder.theta")),
                        g.constant(model.params.at("decoder.bias")), model.config.output)
      .value();
}

Tensor decode_logits(const Model& model, const Tensor& hidden, std::span<const double> alpha) {
  require_simplex(alpha, hidden.rows());
  ad::Graph g;
  const std::size_t m = hidden.cols();
  const Var context = ad::weighted_row_sum(g.constant(Tensor::vector({alpha.begin(), alpha.end()})),
                                           g.constant(hidden));
  const Tensor& theta = model.params.at("decoder.theta");
  const Var logits = ad::add(ad::reshape(ad::matmul(ad::reshape(context, Shape{1, m}), g.constant(theta)),
                                         Shape{theta.cols()}),
                             g.constant(model.params.at("decoder.bias")));
  return logits.value();
}

ForwardTrace forward(const Model& model, std::span<const TokenId> tokens, std::span<const TokenId> query) {
  ad::Graph g;
  return trace_from(build_forward(g, model, tokens, query), tokens);
}

ForwardTrace forward(const Model& model, const Instance& instance) {
  return forward(model, instance.tokens, instance.query);
}

}  // namespace attnaudit
