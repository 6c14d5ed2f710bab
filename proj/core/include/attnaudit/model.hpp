#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "attnaudit/autodiff.hpp"
#include "attnaudit/data.hpp"
#include "attnaudit/tensor.hpp"

namespace attnaudit {

enum class EncoderKind : std::uint8_t { kAverage, kBiRNN, kConv };
enum class SimilarityKind : std::uint8_t { kAdditive, kScaledDot };
enum class OutputActivation : std::uint8_t { kSigmoid, kSoftmax };

std::string_view encoder_name(EncoderKind kind);
EncoderKind parse_encoder(std::string_view name);
std::string_view similarity_name(SimilarityKind kind);
SimilarityKind parse_similarity(std::string_view name);

struct ModelConfig {
  EncoderKind encoder = EncoderKind::kBiRNN;
  SimilarityKind similarity = SimilarityKind::kAdditive;
  std::size_t vocab_size = 0;
  std::size_t embedding_dim = 64;
  std::size_t hidden_dim = 32;
  std::size_t output_arity = 2;
  OutputActivation output = OutputActivation::kSigmoid;
  // Convolutional encoder: odd kernel widths and filters per kernel; the
  // filter counts must sum to hidden_dim.
  std::vector<std::size_t> kernel_sizes{1, 3};
  std::vector<std::size_t> filters{16, 16};
  // Adds a query encoder whose summary conditions the attention scores.
  bool conditioned = false;
  double forget_bias = 1.0;
  std::uint64_t seed = 1;

  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;
};

/// Named dimension presets: "desk" (64/32), "paper" (300/128, conv
/// [1,3,5,7]x64, average projection 256) and "babi" (50/30, conv [1,3,5,7]x8).
ModelConfig model_preset(std::string_view name, EncoderKind encoder);

/// Named parameter tensors, ordered by name.
using Parameters = std::map<std::string, Tensor>;

struct Model {
  ModelConfig config;
  Parameters params;
};

/// Seeded initialization: embeddings from a standard Gaussian, LSTM weights
/// uniform in +-1/sqrt(hidden_dim) with zero biases except forget gates,
/// other weights uniform in +-1/sqrt(fan_in) with zero biases.
Model init_model(const ModelConfig& config);

std::size_t parameter_count(const Parameters& params);

/// Per-instance record of every intermediate of the forward pass.
struct ForwardTrace {
  std::vector<TokenId> tokens;
  Tensor embedded;  // T x d
  Tensor hidden;    // T x m
  Tensor query;     // m, zeros when unconditioned
  Tensor scores;    // T
  Tensor alpha;     // T, on the simplex
  Tensor context;   // m
  Tensor output;    // |Y|; binary sigmoid output is stored as [1 - p, p]

  std::size_t length() const { return tokens.size(); }
  std::size_t predicted_class() const;
};

// Graph-level building blocks. Each takes parameter variables so callers
// choose which tensors carry gradients.
namespace layers {

struct LstmWeights {
  ad::Var input;      // d x 4h (gate order: input, forget, candidate, output)
  ad::Var recurrent;  // h x 4h
  ad::Var bias;       // 4h
};

struct ConvKernel {
  std::size_t width = 1;
  ad::Var weight;  // (width * d) x filters
  ad::Var bias;    // filters
};

ad::Var embed(ad::Var table, std::span<const TokenId> tokens);
ad::Var encode_average(ad::Var embedded, ad::Var projection, ad::Var bias);
/// Runs one LSTM direction; reverse processes positions T-1..0 but returns
/// states in input order.
ad::Var lstm(ad::Var embedded, const LstmWeights& w, bool reverse);
ad::Var encode_birnn(ad::Var embedded, const LstmWeights& forward, const LstmWeights& backward);
ad::Var encode_conv(ad::Var embedded, std::span<const ConvKernel> kernels);
ad::Var additive_similarity(ad::Var hidden, ad::Var query, ad::Var v, ad::Var w1, ad::Var w2);
ad::Var scaled_dot_similarity(ad::Var hidden, ad::Var query);
ad::Var attend(ad::Var scores, std::span<const bool> mask = {});
/// softmax/sigmoid(theta . sum_t alpha_t h_t + bias).
ad::Var decode(ad::Var hidden, ad::Var alpha, ad::Var theta, ad::Var bias, OutputActivation activation);

}  // namespace layers

struct ForwardOptions {
  bool params_require_grad = false;
  // Makes the embedded document a leaf so gradients w.r.t. x_e are kept.
  bool embedded_leaf = false;
  // Cuts the graph at the attention weights: alpha is treated as an input.
  bool detach_attention = false;
  ad::GraphOptions graph;
};

struct ForwardGraph {
  std::map<std::string, ad::Var> params;
  ad::Var embedded, hidden, query, scores, alpha, context, output;
};

ForwardGraph build_forward(ad::Graph& graph, const Model& model, std::span<const TokenId> tokens,
                           std::span<const TokenId> query, const ForwardOptions& options = {});

ForwardTrace trace_from(const ForwardGraph& fg, std::span<const TokenId> tokens);

// Tensor-level entry points (each runs on a private graph).
Tensor embed(std::span<const TokenId> tokens, const Tensor& table);
Tensor encode(const Model& model, const Tensor& embedded, std::string_view prefix = "encoder");
Tensor similarity(const Model& model, const Tensor& hidden, const Tensor& query);
Tensor attend(const Tensor& scores, std::span<const bool> mask = {});
/// Decodes with an arbitrary attention distribution over fixed hidden
/// states. Throws std::invalid_argument if alpha is off the simplex by > 1e-6.
Tensor decode(const Model& model, const Tensor& hidden, std::span<const double> alpha);
/// Decoder pre-activation (theta . h_alpha + bias).
Tensor decode_logits(const Model& model, const Tensor& hidden, std::span<const double> alpha);

ForwardTrace forward(const Model& model, std::span<const TokenId> tokens, std::span<const TokenId> query = {});
ForwardTrace forward(const Model& model, const Instance& instance);

}  // namespace attnaudit
