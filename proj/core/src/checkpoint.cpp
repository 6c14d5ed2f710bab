#include "attnaudit/checkpoint.hpp"

#include <fstream>

namespace attnaudit {

using nlohmann::json;

namespace {
constexpr const char* kFormat = "attnaudit-model";
}

json config_to_json(const ModelConfig& c) {
  return json{
      {"encoder", encoder_name(c.encoder)},
      {"similarity", similarity_name(c.similarity)},
      {"vocab_size", c.vocab_size},
      {"embedding_dim", c.embedding_dim},
      {"hidden_dim", c.hidden_dim},
      {"output_arity", c.output_arity},
      {"output", c.output == OutputActivation::kSigmoid ? "sigmoid" : "softmax"},
      {"kernel_sizes", c.kernel_sizes},
      {"filters", c.filters},
      {"conditioned", c.conditioned},
      {"forget_bias", c.forget_bias},
      {"seed", c.seed},
  };
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.encoder = parse_encoder(j.at("encoder").get<std::string>());
  c.similarity = parse_similarity(j.at("similarity").get<std::string>());
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.embedding_dim = j.at("embedding_dim").get<std::size_t>();
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  c.output_arity = j.at("output_arity").get<std::size_t>();
  const auto out = j.at("output").get<std::string>();
  if (out != "sigmoid" && out != "softmax") throw CheckpointError("unknown output activation '" + out + "'");
  c.output = out == "sigmoid" ? OutputActivation::kSigmoid : OutputActivation::kSoftmax;
  c.kernel_sizes = j.at("kernel_sizes").get<std::vector<std::size_t>>();
  c.filters = j.at("filters").get<std::vector<std::size_t>>();
  c.conditioned = j.at("conditioned").get<bool>();
  c.forget_bias = j.at("forget_bias").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

json tensor_to_json(const Tensor& t) { return json{{"shape", t.shape()}, {"values", t.data()}}; }

Tensor tensor_from_json(const json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("values").get<std::vector<double>>());
}

void save_checkpoint(const Model& model, const Vocabulary* vocab, const std::filesystem::path& path) {
  json params = json::object();
  for (const auto& [name, t] : model.params) params[name] = tensor_to_json(t);
  json j{{"format", kFormat}, {"version", kCheckpointVersion}, {"config", config_to_json(model.config)}};
  if (vocab != nullptr) j["vocabulary"] = vocab->tokens();
  j["parameters"] = std::move(params);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out << j.dump() << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint " + path.string());
  try {
    const json j = json::parse(in);
    if (j.at("format").get<std::string>() != kFormat) throw CheckpointError("not a model checkpoint");
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint cp;
    cp.model.config = config_from_json(j.at("config"));
    cp.model.config.validate();
    for (const auto& [name, t] : j.at("parameters").items()) cp.model.params.emplace(name, tensor_from_json(t));
    const Model reference = init_model(cp.model.config);
    for (const auto& [name, t] : reference.params) {
      auto it = cp.model.params.find(name);
      if (it == cp.model.params.end()) throw CheckpointError("checkpoint is missing parameter '" + name + "'");
      if (it->second.shape() != t.shape()) throw CheckpointError("parameter '" + name + "' has the wrong shape");
    }
    if (cp.model.params.size() != reference.params.size()) throw CheckpointError("checkpoint has extra parameters");
    if (j.contains("vocabulary")) cp.vocab = Vocabulary(j.at("vocabulary").get<std::vector<std::string>>());
    return cp;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed checkpoint " + path.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError("invalid checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace attnaudit
