#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <stdexcept>

#include "attnaudit/data.hpp"
#include "attnaudit/model.hpp"

namespace attnaudit {

inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

nlohmann::json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const nlohmann::json& j);

struct Checkpoint {
  Model model;
  std::optional<Vocabulary> vocab;
};

// JSON container: {"format", "version", "config", "vocabulary"?, "parameters": {name: {shape, values}}}.
// Doubles are written in shortest round-trip form, so a save/load cycle is exact.
void save_checkpoint(const Model& model, const Vocabulary* vocab, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace attnaudit
