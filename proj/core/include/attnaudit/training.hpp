#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "attnaudit/autodiff.hpp"
#include "attnaudit/data.hpp"
#include "attnaudit/model.hpp"

namespace attnaudit {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double l2 = 1e-5;
  std::size_t epochs = 10;
  // Instances per Adam step; gradients are averaged over the batch.
  std::size_t batch_size = 1;
  std::uint64_t seed = 1;
  // Stop after this many epochs without test-metric improvement; 0 disables.
  std::size_t patience = 0;
  std::size_t eval_workers = 1;

  void validate() const;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t epoch, const std::string& what)
      : std::runtime_error(what), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

inline constexpr double kProbabilityFloor = 1e-12;

/// -log(max(output[label], 1e-12)) + l2 * sum of squared parameters.
ad::Var loss(ad::Var output, std::size_t label, std::span<const ad::Var> params, double l2);
/// Tensor-level loss of a trace; `clamped` reports whether the floor was hit.
double loss(const ForwardTrace& trace, std::size_t label, const Parameters& params, double l2,
            bool* clamped = nullptr);

struct AdamMoments {
  Tensor first;
  Tensor second;
};

/// One Adam update of a single tensor with bias correction; step counts from 1.
void adam_update(Tensor& param, const Tensor& grad, AdamMoments& moments, std::size_t step, double learning_rate,
                 double beta1, double beta2, double epsilon);

struct AdamState {
  std::map<std::string, AdamMoments> moments;
  std::size_t step = 0;
};

void adam_step(Parameters& params, const Parameters& grads, AdamState& state, const TrainConfig& config);

struct Evaluation {
  std::string metric;  // "f1", "accuracy" or "micro_f1"
  double value = 0.0;
  // F1 with no predicted and no gold positives is reported as 0 and flagged.
  bool undefined = false;
  std::size_t total = 0;
  std::size_t correct = 0;
};

/// F1 of the positive class for binary classification, accuracy for QA and
/// micro-F1 for NLI-style tasks.
Evaluation score_predictions(std::span<const std::size_t> predicted, std::span<const std::size_t> gold, TaskKind task);
Evaluation evaluate(const Model& model, std::span<const Instance> split, TaskKind task, std::size_t workers = 1);

struct EpochRecord {
  std::size_t epoch = 0;  // 0 is the untrained model
  double train_loss = 0.0;
  double test_metric = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<EpochRecord> history;
  std::size_t clamped_losses = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Builds output arity/activation from the corpus, initializes from
/// model_config.seed and trains with per-epoch shuffles drawn from
/// train_config.seed.
ModelConfig fit_config_to_corpus(ModelConfig config, const Corpus& corpus);
TrainResult train_model(const Corpus& corpus, const ModelConfig& model_config, const TrainConfig& train_config,
                        const EpochCallback& on_epoch = {});

/// CSV: epoch,train_loss,test_metric
void write_history_csv(std::span<const EpochRecord> history, const std::filesystem::path& path);

}  // namespace attnaudit
