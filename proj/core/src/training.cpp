#include "attnaudit/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "attnaudit/io.hpp"
#include "attnaudit/parallel.hpp"
#include "attnaudit/random.hpp"

namespace attnaudit {

using ad::Var;

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train config: learning rate must be positive");
  if (!(l2 >= 0.0)) throw std::invalid_argument("train config: l2 lambda must be nonnegative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("train config: Adam betas must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw std::invalid_argument("train config: Adam epsilon must be positive");
  if (batch_size < 1) throw std::invalid_argument("train config: batch size must be >= 1");
}

Var loss(Var output, std::size_t label, std::span<const Var> params, double l2) {
  const std::size_t arity = output.value().size();
  if (label >= arity) {
    throw std::invalid_argument("loss: label " + std::to_string(label) + " outside " + std::to_string(arity) +
                                " classes");
  }
  Var nll = ad::scale(ad::log(ad::clamp_min(ad::slice_cols(output, label, label + 1), kProbabilityFloor)), -1.0);
  Var total = ad::sum(nll);
  if (l2 > 0.0) {
    for (Var p : params) total = ad::add(total, ad::scale(ad::sum(ad::mul(p, p)), l2));
  }
  return total;
}

double loss(const ForwardTrace& trace, std::size_t label, const Parameters& params, double l2, bool* clamped) {
  if (label >= trace.output.size()) throw std::invalid_argument("loss: label outside output arity");
  const double prob = trace.output[label];
  if (clamped != nullptr) *clamped = prob < kProbabilityFloor;
  double value = -std::log(std::max(prob, kProbabilityFloor));
  if (l2 > 0.0) {
    // Same per-tensor accumulation order as the graph version.
    for (const auto& [name, t] : params) {
      double sq = 0.0;
      for (double v : t.values()) sq += v * v;
      value += sq * l2;
    }
  }
  return value;
}

void adam_update(Tensor& param, const Tensor& grad, AdamMoments& moments, std::size_t step, double learning_rate,
                 double beta1, double beta2, double epsilon) {
  if (grad.shape() != param.shape()) {
    throw ShapeError("adam: gradient " + shape_to_string(grad.shape()) + " for parameter " +
                     shape_to_string(param.shape()));
  }
  if (moments.first.shape() != param.shape()) {
    moments.first = Tensor(param.shape());
    moments.second = Tensor(param.shape());
  }
  const double correction1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double correction2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    moments.first[i] = beta1 * moments.first[i] + (1.0 - beta1) * g;
    moments.second[i] = beta2 * moments.second[i] + (1.0 - beta2) * g * g;
    const double m_hat = moments.first[i] / correction1;
    const double v_hat = moments.second[i] / correction2;
    param[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + epsilon);
  }
}

void adam_step(Parameters& params, const Parameters& grads, AdamState& state, const TrainConfig& config) {
  ++state.step;
  for (auto& [name, value] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    adam_update(value, it->second, state.moments[name], state.step, config.learning_rate, config.beta1, config.beta2,
                config.epsilon);
  }
}

Evaluation score_predictions(std::span<const std::size_t> predicted, std::span<const std::size_t> gold,
                             TaskKind task) {
  if (predicted.size() != gold.size()) throw std::invalid_argument("score_predictions: length mismatch");
  if (gold.empty()) throw std::invalid_argument("score_predictions: empty split");
  Evaluation e;
  e.total = gold.size();
  for (std::size_t i = 0; i < gold.size(); ++i) e.correct += predicted[i] == gold[i] ? 1 : 0;
  switch (task) {
    case TaskKind::kBinaryClassification: {
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < gold.size(); ++i) {
        tp += predicted[i] == 1 && gold[i] == 1;
        fp += predicted[i] == 1 && gold[i] != 1;
        fn += predicted[i] != 1 && gold[i] == 1;
      }
      e.metric = "f1";
      e.undefined = tp + fp == 0;
      const double denom = static_cast<double>(2 * tp + fp + fn);
      e.value = denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
      break;
    }
    case TaskKind::kQA:
      e.metric = "accuracy";
      e.value = static_cast<double>(e.correct) / static_cast<double>(e.total);
      break;
    case TaskKind::kNLI:
      // Single-label multi-class: micro-F1 equals accuracy.
      e.metric = "micro_f1";
      e.value = static_cast<double>(e.correct) / static_cast<double>(e.total);
      break;
  }
  return e;
}

Evaluation evaluate(const Model& model, std::span<const Instance> split, TaskKind task, std::size_t workers) {
  const auto predicted = parallel_map<std::size_t>(split.size(), workers, [&](std::size_t i) {
    return forward(model, split[i]).predicted_class();
  });
  std::vector<std::size_t> gold;
  gold.reserve(split.size());
  for (const auto& inst : split) gold.push_back(inst.label);
  return score_predictions(predicted, gold, task);
}

ModelConfig fit_config_to_corpus(ModelConfig config, const Corpus& corpus) {
  config.vocab_size = corpus.vocab.size();
  config.output_arity = corpus.num_classes;
  config.output = corpus.task == TaskKind::kBinaryClassification && corpus.num_classes == 2
                      ? OutputActivation::kSigmoid
                      : OutputActivation::kSoftmax;
  config.conditioned = corpus.conditioned();
  return config;
}

namespace {

double mean_loss(const Model& model, std::span<const Instance> split, double l2, std::size_t workers) {
  const auto losses = parallel_map<double>(split.size(), workers, [&](std::size_t i) {
    return loss(forward(model, split[i]), split[i].label, model.params, l2);
  });
  double total = 0.0;
  for (double v : losses) total += v;
  return total / static_cast<double>(split.size());
}

}  // namespace

TrainResult train_model(const Corpus& corpus, const ModelConfig& model_config, const TrainConfig& train_config,
                        const EpochCallback& on_epoch) {
  train_config.validate();
  if (corpus.train.empty()) throw std::invalid_argument("train_model: empty train split");
  const std::span<const Instance> eval_split = corpus.test.empty() ? std::span<const Instance>(corpus.train)
                                                                   : std::span<const Instance>(corpus.test);

  TrainResult result{init_model(fit_config_to_corpus(model_config, corpus)), {}, 0};
  Model& model = result.model;
  Rng rng(train_config.seed);
  AdamState adam;
  std::vector<std::size_t> order(corpus.train.size());
  std::iota(order.begin(), order.end(), 0);

  auto record = [&](EpochRecord r) {
    result.history.push_back(r);
    if (on_epoch) on_epoch(r);
  };
  record({0, mean_loss(model, corpus.train, train_config.l2, train_config.eval_workers),
          evaluate(model, eval_split, corpus.task, train_config.eval_workers).value});

  Parameters grads;
  for (const auto& [name, t] : model.params) grads[name] = Tensor(t.shape());
  double best_metric = result.history.back().test_metric;
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= train_config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t in_batch = 0;
    auto flush = [&] {
      if (in_batch == 0) return;
      if (in_batch > 1) {
        const double inv = 1.0 / static_cast<double>(in_batch);
        for (auto& [name, g] : grads) {
          for (double& v : g.values()) v *= inv;
        }
      }
      adam_step(model.params, grads, adam, train_config);
      for (auto& [name, g] : grads) std::fill(g.values().begin(), g.values().end(), 0.0);
      in_batch = 0;
    };

    for (std::size_t idx : order) {
      const Instance& inst = corpus.train[idx];
      ad::Graph graph;
      ForwardOptions options;
      options.params_require_grad = true;
      const ForwardGraph fg = build_forward(graph, model, inst.tokens, inst.query, options);
      std::vector<Var> params;
      params.reserve(fg.params.size());
      for (const auto& [name, v] : fg.params) params.push_back(v);
      const Var objective = loss(fg.output, inst.label, params, train_config.l2);
      const double value = objective.value()[0];
      if (!std::isfinite(value)) {
        throw TrainingDiverged(epoch, "training diverged at epoch " + std::to_string(epoch) + " on instance '" +
                                          inst.id + "' (non-finite loss)");
      }
      if (fg.output.value()[inst.label] < kProbabilityFloor) ++result.clamped_losses;
      epoch_loss += value;
      graph.backward(objective);
      for (const auto& [name, v] : fg.params) {
        Tensor& acc = grads.at(name);
        const Tensor& g = v.grad();
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
      }
      if (++in_batch == train_config.batch_size) flush();
    }
    flush();

    const double metric = evaluate(model, eval_split, corpus.task, train_config.eval_workers).value;
    record({epoch, epoch_loss / static_cast<double>(order.size()), metric});

    if (train_config.patience > 0) {
      if (metric > best_metric) {
        best_metric = metric;
        since_best = 0;
      } else if (++since_best >= train_config.patience) {
        break;
      }
    }
  }
  return result;
}

void write_history_csv(std::span<const EpochRecord> history, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "epoch,train_loss,test_metric\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << format_double(r.train_loss) << ',' << format_double(r.test_metric) << '\n';
  }
  write_text_file(path, out.str());
}

}  // namespace attnaudit
