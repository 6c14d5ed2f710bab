#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "attnaudit/counterfactual.hpp"
#include "attnaudit/data.hpp"
#include "attnaudit/importance.hpp"
#include "attnaudit/model.hpp"
#include "attnaudit/training.hpp"

namespace attnaudit {

inline constexpr std::string_view kToolVersion = "1.0.0";
inline constexpr int kReportVersion = 1;

/// Bad user input: unreadable corpus, inconsistent settings, mismatched
/// checkpoint. The CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A stage failed after the configuration was accepted (exit code 3).
class ExperimentError : public std::runtime_error {
 public:
  ExperimentError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

enum class Analysis : std::uint8_t { kImportance, kPermutation, kAdversarial };

std::string_view analysis_name(Analysis a);
Analysis parse_analysis(std::string_view name);

struct ExperimentSpec {
  // Read by the loading overload of run_experiment only.
  std::filesystem::path corpus;
  // Load this model instead of training one.
  std::optional<std::filesystem::path> checkpoint;
  ModelConfig model;
  TrainConfig train;
  std::set<Analysis> analyses;
  // Defaults to epsilon_for_task of the corpus.
  std::optional<double> epsilon;
  AdversarialConfig adversarial;  // epsilon here is ignored in favour of the field above
  std::size_t permutations = kDefaultPermutations;
  std::filesystem::path out;
  std::uint64_t seed = 1;
  // Worker threads for per-instance analyses; results do not depend on it.
  std::size_t workers = 1;
  std::size_t histogram_bins = 20;
  // Adversarial heatmap pairs rendered for the first N test instances.
  std::size_t heatmaps = 10;
  bool heatmap_rescale = false;
  // Analyse only the first N test instances (by id); 0 means all.
  std::size_t limit = 0;
  TauVariant tau = TauVariant::kB;

  /// Throws ConfigError.
  void validate() const;
};

/// Seed for one instance of one analysis; independent of processing order.
std::uint64_t instance_seed(std::uint64_t seed, std::string_view analysis, std::string_view id);

using ProgressFn = std::function<void(std::string_view)>;

/// Trains or loads the model, runs the selected analyses over the test
/// split and writes report.json, records/*.jsonl, plots/*.csv and
/// heatmaps/*.html under spec.out. Returns the report. On a stage failure a
/// report flagged "status": "failed" is still written before rethrowing.
nlohmann::json run_experiment(const ExperimentSpec& spec, const ProgressFn& progress = {});
nlohmann::json run_experiment(const ExperimentSpec& spec, const Corpus& corpus, const ProgressFn& progress = {});

// Record serialization (one JSON object per line in the record files).
nlohmann::json importance_record_json(const ImportanceRecord& r);
nlohmann::json permutation_record_json(const PermutationResult& r);
/// Adds the surface tokens and original attention so heatmaps can be
/// rendered from the record alone.
nlohmann::json adversarial_record_json(const AdversarialResult& r, const std::vector<std::string>& tokens,
                                       std::span<const double> original_alpha, std::optional<double> delta_y_med);

/// Renders the heatmap pair for one adversarial record: the original
/// attention beside the feasible adversary with the largest JSD (the first
/// adversary when none is feasible).
std::string render_adversarial_heatmap(const nlohmann::json& record, const HeatmapOptions& options = {});

}  // namespace attnaudit
