#include "attnaudit/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <sstream>

#include "attnaudit/checkpoint.hpp"
#include "attnaudit/io.hpp"
#include "attnaudit/parallel.hpp"
#include "attnaudit/plots.hpp"

namespace attnaudit {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view analysis_name(Analysis a) {
  switch (a) {
    case Analysis::kImportance: return "importance";
    case Analysis::kPermutation: return "permutation";
    case Analysis::kAdversarial: return "adversarial";
  }
  return "?";
}

Analysis parse_analysis(std::string_view name) {
  if (name == "importance") return Analysis::kImportance;
  if (name == "permutation" || name == "permute") return Analysis::kPermutation;
  if (name == "adversarial") return Analysis::kAdversarial;
  throw ConfigError("unknown analysis '" + std::string(name) + "' (expected importance, permutation or adversarial)");
}

void ExperimentSpec::validate() const {
  if (out.empty()) throw ConfigError("no output directory given");
  if (permutations == 0) throw ConfigError("permutations must be >= 1");
  if (adversarial.k == 0) throw ConfigError("k must be >= 1");
  if (adversarial.iterations == 0) throw ConfigError("adversarial iterations must be >= 1");
  if (!(adversarial.learning_rate > 0.0)) throw ConfigError("adversarial learning rate must be positive");
  if (!(adversarial.penalty >= 0.0)) throw ConfigError("penalty must be nonnegative");
  if (epsilon && !(*epsilon >= 0.0 && *epsilon <= 1.0)) throw ConfigError("eps must lie in [0, 1]");
  if (histogram_bins == 0) throw ConfigError("histogram bins must be >= 1");
  if (workers == 0) throw ConfigError("workers must be >= 1");
  if (checkpoint && !fs::exists(*checkpoint)) throw ConfigError("checkpoint not found: " + checkpoint->string());
  try {
    train.validate();
    if (!checkpoint) {
      ModelConfig probe = model;
      if (probe.vocab_size == 0) probe.vocab_size = 2;
      probe.validate();
    }
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

std::uint64_t instance_seed(std::uint64_t seed, std::string_view analysis, std::string_view id) {
  std::string key(analysis);
  key += ':';
  key += id;
  // splitmix64 finalizer over the mixed key
  std::uint64_t z = seed * 0x9e3779b97f4a7c15ULL ^ fnv1a(key);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json tau_stats_json(const TauStats& s) {
  return {{"count", s.count},
          {"undefined", s.undefined},
          {"mean", s.mean},
          {"std", s.std},
          {"fraction_significant", optional_json(s.fraction_significant)}};
}

json group_json(const CorrelationGroup& g) {
  return {{"records", g.records},
          {"tau_g", tau_stats_json(g.tau_g)},
          {"tau_loo", tau_stats_json(g.tau_loo)},
          {"tau_g_loo", tau_stats_json(g.tau_g_loo)},
          {"mean_tau_g_loo_minus_tau_loo", optional_json(g.mean_gloo_minus_alpha_loo)},
          {"mean_tau_g_loo_minus_tau_g", optional_json(g.mean_gloo_minus_alpha_g)}};
}

json histogram_json(const Histogram& h, std::string_view file) {
  return {{"range", {h.lo, h.hi}}, {"counts", h.counts}, {"total", h.total()}, {"file", file}};
}

struct Summary {
  double mean = 0.0;
  double median = 0.0;
};

Summary summarize(const std::vector<double>& v) {
  Summary s;
  if (v.empty()) return s;
  double total = 0.0;
  for (double x : v) total += x;
  s.mean = total / static_cast<double>(v.size());
  s.median = median(v);
  return s;
}

template <typename Record, typename ToJson>
void write_records(const fs::path& path, const std::vector<Record>& records, ToJson&& to_json) {
  std::string out;
  for (const auto& r : records) {
    out += to_json(r).dump();
    out += '\n';
  }
  write_text_file(path, out);
}

std::string csv_escape(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

std::string scatter_csv(std::string_view y_name, const std::vector<std::string>& ids, const std::vector<double>& x,
                        const std::vector<double>& y) {
  std::ostringstream out;
  out << "id,max_alpha," << y_name << '\n';
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out << csv_escape(ids[i]) << ',' << format_double(x[i]) << ',' << format_double(y[i]) << '\n';
  }
  return out.str();
}

json scatter_json(std::string_view y_name, const std::vector<std::string>& ids, const std::vector<double>& x,
                  const std::vector<double>& y) {
  json points = json::array();
  for (std::size_t i = 0; i < ids.size(); ++i) points.push_back({{"id", ids[i]}, {"max_alpha", x[i]}, {y_name, y[i]}});
  return points;
}

json by_class_json(const std::vector<std::size_t>& classes, const std::vector<double>& values) {
  std::map<std::size_t, std::vector<double>> grouped;
  for (std::size_t i = 0; i < classes.size(); ++i) grouped[classes[i]].push_back(values[i]);
  json out = json::object();
  for (const auto& [cls, v] : grouped) {
    const Summary s = summarize(v);
    out[std::to_string(cls)] = {{"count", v.size()}, {"mean", s.mean}, {"median", s.median}};
  }
  return out;
}

// Meta block shared by every report. Worker count is left out on purpose:
// it never changes results, so reports stay identical across machines.
json settings_json(const ExperimentSpec& spec, const ModelConfig& model, double epsilon) {
  json analyses = json::array();
  for (Analysis a : spec.analyses) analyses.push_back(analysis_name(a));
  const AdversarialConfig& adv = spec.adversarial;
  return {
      {"analyses", analyses},
      {"seed", spec.seed},
      {"model", config_to_json(model)},
      {"checkpoint", spec.checkpoint ? json(spec.checkpoint->filename().string()) : json(nullptr)},
      {"train",
       {{"learning_rate", spec.train.learning_rate},
        {"beta1", spec.train.beta1},
        {"beta2", spec.train.beta2},
        {"epsilon", spec.train.epsilon},
        {"l2", spec.train.l2},
        {"epochs", spec.train.epochs},
        {"batch_size", spec.train.batch_size},
        {"patience", spec.train.patience},
        {"seed", spec.train.seed}}},
      {"permutations", spec.permutations},
      {"adversarial",
       {{"epsilon", epsilon},
        {"k", adv.k},
        {"penalty", adv.penalty},
        {"learning_rate", adv.learning_rate},
        {"iterations", adv.iterations},
        {"patience", adv.patience},
        {"tolerance", adv.tolerance},
        {"adam_epsilon", adv.adam_epsilon},
        {"init_noise", adv.init_noise},
        {"max_restarts", adv.max_restarts},
        {"restore_feasibility", adv.restore_feasibility}}},
      {"kendall", spec.tau == TauVariant::kB ? "tau-b" : "tau-a"},
      {"histogram_bins", spec.histogram_bins},
      {"heatmap_rescale", spec.heatmap_rescale},
      {"limit", spec.limit},
  };
}

std::string safe_file_name(std::string_view id) {
  std::string out;
  for (char c : id) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') ? c : '_';
  return out;
}

}  // namespace

json importance_record_json(const ImportanceRecord& r) {
  return {{"id", r.id},
          {"class", r.predicted_class},
          {"label", r.label},
          {"tau_g", optional_json(r.tau_g)},
          {"tau_loo", optional_json(r.tau_loo)},
          {"tau_g_loo", optional_json(r.tau_g_loo)},
          {"p_g", r.p_g},
          {"p_loo", r.p_loo},
          {"loo_excluded", r.loo_excluded},
          {"g", r.gradient},
          {"loo", r.loo},
          {"alpha", r.alpha}};
}

json permutation_record_json(const PermutationResult& r) {
  return {{"id", r.id},
          {"class", r.predicted_class},
          {"max_alpha", r.max_alpha},
          {"delta_y_med", r.median_delta},
          {"permutations", r.permutations},
          {"degenerate", r.degenerate}};
}

json adversarial_record_json(const AdversarialResult& r, const std::vector<std::string>& tokens,
                             std::span<const double> original_alpha, std::optional<double> delta_y_med) {
  json adversaries = json::array();
  for (const auto& a : r.adversaries) {
    adversaries.push_back({{"alpha", a.alpha}, {"output", a.output}, {"tvd", a.tvd}, {"jsd", a.jsd}});
  }
  json j{{"id", r.id},
         {"class", r.predicted_class},
         {"eps", r.epsilon},
         {"k", r.k},
         {"max_alpha", r.max_alpha},
         {"eps_max_jsd", r.eps_max_jsd},
         {"adversaries", adversaries},
         {"iterations", r.iterations},
         {"restarts", r.restarts},
         {"learning_rate", r.learning_rate},
         {"objective_non_decreasing", r.objective_non_decreasing},
         {"degenerate", r.degenerate},
         {"trajectory", r.trajectory},
         {"tokens", tokens},
         {"alpha", std::vector<double>(original_alpha.begin(), original_alpha.end())}};
  if (delta_y_med) j["delta_y_med"] = *delta_y_med;
  return j;
}

std::string render_adversarial_heatmap(const json& record, const HeatmapOptions& options) {
  try {
    const auto tokens = record.at("tokens").get<std::vector<std::string>>();
    const auto original = record.at("alpha").get<std::vector<double>>();
    const double eps = record.at("eps").get<double>();
    const json& adversaries = record.at("adversaries");
    if (adversaries.empty()) throw std::invalid_argument("record has no adversaries");
    std::size_t pick = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < adversaries.size(); ++i) {
      const double tvd = adversaries[i].at("tvd").get<double>();
      const double jsd = adversaries[i].at("jsd").get<double>();
      if (tvd <= eps && jsd > best) {
        best = jsd;
        pick = i;
      }
    }
    const json& chosen = adversaries[pick];
    const auto alpha = chosen.at("alpha").get<std::vector<double>>();
    std::ostringstream title;
    title << record.at("id").get<std::string>() << " (JSD " << std::fixed;
    title.precision(3);
    title << chosen.at("jsd").get<double>() << ")";
    return render_heatmap_pair(tokens, original, alpha, chosen.at("tvd").get<double>(), title.str(), options);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed adversarial record: ") + e.what());
  }
}

json run_experiment(const ExperimentSpec& spec, const ProgressFn& progress) {
  spec.validate();
  if (spec.corpus.empty()) throw ConfigError("no corpus given");
  Corpus corpus;
  try {
    corpus = load_corpus(spec.corpus);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("cannot load corpus: ") + e.what());
  }
  return run_experiment(spec, corpus, progress);
}

json run_experiment(const ExperimentSpec& spec, const Corpus& corpus, const ProgressFn& progress) {
  spec.validate();
  auto log = [&](const std::string& msg) {
    if (progress) progress(msg);
  };
  if (corpus.test.empty()) throw ConfigError("corpus has an empty test split");
  const double epsilon = spec.epsilon.value_or(epsilon_for_task(corpus.task));

  json report{{"format", "attnaudit-report"}, {"version", kReportVersion}, {"status", "ok"}};
  report["meta"] = {{"tool_version", kToolVersion},
                    {"corpus",
                     {{"task", task_name(corpus.task)},
                      {"num_classes", corpus.num_classes},
                      {"labels", corpus.label_names},
                      {"vocab_size", corpus.vocab.size()},
                      {"train", corpus.train.size()},
                      {"test", corpus.test.size()}}}};
  report["records"] = json::object();
  report["plots"] = json::object();

  const fs::path out = spec.out;
  auto write_report = [&] { write_text_file(out / "report.json", report.dump(2) + "\n"); };

  std::string stage;
  auto fail = [&](const std::string& what) {
    report["status"] = "failed";
    report["failed_stage"] = stage;
    report["error"] = what;
    try {
      write_report();
    } catch (...) {
    }
    throw ExperimentError(stage, what);
  };

  // Model: load or train.
  Model model;
  stage = "model";
  if (spec.checkpoint) {
    Checkpoint cp;
    try {
      cp = load_checkpoint(*spec.checkpoint);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("cannot load checkpoint: ") + e.what());
    }
    if (cp.vocab && cp.vocab->tokens() != corpus.vocab.tokens()) {
      throw ConfigError("checkpoint vocabulary differs from the corpus vocabulary");
    }
    if (cp.model.config.vocab_size != corpus.vocab.size() || cp.model.config.output_arity < corpus.num_classes) {
      throw ConfigError("checkpoint does not fit the corpus (vocabulary size or output arity)");
    }
    model = std::move(cp.model);
    log("loaded checkpoint " + spec.checkpoint->string());
  } else {
    try {
      TrainConfig train = spec.train;
      train.eval_workers = spec.workers;
      const ModelConfig cfg = fit_config_to_corpus(spec.model, corpus);
      TrainResult result = train_model(corpus, cfg, train, [&](const EpochRecord& r) {
        log("epoch " + std::to_string(r.epoch) + ": train loss " + format_double(r.train_loss) + ", test metric " +
            format_double(r.test_metric));
      });
      model = std::move(result.model);
      save_checkpoint(model, &corpus.vocab, out / "model.json");
      write_history_csv(result.history, out / "plots" / "training_history.csv");
      report["plots"]["training_history"] = "plots/training_history.csv";
      json history = json::array();
      for (const auto& r : result.history) {
        history.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"test_metric", r.test_metric}});
      }
      report["training"] = {{"history", history}, {"clamped_losses", result.clamped_losses}, {"model", "model.json"}};
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    } catch (const std::exception& e) {
      fail(e.what());
    }
  }

  json settings = settings_json(spec, model.config, epsilon);
  report["meta"]["config_hash"] = fnv1a_hex(settings.dump());
  report["meta"]["settings"] = std::move(settings);

  std::vector<const Instance*> test;
  for (const auto& inst : corpus.test) test.push_back(&inst);
  std::sort(test.begin(), test.end(), [](const Instance* a, const Instance* b) { return a->id < b->id; });
  if (spec.limit > 0 && test.size() > spec.limit) test.resize(spec.limit);
  report["meta"]["analysed_instances"] = test.size();

  stage = "evaluate";
  try {
    const Evaluation ev = evaluate(model, corpus.test, corpus.task, spec.workers);
    report["performance"] = {{"metric", ev.metric},
                             {"value", ev.value},
                             {"undefined", ev.undefined},
                             {"correct", ev.correct},
                             {"total", ev.total}};
    log("test " + ev.metric + " = " + format_double(ev.value));
  } catch (const std::exception& e) {
    fail(e.what());
  }

  const std::size_t n = test.size();
  const bool want_perm = spec.analyses.contains(Analysis::kPermutation);
  const bool want_adv = spec.analyses.contains(Analysis::kAdversarial);
  std::vector<ForwardTrace> traces;
  if (want_perm || want_adv) {
    stage = "forward";
    try {
      traces = parallel_map<ForwardTrace>(n, spec.workers, [&](std::size_t i) { return forward(model, *test[i]); });
    } catch (const std::exception& e) {
      fail(e.what());
    }
  }

  if (spec.analyses.contains(Analysis::kImportance)) {
    stage = "importance";
    log("importance over " + std::to_string(n) + " instances");
    try {
      auto records = parallel_map<ImportanceRecord>(
          n, spec.workers, [&](std::size_t i) { return analyze_importance(model, *test[i], spec.tau); });
      write_records(out / "records" / "importance.jsonl", records, importance_record_json);
      report["records"]["importance"] = "records/importance.jsonl";
      const bool any_defined = std::any_of(records.begin(), records.end(),
                                           [](const ImportanceRecord& r) { return r.tau_g || r.tau_loo; });
      json section{{"records", records.size()}};
      if (any_defined) {
        const CorrelationSummary s = aggregate_correlations(records, spec.histogram_bins);
        section["overall"] = group_json(s.overall);
        json by_class = json::object();
        for (const auto& [cls, g] : s.by_class) by_class[std::to_string(cls)] = group_json(g);
        section["by_class"] = by_class;
        write_text_file(out / "plots" / "tau_g_histogram.csv", histogram_csv(s.tau_g_histogram));
        write_text_file(out / "plots" / "tau_loo_histogram.csv", histogram_csv(s.tau_loo_histogram));
        section["tau_g_histogram"] = histogram_json(s.tau_g_histogram, "plots/tau_g_histogram.csv");
        section["tau_loo_histogram"] = histogram_json(s.tau_loo_histogram, "plots/tau_loo_histogram.csv");
        report["plots"]["tau_g_histogram"] = "plots/tau_g_histogram.csv";
        report["plots"]["tau_loo_histogram"] = "plots/tau_loo_histogram.csv";
      } else {
        section["overall"] = nullptr;
      }
      report["importance"] = std::move(section);
    } catch (const std::exception& e) {
      fail(e.what());
    }
  }

  std::vector<std::string> ids(n);
  std::vector<double> max_alpha(n);
  std::vector<std::size_t> classes(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = test[i]->id;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    max_alpha[i] = *std::max_element(traces[i].alpha.values().begin(), traces[i].alpha.values().end());
    classes[i] = traces[i].predicted_class();
  }

  std::vector<PermutationResult> permutations;
  if (want_perm) {
    stage = "permutation";
    log("permutation over " + std::to_string(n) + " instances");
    try {
      permutations = parallel_map<PermutationResult>(n, spec.workers, [&](std::size_t i) {
        PermutationResult r =
            permutation_experiment(model, traces[i], spec.permutations, instance_seed(spec.seed, "permutation", ids[i]));
        r.id = ids[i];
        return r;
      });
      write_records(out / "records" / "permutation.jsonl", permutations, permutation_record_json);
      report["records"]["permutation"] = "records/permutation.jsonl";
      std::vector<double> deltas;
      std::size_t degenerate = 0;
      for (const auto& r : permutations) {
        deltas.push_back(r.median_delta);
        degenerate += r.degenerate ? 1 : 0;
      }
      const Summary s = summarize(deltas);
      write_text_file(out / "plots" / "permutation_scatter.csv", scatter_csv("delta_y_med", ids, max_alpha, deltas));
      report["plots"]["permutation_scatter"] = "plots/permutation_scatter.csv";
      report["permutation"] = {{"records", n},
                               {"degenerate", degenerate},
                               {"delta_y_med", {{"mean", s.mean}, {"median", s.median}}},
                               {"by_class", by_class_json(classes, deltas)},
                               {"scatter", scatter_json("delta_y_med", ids, max_alpha, deltas)}};
    } catch (const std::exception& e) {
      fail(e.what());
    }
  }

  if (want_adv) {
    stage = "adversarial";
    log("adversarial search over " + std::to_string(n) + " instances");
    try {
      AdversarialConfig cfg = spec.adversarial;
      cfg.epsilon = epsilon;
      auto results = parallel_map<AdversarialResult>(n, spec.workers, [&](std::size_t i) {
        AdversarialResult r = adversarial_search(model, traces[i], cfg, instance_seed(spec.seed, "adversarial", ids[i]));
        r.id = ids[i];
        return r;
      });
      std::vector<json> lines(n);
      std::vector<double> best(n);
      std::size_t non_decreasing = 0, restarts = 0, none_feasible = 0;
      for (std::size_t i = 0; i < n; ++i) {
        std::optional<double> dy;
        if (want_perm) dy = permutations[i].median_delta;
        lines[i] = adversarial_record_json(results[i], test[i]->words, traces[i].alpha.values(), dy);
        best[i] = results[i].eps_max_jsd;
        non_decreasing += results[i].objective_non_decreasing ? 1 : 0;
        restarts += results[i].restarts;
        const bool feasible = std::any_of(results[i].adversaries.begin(), results[i].adversaries.end(),
                                          [&](const Adversary& a) { return a.tvd <= epsilon; });
        none_feasible += feasible ? 0 : 1;
      }
      write_records(out / "records" / "adversarial.jsonl", lines, [](const json& j) { return j; });
      report["records"]["adversarial"] = "records/adversarial.jsonl";

      const Histogram h = emit_histogram(best, spec.histogram_bins, kJsdRangeLo, kJsdRangeHi);
      write_text_file(out / "plots" / "eps_max_jsd_histogram.csv", histogram_csv(h));
      write_text_file(out / "plots" / "adversarial_scatter.csv", scatter_csv("eps_max_jsd", ids, max_alpha, best));
      report["plots"]["eps_max_jsd_histogram"] = "plots/eps_max_jsd_histogram.csv";
      report["plots"]["adversarial_scatter"] = "plots/adversarial_scatter.csv";
      const Summary s = summarize(best);
      report["adversarial"] = {
          {"records", n},
          {"epsilon", epsilon},
          {"k", cfg.k},
          {"eps_max_jsd", {{"mean", s.mean}, {"median", s.median}}},
          {"by_class", by_class_json(classes, best)},
          {"objective_non_decreasing_fraction", n == 0 ? 1.0 : static_cast<double>(non_decreasing) / n},
          {"restarts", restarts},
          {"instances_without_feasible_adversary", none_feasible},
          {"eps_max_jsd_histogram", histogram_json(h, "plots/eps_max_jsd_histogram.csv")},
          {"scatter", scatter_json("eps_max_jsd", ids, max_alpha, best)}};

      stage = "heatmaps";
      const HeatmapOptions options{spec.heatmap_rescale};
      json rendered = json::array();
      for (std::size_t i = 0; i < std::min(n, spec.heatmaps); ++i) {
        if (results[i].degenerate) continue;
        const std::string file = "heatmaps/" + safe_file_name(ids[i]) + ".html";
        write_text_file(out / file, render_adversarial_heatmap(lines[i], options));
        rendered.push_back(file);
      }
      report["heatmaps"] = rendered;
    } catch (const std::exception& e) {
      fail(e.what());
    }
  }

  stage = "report";
  try {
    write_report();
  } catch (const std::exception& e) {
    throw ExperimentError(stage, e.what());
  }
  return report;
}

}  // namespace attnaudit
