// audit: train models and run attention-faithfulness analyses from the
// command line. Run `audit --help` for the flag list.

#include <CLI11.hpp>

#include <cctype>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

#include "attnaudit/checkpoint.hpp"
#include "attnaudit/data.hpp"
#include "attnaudit/experiment.hpp"
#include "attnaudit/io.hpp"
#include "attnaudit/parallel.hpp"

namespace fs = std::filesystem;
using namespace attnaudit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

// Config files may group keys under [sections]; the section name is only
// for readability and every key names a top-level flag.
class FlatConfig : public CLI::ConfigINI {
 public:
  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    std::vector<CLI::ConfigItem> out;
    for (auto& item : CLI::ConfigINI::from_config(input)) {
      if (item.name == "++" || item.name == "--") continue;  // section open/close markers
      item.parents.clear();
      out.push_back(std::move(item));
    }
    return out;
  }
};

struct Options {
  std::string corpus;
  std::string out = "audit-out";
  std::string encoder = "birnn";
  std::string similarity = "additive";
  std::string preset = "desk";
  std::optional<std::size_t> embedding_dim;
  std::optional<std::size_t> hidden_dim;
  std::optional<std::string> checkpoint;
  std::uint64_t seed = 1;
  std::size_t workers = 0;

  std::size_t epochs = 10;
  double lr = 1e-3;
  double l2 = 1e-5;
  std::size_t batch_size = 1;
  std::size_t patience = 0;

  std::optional<double> eps;
  std::size_t k = 5;
  std::size_t perms = kDefaultPermutations;
  double penalty = 500.0;
  double adv_lr = 0.1;
  std::size_t adv_iterations = 500;
  std::size_t adv_patience = 25;
  bool no_restore = false;
  std::size_t limit = 0;
  std::size_t bins = 20;
  std::size_t heatmaps = 10;
  bool heatmap_rescale = false;
  std::string tau = "b";
  std::vector<std::string> analyses;
  bool quiet = false;

  // generate
  std::string kind = "planted";
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  double precision = 1.0;
  std::size_t length = 20;
  std::size_t filler_vocab = 200;
  std::size_t sentences = 2;

  // heatmap
  std::string records;
  std::optional<std::string> id;
};

void add_options(CLI::App& app, Options& o) {
  app.add_option("--corpus", o.corpus, "Corpus directory (train.jsonl, test.jsonl, corpus.json)");
  app.add_option("--out", o.out, "Output directory")->capture_default_str();
  app.add_option("--encoder", o.encoder, "Encoder")
      ->check(CLI::IsMember({"average", "birnn", "conv"}))
      ->capture_default_str();
  app.add_option("--similarity", o.similarity, "Attention similarity")
      ->check(CLI::IsMember({"additive", "dot"}))
      ->capture_default_str();
  app.add_option("--preset", o.preset, "Model dimension preset")
      ->check(CLI::IsMember({"desk", "paper", "babi"}))
      ->capture_default_str();
  app.add_option("--embedding-dim", o.embedding_dim, "Override the preset embedding size");
  app.add_option("--hidden-dim", o.hidden_dim, "Override the preset hidden size");
  app.add_option("--checkpoint", o.checkpoint, "Load this model instead of training");
  app.add_option("--seed", o.seed, "Seed for initialization, shuffling and analyses")->capture_default_str();
  app.add_option("--workers", o.workers, "Worker threads (0 = all cores)")->capture_default_str();

  app.add_option("--epochs", o.epochs)->capture_default_str();
  app.add_option("--lr", o.lr, "Adam step for training")->capture_default_str();
  app.add_option("--l2", o.l2)->capture_default_str();
  app.add_option("--batch-size", o.batch_size)->capture_default_str();
  app.add_option("--patience", o.patience, "Early stop after N epochs without improvement (0 = off)")
      ->capture_default_str();

  app.add_option("--eps", o.eps, "Output TVD budget (default 0.01 classification, 0.05 QA)");
  app.add_option("--k", o.k, "Adversaries per instance")->capture_default_str();
  app.add_option("--perms", o.perms, "Permutations per instance")->capture_default_str();
  app.add_option("--penalty", o.penalty, "Constraint penalty weight")->capture_default_str();
  app.add_option("--adv-lr", o.adv_lr, "Adam step for the adversarial search")->capture_default_str();
  app.add_option("--adv-iterations", o.adv_iterations)->capture_default_str();
  app.add_option("--adv-patience", o.adv_patience)->capture_default_str();
  app.add_flag("--no-restore", o.no_restore, "Report raw final adversaries without feasibility restoration");
  app.add_option("--limit", o.limit, "Analyse only the first N test instances (0 = all)")->capture_default_str();
  app.add_option("--bins", o.bins, "Histogram bins")->capture_default_str();
  app.add_option("--heatmaps", o.heatmaps, "Adversarial heatmap pages to render")->capture_default_str();
  app.add_flag("--heatmap-rescale", o.heatmap_rescale, "Scale heatmap saturation by the per-instance maximum");
  app.add_option("--tau", o.tau, "Kendall variant")->check(CLI::IsMember({"a", "b"}))->capture_default_str();
  app.add_option("--analyses", o.analyses, "Analyses for `report` (default: all)")
      ->check(CLI::IsMember({"importance", "permutation", "adversarial"}));
  app.add_flag("-q,--quiet", o.quiet, "No progress output");

  app.add_option("--kind", o.kind, "Generator")->check(CLI::IsMember({"planted", "babi"}))->capture_default_str();
  app.add_option("--train-size", o.train_size, "Generated train instances (0 = generator default)");
  app.add_option("--test-size", o.test_size, "Generated test instances (0 = generator default)");
  app.add_option("--precision", o.precision, "Signal precision of the planted corpus")->capture_default_str();
  app.add_option("--length", o.length, "Planted document length")->capture_default_str();
  app.add_option("--filler-vocab", o.filler_vocab)->capture_default_str();
  app.add_option("--sentences", o.sentences, "Sentences per generated story")->capture_default_str();

  app.add_option("--records", o.records, "adversarial.jsonl for `heatmap`");
  app.add_option("--id", o.id, "Render only this instance");
}

ExperimentSpec make_spec(const Options& o, std::set<Analysis> analyses) {
  ExperimentSpec spec;
  spec.corpus = o.corpus;
  spec.out = o.out;
  if (o.checkpoint) spec.checkpoint = fs::path(*o.checkpoint);
  try {
    spec.model = model_preset(o.preset, parse_encoder(o.encoder));
    spec.model.similarity = parse_similarity(o.similarity);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (o.embedding_dim) spec.model.embedding_dim = *o.embedding_dim;
  if (o.hidden_dim) {
    spec.model.hidden_dim = *o.hidden_dim;
    if (spec.model.encoder == EncoderKind::kConv) {
      const std::size_t kernels = spec.model.kernel_sizes.size();
      if (*o.hidden_dim % kernels != 0) {
        throw ConfigError("--hidden-dim for the conv encoder must be a multiple of " + std::to_string(kernels));
      }
      spec.model.filters.assign(kernels, *o.hidden_dim / kernels);
    }
  }
  spec.model.seed = o.seed;
  spec.train.seed = o.seed;
  spec.train.epochs = o.epochs;
  spec.train.learning_rate = o.lr;
  spec.train.l2 = o.l2;
  spec.train.batch_size = o.batch_size;
  spec.train.patience = o.patience;
  spec.analyses = std::move(analyses);
  spec.epsilon = o.eps;
  spec.adversarial.k = o.k;
  spec.adversarial.penalty = o.penalty;
  spec.adversarial.learning_rate = o.adv_lr;
  spec.adversarial.iterations = o.adv_iterations;
  spec.adversarial.patience = o.adv_patience;
  spec.adversarial.restore_feasibility = !o.no_restore;
  spec.permutations = o.perms;
  spec.seed = o.seed;
  spec.workers = o.workers == 0 ? default_workers() : o.workers;
  spec.histogram_bins = o.bins;
  spec.heatmaps = o.heatmaps;
  spec.heatmap_rescale = o.heatmap_rescale;
  spec.limit = o.limit;
  spec.tau = o.tau == "a" ? TauVariant::kA : TauVariant::kB;
  return spec;
}

int run_analysis(const Options& o, std::set<Analysis> analyses) {
  const ExperimentSpec spec = make_spec(o, std::move(analyses));
  ProgressFn progress;
  if (!o.quiet) progress = [](std::string_view msg) { std::cerr << msg << '\n'; };
  const nlohmann::json report = run_experiment(spec, progress);
  std::cout << "wrote " << (spec.out / "report.json").string() << '\n';
  if (report.contains("performance")) {
    std::cout << report["performance"]["metric"].get<std::string>() << ": "
              << format_double(report["performance"]["value"].get<double>()) << '\n';
  }
  return kExitOk;
}

int run_generate(const Options& o) {
  Corpus corpus;
  try {
    if (o.kind == "planted") {
      PlantedConfig c;
      c.filler_vocab = o.filler_vocab;
      c.length = o.length;
      c.signal_precision = o.precision;
      if (o.train_size > 0) c.train_size = o.train_size;
      if (o.test_size > 0) c.test_size = o.test_size;
      c.seed = o.seed;
      corpus = generate_planted(c);
    } else {
      BabiConfig c;
      if (o.train_size > 0) c.train_size = o.train_size;
      if (o.test_size > 0) c.test_size = o.test_size;
      c.sentences = o.sentences;
      c.seed = o.seed;
      corpus = generate_babi1(c);
    }
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  } catch (const CorpusError& e) {
    throw ConfigError(e.what());
  }
  write_corpus(corpus, o.out);
  std::cout << "wrote " << corpus.train.size() << " train and " << corpus.test.size() << " test instances to "
            << o.out << '\n';
  return kExitOk;
}

int run_heatmap(const Options& o) {
  if (o.records.empty()) throw ConfigError("heatmap needs --records (an adversarial.jsonl file)");
  std::ifstream in(o.records);
  if (!in) throw ConfigError("cannot read " + o.records);
  const HeatmapOptions options{o.heatmap_rescale};
  std::string line;
  std::size_t line_no = 0, written = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(o.records + ":" + std::to_string(line_no) + ": " + e.what());
    }
    const std::string id = record.value("id", "");
    if (o.id && id != *o.id) continue;
    std::string html;
    try {
      html = render_adversarial_heatmap(record, options);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(o.records + ":" + std::to_string(line_no) + ": " + e.what());
    }
    std::string name;
    for (char c : id) name += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_';
    write_text_file(fs::path(o.out) / (name + ".html"), html);
    ++written;
  }
  if (o.id && written == 0) throw ConfigError("no record with id '" + *o.id + "'");
  std::cout << "wrote " << written << " heatmap page(s) to " << o.out << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Audit whether attention weights explain a text model's predictions."};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.set_config("--config", "", "key = value config file; [sections] only group keys, flags override it");
  app.config_formatter(std::make_shared<FlatConfig>());
  app.allow_config_extras(CLI::config_extras_mode::error);

  Options o;
  add_options(app, o);
  auto* generate = app.add_subcommand("generate", "Write a synthetic corpus (--kind planted|babi)");
  auto* train = app.add_subcommand("train", "Train a model and record test performance");
  auto* importance = app.add_subcommand("importance", "Attention vs gradient and leave-one-out rankings");
  auto* permute = app.add_subcommand("permute", "Output change under permuted attention");
  auto* adversarial = app.add_subcommand("adversarial", "Search for divergent attention with the same output");
  auto* report = app.add_subcommand("report", "Run every analysis and write the full report");
  auto* heatmap = app.add_subcommand("heatmap", "Render heatmap pages from adversarial records");
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();
  app.require_subcommand(1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (generate->parsed()) return run_generate(o);
    if (heatmap->parsed()) return run_heatmap(o);
    if (o.corpus.empty()) throw ConfigError("--corpus is required");
    if (train->parsed()) return run_analysis(o, {});
    if (importance->parsed()) return run_analysis(o, {Analysis::kImportance});
    if (permute->parsed()) return run_analysis(o, {Analysis::kPermutation});
    if (adversarial->parsed()) return run_analysis(o, {Analysis::kAdversarial});
    if (report->parsed()) {
      std::set<Analysis> selected;
      for (const auto& name : o.analyses) selected.insert(parse_analysis(name));
      if (selected.empty()) selected = {Analysis::kImportance, Analysis::kPermutation, Analysis::kAdversarial};
      return run_analysis(o, selected);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ExperimentError& e) {
    std::cerr << "failed in stage " << e.stage() << ": " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}
