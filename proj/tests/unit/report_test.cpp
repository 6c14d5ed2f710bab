#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "attnaudit/checkpoint.hpp"
#include "attnaudit/experiment.hpp"
#include "attnaudit/io.hpp"
#include "attnaudit/plots.hpp"
#include "fixtures.hpp"

namespace attnaudit {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

TEST(Histogram, EdgesAndClamping) {
  const std::vector<double> v{-1.0, -0.5, 0.0, 0.5, 1.0, 2.0};
  // bins are half open except the last, which also takes the top edge
  const Histogram h = emit_histogram(v, 4, -1.0, 1.0);
  EXPECT_EQ(h.counts, (std::vector<std::size_t>{1, 1, 1, 3}));
  EXPECT_EQ(h.total(), v.size());
  EXPECT_DOUBLE_EQ(h.bin_lo(1), -0.5);
  EXPECT_DOUBLE_EQ(h.bin_hi(3), 1.0);
}

TEST(Histogram, RejectsBadInput) {
  EXPECT_THROW(emit_histogram(std::vector<double>{}, 4, 0, 1), std::invalid_argument);
  EXPECT_THROW(emit_histogram(std::vector<double>{0.5}, 0, 0, 1), std::invalid_argument);
  EXPECT_THROW(emit_histogram(std::vector<double>{NAN}, 2, 0, 1), std::invalid_argument);
}

TEST(Histogram, UniformSampleIsFlat) {
  Rng rng(314);
  std::vector<double> v(1000);
  for (double& x : v) x = rng.uniform();
  const Histogram h = emit_histogram(v, 10, 0.0, 1.0);
  const double sigma = std::sqrt(1000 * 0.1 * 0.9);
  for (std::size_t c : h.counts) EXPECT_NEAR(static_cast<double>(c), 100.0, 4 * sigma);
}

TEST(Histogram, CsvLayout) {
  const Histogram h = emit_histogram(std::vector<double>{0.1, 0.6}, 2, 0.0, 1.0);
  EXPECT_EQ(histogram_csv(h), "bin_lo,bin_hi,count\n0,0.5,1\n0.5,1,1\n");
}

const std::vector<std::string> kFour{"the", "cat", "sat", "down"};

TEST(Heatmap, UniformWeightsGiveQuarterSaturation) {
  const std::string html = render_heatmap(kFour, std::vector{0.25, 0.25, 0.25, 0.25});
  std::size_t hits = 0;
  for (std::size_t pos = 0; (pos = html.find("rgba(255, 0, 0, 0.2500)", pos)) != std::string::npos; ++pos) ++hits;
  EXPECT_EQ(hits, 4u);
}

TEST(Heatmap, OneHotAndEscaping) {
  const std::vector<std::string> tokens{"<b>", "x"};
  const std::string html = render_heatmap(tokens, std::vector{1.0, 0.0});
  EXPECT_NE(html.find("rgba(255, 0, 0, 1.0000)\">&lt;b&gt;"), std::string::npos) << html;
  EXPECT_NE(html.find("rgba(255, 0, 0, 0.0000)\">x"), std::string::npos);
}

TEST(Heatmap, RescaleByPeak) {
  HeatmapOptions o;
  o.rescale = true;
  const std::string html = render_heatmap(std::vector<std::string>{"a", "b"}, std::vector{0.5, 0.25}, {}, o);
  EXPECT_NE(html.find("1.0000)\">a"), std::string::npos);
  EXPECT_NE(html.find("0.5000)\">b"), std::string::npos);
}

TEST(Heatmap, PairCaptionAndPurity) {
  const std::vector<double> original{0.5, 0.5, 0.0, 0.0}, adversarial{0.0, 0.0, 0.5, 0.5};
  const std::string a = render_heatmap_pair(kFour, original, adversarial, 0.005, "doc 1");
  EXPECT_NE(a.find("\xCE\x94\xC5\xB7: 0.005"), std::string::npos);
  EXPECT_NE(a.find("0.5000)\">the"), std::string::npos);
  EXPECT_NE(a.find("0.5000)\">sat"), std::string::npos);
  EXPECT_EQ(a, render_heatmap_pair(kFour, original, adversarial, 0.005, "doc 1"));
}

TEST(Heatmap, LengthMismatchRejected) {
  EXPECT_THROW(render_heatmap(kFour, std::vector{0.5, 0.5}), std::invalid_argument);
}

TEST(InstanceSeed, DependsOnAllParts) {
  EXPECT_EQ(instance_seed(1, "adversarial", "a"), instance_seed(1, "adversarial", "a"));
  EXPECT_NE(instance_seed(1, "adversarial", "a"), instance_seed(2, "adversarial", "a"));
  EXPECT_NE(instance_seed(1, "adversarial", "a"), instance_seed(1, "permutation", "a"));
  EXPECT_NE(instance_seed(1, "adversarial", "a"), instance_seed(1, "adversarial", "b"));
}

TEST(Analysis, Names) {
  EXPECT_EQ(parse_analysis("permute"), Analysis::kPermutation);
  EXPECT_EQ(parse_analysis(analysis_name(Analysis::kAdversarial)), Analysis::kAdversarial);
  EXPECT_THROW(parse_analysis("saliency"), ConfigError);
}

class ExperimentRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    PlantedConfig pc;
    pc.train_size = 120;
    pc.test_size = 16;
    pc.length = 8;
    pc.filler_vocab = 30;
    corpus_ = new Corpus(generate_planted(pc));
  }
  static void TearDownTestSuite() { delete corpus_; }

  ExperimentSpec spec(const std::string& name, std::set<Analysis> analyses) const {
    ExperimentSpec s;
    s.model = testing::tiny_config(EncoderKind::kAverage, SimilarityKind::kAdditive);
    s.train.epochs = 2;
    s.analyses = std::move(analyses);
    s.permutations = 20;
    s.adversarial.k = 2;
    s.adversarial.iterations = 40;
    s.heatmaps = 3;
    s.out = fs::temp_directory_path() / ("attnaudit-report-" + name);
    fs::remove_all(s.out);
    return s;
  }

  static Corpus* corpus_;
};

Corpus* ExperimentRun::corpus_ = nullptr;

const std::set<Analysis> kAll{Analysis::kImportance, Analysis::kPermutation, Analysis::kAdversarial};

TEST_F(ExperimentRun, OnlySelectedAnalysesAppear) {
  const ExperimentSpec s = spec("perm-only", {Analysis::kPermutation});
  const json report = run_experiment(s, *corpus_);
  EXPECT_EQ(report["status"], "ok");
  EXPECT_TRUE(report.contains("permutation"));
  EXPECT_FALSE(report.contains("importance"));
  EXPECT_FALSE(report.contains("adversarial"));
  EXPECT_FALSE(fs::exists(s.out / "records" / "importance.jsonl"));
  EXPECT_EQ(json::parse(read_text_file(s.out / "report.json")), report);
}

TEST_F(ExperimentRun, AllAnalysesWriteEveryBlock) {
  const ExperimentSpec s = spec("all", kAll);
  const json report = run_experiment(s, *corpus_);
  for (const char* key : {"meta", "performance", "training", "importance", "permutation", "adversarial", "heatmaps"}) {
    EXPECT_TRUE(report.contains(key)) << key;
  }
  for (const auto& [name, path] : report["plots"].items()) {
    EXPECT_TRUE(fs::exists(s.out / path.get<std::string>())) << name;
  }
  for (const char* plot : {"tau_g_histogram", "tau_loo_histogram", "permutation_scatter", "eps_max_jsd_histogram",
                           "adversarial_scatter", "training_history"}) {
    EXPECT_TRUE(report["plots"].contains(plot)) << plot;
  }
  EXPECT_EQ(report["heatmaps"].size(), 3u);

  // every record refers to a test instance and appears once
  std::set<std::string> test_ids;
  for (const Instance& inst : corpus_->test) test_ids.insert(inst.id);
  for (const auto& [name, path] : report["records"].items()) {
    std::ifstream in(s.out / path.get<std::string>());
    std::set<std::string> seen;
    for (std::string line; std::getline(in, line);) {
      const std::string id = json::parse(line).at("id");
      EXPECT_TRUE(test_ids.count(id)) << name << " " << id;
      EXPECT_TRUE(seen.insert(id).second) << name << " " << id;
    }
    EXPECT_EQ(seen.size(), test_ids.size()) << name;
  }
}

TEST_F(ExperimentRun, SameSpecGivesIdenticalFiles) {
  ExperimentSpec a = spec("det-a", kAll);
  ExperimentSpec b = spec("det-b", kAll);
  b.workers = 3;
  run_experiment(a, *corpus_);
  run_experiment(b, *corpus_);
  std::size_t compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a.out)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), a.out);
    ASSERT_TRUE(fs::exists(b.out / rel)) << rel;
    EXPECT_EQ(read_text_file(entry.path()), read_text_file(b.out / rel)) << rel;
    ++compared;
  }
  EXPECT_GT(compared, 8u);
}

TEST_F(ExperimentRun, RecordRoundTripsIntoHeatmap) {
  const ExperimentSpec s = spec("heat", {Analysis::kAdversarial});
  const json report = run_experiment(s, *corpus_);
  std::ifstream in(s.out / report["records"]["adversarial"].get<std::string>());
  std::string line;
  ASSERT_TRUE(std::getline(in, line));
  const json record = json::parse(line);
  const std::string file = "heatmaps/" + record["id"].get<std::string>() + ".html";
  EXPECT_EQ(read_text_file(s.out / file), render_adversarial_heatmap(record));
}

TEST_F(ExperimentRun, InvalidSpecIsConfigError) {
  ExperimentSpec s = spec("bad", kAll);
  s.permutations = 0;
  EXPECT_THROW(run_experiment(s, *corpus_), ConfigError);
  s = spec("bad", kAll);
  s.adversarial.k = 0;
  EXPECT_THROW(run_experiment(s, *corpus_), ConfigError);
}

TEST_F(ExperimentRun, MismatchedCheckpointIsConfigError) {
  const fs::path dir = fs::temp_directory_path() / "attnaudit-report-ckpt";
  fs::create_directories(dir);
  ExperimentSpec s = spec("ckpt", {Analysis::kPermutation});
  ModelConfig other = testing::tiny_config(EncoderKind::kAverage, SimilarityKind::kAdditive);
  other.vocab_size = corpus_->vocab.size() + 5;
  save_checkpoint(init_model(other), nullptr, dir / "m.json");
  s.checkpoint = dir / "m.json";
  EXPECT_THROW(run_experiment(s, *corpus_), ConfigError);
}

}  // namespace
}  // namespace attnaudit
