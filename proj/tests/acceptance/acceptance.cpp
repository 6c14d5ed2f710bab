// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails. Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "attnaudit/counterfactual.hpp"
#include "attnaudit/data.hpp"
#include "attnaudit/experiment.hpp"
#include "attnaudit/io.hpp"
#include "attnaudit/metrics.hpp"
#include "attnaudit/parallel.hpp"
#include "fixtures.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace attnaudit;

namespace {

constexpr double kLn2 = std::numbers::ln2;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

fs::path work_root() {
  static const fs::path root = [] {
    const fs::path p = fs::temp_directory_path() / "attnaudit-acceptance";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

std::vector<json> read_records(const fs::path& file) {
  std::vector<json> out;
  std::ifstream in(file);
  for (std::string line; std::getline(in, line);) out.push_back(json::parse(line));
  return out;
}

// 1. Gradients of the full loss against central differences.
Outcome gradient_correctness() {
  const auto start = Clock::now();
  double worst = 0.0;
  std::string where;
  std::size_t checks = 0;
  for (EncoderKind e : testing::all_encoders()) {
    for (SimilarityKind s : testing::all_similarities()) {
      for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const bool conditioned = seed % 2 == 0;
        const Model model = init_model(testing::tiny_config(e, s, conditioned, seed));
        Rng rng(seed * 7919);
        const std::size_t length = 1 + (seed - 1) % 8;
        const auto tokens = testing::random_tokens(rng, length, 10);
        const auto query = conditioned ? testing::random_tokens(rng, 3, 10) : std::vector<TokenId>{};
        const auto r = testing::compare_model_gradients(model, tokens, query, seed % 2);
        ++checks;
        if (r.max_relative_error > worst) {
          worst = r.max_relative_error;
          where = std::string(encoder_name(e)) + "/" + std::string(similarity_name(s)) + " seed " +
                  std::to_string(seed) + " " + r.worst;
        }
      }
    }
  }
  const double elapsed = seconds_since(start);
  return {worst < 1e-4 && elapsed < 60.0, std::to_string(checks) + " models, max rel err " +
                                              fmt(worst * 1e6, 3) + "e-6 (" + where + "), " + fmt(elapsed, 1) + " s"};
}

// Brute-force references written from the definitions.
double tvd_reference(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::fabs(p[i] - q[i]);
  return 0.5 * s;
}

double jsd_reference(const std::vector<double>& p, const std::vector<double>& q) {
  double a = 0.0, b = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0) a += p[i] * std::log(p[i] / m);
    if (q[i] > 0) b += q[i] * std::log(q[i] / m);
  }
  return 0.5 * a + 0.5 * b;
}

std::optional<double> tau_b_reference(const std::vector<double>& x, const std::vector<double>& y) {
  long long concordant = 0, discordant = 0, tx = 0, ty = 0, pairs = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      ++pairs;
      const double dx = x[i] - x[j], dy = y[i] - y[j];
      if (dx == 0) ++tx;
      if (dy == 0) ++ty;
      if (dx == 0 || dy == 0) continue;
      (dx * dy > 0 ? concordant : discordant) += 1;
    }
  }
  if (tx == pairs || ty == pairs) return std::nullopt;
  // tau-b lies in [-1, 1]; sqrt(n) * sqrt(n) can round just above n
  return std::clamp(static_cast<double>(concordant - discordant) /
                        (std::sqrt(static_cast<double>(pairs - tx)) * std::sqrt(static_cast<double>(pairs - ty))),
                    -1.0, 1.0);
}

std::vector<double> random_distribution(Rng& rng, std::size_t n) {
  std::vector<double> p(n);
  double total = 0.0;
  while (total == 0.0) {
    for (double& v : p) v = rng.bernoulli(0.2) ? 0.0 : rng.uniform();
    total = 0.0;
    for (double v : p) total += v;
  }
  for (double& v : p) v /= total;
  return p;
}

// 2. Metric oracles.
Outcome metric_oracles() {
  Rng rng(2);
  std::size_t tau_mismatch = 0;
  double tvd_err = 0.0, jsd_err = 0.0, jsd_max = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(30);
    std::vector<double> a(n), b(n);
    const std::size_t alphabet = trial % 3 == 0 ? 4 : 1000;
    for (double& v : a) v = static_cast<double>(rng.below(alphabet));
    for (double& v : b) v = rng.uniform();
    const auto want = tau_b_reference(a, b);
    for (const auto& got : {kendall_tau(a, b), kendall_tau_fast(a, b)}) {
      if (want.has_value() != got.has_value() || (want && *want != *got)) ++tau_mismatch;
    }
    const auto p = random_distribution(rng, n), q = random_distribution(rng, n);
    tvd_err = std::max(tvd_err, std::fabs(tvd(p, q) - tvd_reference(p, q)));
    jsd_err = std::max(jsd_err, std::fabs(jsd(p, q) - jsd_reference(p, q)));
    jsd_max = std::max(jsd_max, jsd(p, q));
  }
  // the bound is attained by disjoint supports
  const double disjoint = jsd(std::vector{1.0, 0.0}, std::vector{0.0, 1.0});
  jsd_max = std::max(jsd_max, disjoint);
  const bool ok = tau_mismatch == 0 && tvd_err <= 1e-12 && jsd_err <= 1e-12 && jsd_max <= kLn2 + 1e-12;
  return {ok, "tau mismatches " + std::to_string(tau_mismatch) + ", max tvd err " + fmt(tvd_err * 1e15, 2) +
                  "e-15, max jsd err " + fmt(jsd_err * 1e15, 2) + "e-15, max jsd " + fmt(jsd_max, 6) +
                  " (ln2 " + fmt(kLn2, 6) + ")"};
}

// 3. bAbI-style anchor on one core.
Outcome babi_anchor() {
  BabiConfig bc;
  bc.train_size = 1000;
  bc.test_size = 1000;
  bc.seed = 1;
  const Corpus corpus = generate_babi1(bc);
  ExperimentSpec spec;
  spec.model = model_preset("babi", EncoderKind::kBiRNN);
  spec.model.similarity = SimilarityKind::kAdditive;
  spec.train.epochs = 10;
  spec.workers = 1;
  spec.out = work_root() / "babi";
  const auto start = Clock::now();
  const json report = run_experiment(spec, corpus);
  const double elapsed = seconds_since(start);
  const double accuracy = report["performance"]["value"];
  return {accuracy >= 0.95 && elapsed < 600.0,
          "test accuracy " + fmt(accuracy, 3) + " after " + fmt(elapsed, 1) + " s on one worker"};
}

// alpha^gamma renormalized, with gamma >= 1 chosen by bisection so the
// largest weight lands in [peak, peak + 1e-4].
std::vector<double> sharpen(std::span<const double> alpha, double peak) {
  const double top = *std::max_element(alpha.begin(), alpha.end());
  auto powered = [&](double gamma) {
    std::vector<double> out(alpha.size());
    double total = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) total += out[i] = std::pow(alpha[i] / top, gamma);
    for (double& v : out) v /= total;
    return out;
  };
  auto max_of = [](const std::vector<double>& v) { return *std::max_element(v.begin(), v.end()); };
  if (max_of(powered(1.0)) >= peak) return powered(1.0);
  double lo = 1.0, hi = 2.0;
  while (max_of(powered(hi)) < peak) hi *= 2.0;
  std::vector<double> out = powered(hi);
  for (int i = 0; i < 200 && max_of(out) > peak + 1e-4; ++i) {
    const double mid = 0.5 * (lo + hi);
    std::vector<double> trial = powered(mid);
    if (max_of(trial) >= peak) {
      hi = mid;
      out = std::move(trial);
    } else {
      lo = mid;
    }
  }
  return out;
}

// 4. Tied hidden states on the decoder's value path.
Outcome tied_hidden() {
  ModelConfig mc = model_preset("desk", EncoderKind::kBiRNN);
  mc.vocab_size = 50;
  const Model model = init_model(mc);
  Rng rng(4);
  std::size_t bad_perm = 0, bad_adv = 0;
  double worst_perm = 0.0, worst_jsd = kLn2;
  for (std::size_t i = 0; i < 50; ++i) {
    const auto tokens = testing::random_tokens(rng, 2 + rng.below(29), mc.vocab_size);
    const ForwardTrace real = forward(model, tokens);
    Tensor tied(real.hidden.shape());
    for (std::size_t t = 0; t < tied.rows(); ++t) {
      for (std::size_t j = 0; j < tied.cols(); ++j) tied.at(t, j) = real.hidden.at(0, j);
    }
    const ForwardTrace trace = testing::make_trace(model, tied, sharpen(real.alpha.values(), 0.999));
    const double delta = permutation_experiment(model, trace, kDefaultPermutations, 10 + i).median_delta;
    AdversarialConfig cfg;
    const double best = adversarial_search(model, trace, cfg, 10 + i).eps_max_jsd;
    worst_perm = std::max(worst_perm, delta);
    worst_jsd = std::min(worst_jsd, best);
    bad_perm += delta == 0.0 ? 0 : 1;
    bad_adv += best >= 0.99 * kLn2 ? 0 : 1;
  }
  return {bad_perm == 0 && bad_adv == 0,
          "50 instances: max median delta " + fmt(worst_perm, 17) + ", min eps-max JSD " + fmt(worst_jsd, 5) +
              " (0.99 ln2 = " + fmt(0.99 * kLn2, 5) + "), failures perm " + std::to_string(bad_perm) + " adv " +
              std::to_string(bad_adv)};
}

// 5. Two-position toys against a grid search.
Outcome grid_optimality() {
  Rng rng(5);
  double worst = 0.0, worst_tvd = 0.0;
  std::size_t violations = 0;
  AdversarialConfig cfg;
  for (std::size_t i = 0; i < 50; ++i) {
    auto [model, trace] = testing::sensitive_pair(rng);
    const AdversarialResult r = adversarial_search(model, trace, cfg, 50 + i);
    const double grid = testing::grid_eps_max_jsd(model, trace, cfg.epsilon);
    worst = std::max(worst, std::fabs(r.eps_max_jsd - grid));
    for (const Adversary& a : r.adversaries) {
      const double measured = tvd(decode(model, trace.hidden, a.alpha).values(), trace.output.values());
      worst_tvd = std::max(worst_tvd, measured);
      violations += measured <= cfg.epsilon ? 0 : 1;
    }
  }
  return {worst <= 0.02 && violations == 0, "50 toys: max |search - grid| " + fmt(worst, 4) +
                                                 ", max candidate TVD " + fmt(worst_tvd, 5) + " (eps 0.01), " +
                                                 std::to_string(violations) + " violations"};
}

// Shared planted-corpus runs for criteria 6 and 7.
struct PlantedRuns {
  Corpus corpus;
  std::map<std::pair<std::string, std::uint64_t>, json> reports;
  fs::path birnn_seed1;
};

ExperimentSpec planted_spec(EncoderKind encoder, std::uint64_t seed, const fs::path& out) {
  ExperimentSpec spec;
  spec.model = model_preset("desk", encoder);
  spec.model.similarity = SimilarityKind::kAdditive;
  spec.model.seed = seed;
  spec.train.seed = seed;
  spec.train.epochs = 10;
  spec.seed = seed;
  spec.workers = default_workers();
  spec.out = out;
  return spec;
}

PlantedRuns& planted_runs() {
  static PlantedRuns runs = [] {
    PlantedRuns r;
    PlantedConfig pc;
    pc.train_size = 2000;
    pc.test_size = 500;
    pc.signal_precision = 1.0;
    pc.seed = 1;
    r.corpus = generate_planted(pc);
    for (EncoderKind e : {EncoderKind::kBiRNN, EncoderKind::kAverage}) {
      for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        const std::string name = std::string(encoder_name(e));
        const fs::path out = work_root() / ("planted-" + name + "-" + std::to_string(seed));
        ExperimentSpec spec = planted_spec(e, seed, out);
        spec.analyses = {Analysis::kImportance};
        if (e == EncoderKind::kBiRNN && seed == 1) {
          spec.analyses.insert(Analysis::kPermutation);
          r.birnn_seed1 = out;
        }
        r.reports[{name, seed}] = run_experiment(spec, r.corpus);
      }
    }
    return r;
  }();
  return runs;
}

// 6. Direction of the rank-correlation gaps.
Outcome directional_replication() {
  PlantedRuns& runs = planted_runs();
  bool ok = true;
  std::ostringstream detail;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const json& bi = runs.reports.at({"birnn", seed})["importance"]["overall"];
    const json& avg = runs.reports.at({"average", seed})["importance"]["overall"];
    const double gap = bi["tau_g_loo"]["mean"].get<double>() - bi["tau_g"]["mean"].get<double>();
    const double loo_bi = bi["tau_loo"]["mean"], loo_avg = avg["tau_loo"]["mean"];
    ok = ok && gap > 0 && loo_avg > loo_bi;
    detail << (seed > 1 ? "; " : "") << "seed " << seed << ": birnn tau(g,loo)-tau(a,g) " << fmt(gap, 3)
           << ", tau(a,loo) avg " << fmt(loo_avg, 3) << " vs birnn " << fmt(loo_bi, 3);
  }
  return {ok, detail.str()};
}

// 7. Planted signal behaves as expected on the positive class.
Outcome planted_faithfulness() {
  PlantedRuns& runs = planted_runs();
  std::map<std::string, const Instance*> by_id;
  for (const Instance& inst : runs.corpus.test) by_id[inst.id] = &inst;

  std::vector<double> pos, neg;
  for (const json& r : read_records(runs.birnn_seed1 / "records" / "permutation.jsonl")) {
    const Instance& inst = *by_id.at(r["id"]);
    (inst.label == 1 ? pos : neg).push_back(r["delta_y_med"]);
  }
  std::size_t positives = 0, signal_max = 0;
  for (const json& r : read_records(runs.birnn_seed1 / "records" / "importance.jsonl")) {
    const Instance& inst = *by_id.at(r["id"]);
    if (inst.label != 1) continue;
    ++positives;
    const std::vector<double> loo = r["loo"];
    const auto top = static_cast<std::size_t>(std::max_element(loo.begin(), loo.end()) - loo.begin());
    signal_max += inst.words[top] == kSignalToken ? 1 : 0;
  }
  if (pos.empty() || neg.empty() || positives == 0) return {false, "missing positive or negative instances"};
  const double med_pos = median(pos), med_neg = median(neg);
  const double frac = static_cast<double>(signal_max) / static_cast<double>(positives);
  return {med_pos > med_neg && frac >= 0.8, "median delta_y_med positives " + fmt(med_pos, 4) + " vs negatives " +
                                                fmt(med_neg, 6) + "; LOO max at signal in " +
                                                std::to_string(signal_max) + "/" + std::to_string(positives) +
                                                " positives (" + fmt(frac, 3) + ")"};
}

// 8. Two runs with the same seeds give identical files.
Outcome determinism() {
  PlantedConfig pc;
  pc.train_size = 600;
  pc.test_size = 100;
  pc.seed = 8;
  const Corpus corpus = generate_planted(pc);
  std::vector<fs::path> dirs;
  for (std::size_t workers : {std::size_t{1}, std::size_t{4}}) {
    ExperimentSpec spec = planted_spec(EncoderKind::kBiRNN, 8, work_root() / ("det-" + std::to_string(dirs.size())));
    spec.train.epochs = 3;
    spec.workers = workers;
    spec.limit = 40;
    spec.analyses = {Analysis::kImportance, Analysis::kPermutation, Analysis::kAdversarial};
    run_experiment(spec, corpus);
    dirs.push_back(spec.out);
  }
  std::size_t files = 0, differing = 0;
  std::string first_diff;
  for (const auto& entry : fs::recursive_directory_iterator(dirs[0])) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), dirs[0]);
    ++files;
    if (!fs::exists(dirs[1] / rel) || read_text_file(entry.path()) != read_text_file(dirs[1] / rel)) {
      if (differing++ == 0) first_diff = rel.string();
    }
  }
  std::size_t other = 0;
  for (const auto& entry : fs::recursive_directory_iterator(dirs[1])) other += entry.is_regular_file() ? 1 : 0;
  const bool ok = files > 0 && differing == 0 && other == files;
  return {ok, std::to_string(files) + " files compared (1 vs 4 workers), " + std::to_string(differing) + " differ" +
                  (first_diff.empty() ? "" : " (first: " + first_diff + ")")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"metric oracles", metric_oracles},
      {"bAbI-style anchor", babi_anchor},
      {"tied hidden states", tied_hidden},
      {"adversarial optimality at T=2", grid_optimality},
      {"directional replication", directional_replication},
      {"planted-signal faithfulness", planted_faithfulness},
      {"determinism", determinism},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoul(argv[i]));

  std::size_t failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << i + 1 << "] " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
