#include "attnaudit/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <sstream>

#include "attnaudit/random.hpp"

namespace attnaudit {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::kBinaryClassification: return "binary-classification";
    case TaskKind::kQA: return "qa";
    case TaskKind::kNLI: return "nli-style";
  }
  return "unknown";
}

TaskKind parse_task(std::string_view name) {
  if (name == "binary-classification" || name == "classification") return TaskKind::kBinaryClassification;
  if (name == "qa") return TaskKind::kQA;
  if (name == "nli-style" || name == "nli") return TaskKind::kNLI;
  throw CorpusError("unknown task kind '" + std::string(name) + "'");
}

std::string normalize_token(std::string_view word) {
  const bool numeric = std::any_of(word.begin(), word.end(), [](unsigned char c) { return std::isdigit(c) != 0; });
  return numeric ? std::string(kNumberToken) : std::string(word);
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.push_back(normalize_token(text.substr(i, j - i)));
    i = j;
  }
  return out;
}

Vocabulary::Vocabulary() {
  add(std::string(kUnknownToken));
  add(std::string(kNumberToken));
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) {
  for (auto& t : tokens) {
    if (index_.contains(t)) throw CorpusError("duplicate vocabulary entry '" + t + "'");
    add(t);
  }
  if (tokens_.empty() || tokens_[0] != kUnknownToken) {
    throw CorpusError("vocabulary must start with the unknown token");
  }
}

TokenId Vocabulary::add(const std::string& token) {
  if (auto it = index_.find(token); it != index_.end()) return it->second;
  const TokenId id = tokens_.size();
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? unknown_id() : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[id];
}

bool Vocabulary::contains(std::string_view token) const { return index_.contains(std::string(token)); }

std::vector<TokenId> Vocabulary::encode(const std::vector<std::string>& words) const {
  std::vector<TokenId> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(id(w));
  return ids;
}

void save_vocabulary(const Vocabulary& vocab, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CorpusError("cannot write " + path.string());
  for (const auto& t : vocab.tokens()) out << t << '\n';
}

Vocabulary load_vocabulary(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot read " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  return Vocabulary(std::move(tokens));
}

bool Corpus::conditioned() const {
  auto has = [](const Instance& i) { return i.has_query(); };
  return std::any_of(train.begin(), train.end(), has) || std::any_of(test.begin(), test.end(), has);
}

namespace {

Instance encode_instance(const Vocabulary& vocab, RawInstance raw) {
  Instance inst;
  inst.id = std::move(raw.id);
  inst.tokens = vocab.encode(raw.words);
  inst.words = std::move(raw.words);
  if (raw.query_words) {
    inst.query = vocab.encode(*raw.query_words);
    inst.query_words = std::move(raw.query_words);
  }
  inst.label = raw.label;
  return inst;
}

json instance_json(const Instance& inst) {
  json j;
  j["id"] = inst.id;
  j["tokens"] = inst.words;
  if (inst.query_words) j["query"] = *inst.query_words;
  j["label"] = inst.label;
  return j;
}

void write_jsonl(const std::vector<Instance>& instances, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CorpusError("cannot write " + path.string());
  for (const auto& inst : instances) out << instance_json(inst).dump() << '\n';
}

}  // namespace

Corpus build_corpus(std::vector<RawInstance> train, std::vector<RawInstance> test, TaskKind task,
                    std::size_t num_classes, std::vector<std::string> label_names) {
  Corpus corpus;
  corpus.task = task;
  corpus.num_classes = num_classes;
  corpus.label_names = std::move(label_names);
  for (const auto& inst : train) {
    for (const auto& w : inst.words) corpus.vocab.add(w);
    if (inst.query_words) {
      for (const auto& w : *inst.query_words) corpus.vocab.add(w);
    }
  }
  auto check = [&](const RawInstance& inst) {
    if (inst.words.empty()) throw CorpusError("instance '" + inst.id + "' has an empty document");
    if (inst.label >= num_classes) {
      throw CorpusError("instance '" + inst.id + "' label " + std::to_string(inst.label) + " outside " +
                        std::to_string(num_classes) + " classes");
    }
  };
  for (auto& inst : train) {
    check(inst);
    corpus.train.push_back(encode_instance(corpus.vocab, std::move(inst)));
  }
  for (auto& inst : test) {
    check(inst);
    corpus.test.push_back(encode_instance(corpus.vocab, std::move(inst)));
  }
  return corpus;
}

RawInstance parse_instance(std::string_view line, std::size_t line_number) {
  auto fail = [&](const std::string& why) {
    return CorpusError("line " + std::to_string(line_number) + ": " + why);
  };
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw fail(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw fail("expected a JSON object");
  RawInstance raw;
  try {
    raw.id = j.at("id").get<std::string>();
    for (const auto& w : j.at("tokens")) {
      auto words = tokenize(w.get<std::string>());
      raw.words.insert(raw.words.end(), words.begin(), words.end());
    }
    if (auto q = j.find("query"); q != j.end() && !q->is_null()) {
      std::vector<std::string> words;
      for (const auto& w : *q) {
        auto parts = tokenize(w.get<std::string>());
        words.insert(words.end(), parts.begin(), parts.end());
      }
      raw.query_words = std::move(words);
    }
    const auto label = j.at("label").get<long long>();
    if (label < 0) throw fail("negative label");
    raw.label = static_cast<std::size_t>(label);
  } catch (const json::exception& e) {
    throw fail(std::string("schema error: ") + e.what());
  }
  if (raw.words.empty()) throw fail("empty document");
  return raw;
}

std::vector<RawInstance> read_instances(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot read " + path.string());
  std::vector<RawInstance> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_instance(line, number));
    } catch (const CorpusError& e) {
      throw CorpusError(path.filename().string() + ", " + e.what());
    }
  }
  return out;
}

Corpus load_corpus(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw CorpusError("corpus directory " + dir.string() + " does not exist");
  auto train = read_instances(dir / "train.jsonl");
  auto test = read_instances(dir / "test.jsonl");
  if (train.empty()) throw CorpusError("train split is empty");

  std::size_t max_label = 0;
  bool any_query = false;
  for (const auto* split : {&train, &test}) {
    for (const auto& inst : *split) {
      max_label = std::max(max_label, inst.label);
      any_query = any_query || inst.query_words.has_value();
    }
  }
  TaskKind task = any_query ? TaskKind::kQA : TaskKind::kBinaryClassification;
  std::size_t num_classes = std::max<std::size_t>(2, max_label + 1);
  std::vector<std::string> label_names;
  if (const auto meta_path = dir / "corpus.json"; fs::exists(meta_path)) {
    std::ifstream in(meta_path, std::ios::binary);
    try {
      const json meta = json::parse(in);
      if (meta.contains("task")) task = parse_task(meta.at("task").get<std::string>());
      if (meta.contains("num_classes")) num_classes = meta.at("num_classes").get<std::size_t>();
      if (meta.contains("labels")) label_names = meta.at("labels").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      throw CorpusError("corpus.json: " + std::string(e.what()));
    }
  }
  return build_corpus(std::move(train), std::move(test), task, num_classes, std::move(label_names));
}

void write_corpus(const Corpus& corpus, const fs::path& dir) {
  fs::create_directories(dir);
  write_jsonl(corpus.train, dir / "train.jsonl");
  write_jsonl(corpus.test, dir / "test.jsonl");
  save_vocabulary(corpus.vocab, dir / "vocab.txt");
  json meta;
  meta["task"] = std::string(task_name(corpus.task));
  meta["num_classes"] = corpus.num_classes;
  if (!corpus.label_names.empty()) meta["labels"] = corpus.label_names;
  std::ofstream out(dir / "corpus.json", std::ios::binary);
  out << meta.dump(2) << '\n';
}

std::string filler_word(std::size_t i) {
  static constexpr std::string_view consonants = "bcdfghjklmnprstvwxyz";
  static constexpr std::string_view vowels = "aeiou";
  auto syllable = [](std::size_t s) {
    return std::string{consonants[s % consonants.size()], vowels[(s / consonants.size()) % vowels.size()]};
  };
  const std::size_t per = consonants.size() * vowels.size();
  std::string word = syllable(i % per) + syllable((i / per) % per);
  for (std::size_t rest = i / (per * per); rest > 0; rest /= per) word += syllable(rest % per);
  return word;
}

namespace {

std::string make_id(std::string_view split, std::size_t i) {
  std::ostringstream out;
  out << split << '-' << std::setw(6) << std::setfill('0') << i;
  return out.str();
}

}  // namespace

Corpus generate_planted(const PlantedConfig& config) {
  if (!(config.signal_precision > 0.5 && config.signal_precision <= 1.0)) {
    throw CorpusError("signal precision must lie in (0.5, 1]");
  }
  if (config.length < 2) throw CorpusError("planted documents need length >= 2");
  if (config.filler_vocab < 1) throw CorpusError("planted corpus needs at least one filler word");
  if (config.train_size < 2) throw CorpusError("planted corpus needs at least two train instances");

  Rng rng(config.seed);
  std::vector<std::string> fillers;
  for (std::size_t i = 0; i < config.filler_vocab; ++i) fillers.push_back(filler_word(i));

  auto make_split = [&](std::string_view split, std::size_t n) {
    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = i % 2;
    rng.shuffle(labels);
    std::vector<RawInstance> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      RawInstance inst;
      inst.id = make_id(split, i);
      inst.label = labels[i];
      for (std::size_t t = 0; t < config.length; ++t) inst.words.push_back(fillers[rng.below(fillers.size())]);
      const double p_signal = inst.label == 1 ? config.signal_precision : 1.0 - config.signal_precision;
      if (rng.bernoulli(p_signal)) inst.words[rng.below(config.length)] = std::string(kSignalToken);
      out.push_back(std::move(inst));
    }
    return out;
  };
  auto train = make_split("train", config.train_size);
  auto test = make_split("test", config.test_size);
  return build_corpus(std::move(train), std::move(test), TaskKind::kBinaryClassification, 2, {"negative", "positive"});
}

const std::vector<std::string>& babi_people() {
  static const std::vector<std::string> people{"Mary", "John", "Daniel", "Sandra"};
  return people;
}

const std::vector<std::string>& babi_locations() {
  static const std::vector<std::string> places{"bathroom", "hallway", "garden", "office", "bedroom", "kitchen"};
  return places;
}

std::string babi_answer(const std::vector<std::string>& story, const std::vector<std::string>& query) {
  if (query.size() < 3 || query[0] != "Where" || query[1] != "is") {
    throw CorpusError("query is not of the form 'Where is X ?'");
  }
  const std::string& who = query[2];
  std::optional<std::string> answer;
  std::vector<std::string> sentence;
  auto close = [&] {
    if (!sentence.empty() && sentence.front() == who) answer = sentence.back();
    sentence.clear();
  };
  for (const auto& w : story) {
    if (w == ".") {
      close();
    } else {
      sentence.push_back(w);
    }
  }
  close();
  if (!answer) throw CorpusError("'" + who + "' does not appear in the story");
  return *answer;
}

Corpus generate_babi1(const BabiConfig& config) {
  if (config.train_size < 1) throw CorpusError("bAbI corpus needs at least one train instance");
  if (config.sentences < 1) throw CorpusError("bAbI stories need at least one sentence");
  static const std::vector<std::string> verbs{"travelled", "went", "journeyed", "moved"};
  const auto& people = babi_people();
  const auto& places = babi_locations();

  Rng rng(config.seed);
  auto make_split = [&](std::string_view split, std::size_t n) {
    std::vector<RawInstance> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      RawInstance inst;
      inst.id = make_id(split, i);
      std::vector<std::string> actors;
      for (std::size_t s = 0; s < config.sentences; ++s) {
        const auto& who = people[rng.below(people.size())];
        actors.push_back(who);
        inst.words.insert(inst.words.end(),
                          {who, verbs[rng.below(verbs.size())], "to", "the", places[rng.below(places.size())], "."});
      }
      const auto& asked = actors[rng.below(actors.size())];
      inst.query_words = std::vector<std::string>{"Where", "is", asked, "?"};
      const auto answer = babi_answer(inst.words, *inst.query_words);
      inst.label = static_cast<std::size_t>(std::find(places.begin(), places.end(), answer) - places.begin());
      out.push_back(std::move(inst));
    }
    return out;
  };
  auto train = make_split("train", config.train_size);
  auto test = make_split("test", config.test_size);
  return build_corpus(std::move(train), std::move(test), TaskKind::kQA, places.size(), places);
}

}  // namespace attnaudit
