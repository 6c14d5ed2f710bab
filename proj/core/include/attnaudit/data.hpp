#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace attnaudit {

using TokenId = std::size_t;

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TaskKind : std::uint8_t { kBinaryClassification, kQA, kNLI };

std::string_view task_name(TaskKind kind);
TaskKind parse_task(std::string_view name);

inline constexpr std::string_view kUnknownToken = "<unk>";
inline constexpr std::string_view kNumberToken = "qqq";

/// Words carrying any digit collapse to the shared number token.
std::string normalize_token(std::string_view word);
/// Splits on ASCII whitespace and normalizes each word.
std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
 public:
  /// Starts with the reserved unknown (id 0) and number (id 1) tokens.
  Vocabulary();
  explicit Vocabulary(std::vector<std::string> tokens);

  TokenId add(const std::string& token);
  /// Unknown words map to unknown_id().
  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;
  bool contains(std::string_view token) const;

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  static constexpr TokenId unknown_id() noexcept { return 0; }

  std::vector<TokenId> encode(const std::vector<std::string>& words) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path);
Vocabulary load_vocabulary(const std::filesystem::path& path);

struct Instance {
  std::string id;
  std::vector<std::string> words;  // normalized surface tokens
  std::vector<TokenId> tokens;
  std::optional<std::vector<std::string>> query_words;
  std::vector<TokenId> query;
  std::size_t label = 0;

  bool has_query() const noexcept { return query_words.has_value(); }
};

/// Text-level instance before vocabulary assignment.
struct RawInstance {
  std::string id;
  std::vector<std::string> words;
  std::optional<std::vector<std::string>> query_words;
  std::size_t label = 0;
};

struct Corpus {
  Vocabulary vocab;
  std::vector<Instance> train;
  std::vector<Instance> test;
  TaskKind task = TaskKind::kBinaryClassification;
  std::size_t num_classes = 2;
  std::vector<std::string> label_names;

  bool conditioned() const;
};

/// Builds the vocabulary from the train split only and encodes both splits.
Corpus build_corpus(std::vector<RawInstance> train, std::vector<RawInstance> test, TaskKind task,
                    std::size_t num_classes, std::vector<std::string> label_names = {});

/// Parses one JSONL instance; line_number is used in error messages.
RawInstance parse_instance(std::string_view line, std::size_t line_number);
std::vector<RawInstance> read_instances(const std::filesystem::path& path);

/// Reads `train.jsonl` and `test.jsonl` (plus optional `corpus.json`
/// metadata) from a corpus directory.
Corpus load_corpus(const std::filesystem::path& dir);
/// Writes train/test JSONL, `vocab.txt` and `corpus.json`.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);

struct PlantedConfig {
  std::size_t filler_vocab = 200;
  std::size_t length = 20;
  double signal_precision = 1.0;
  std::size_t train_size = 2000;
  std::size_t test_size = 500;
  std::uint64_t seed = 1;
};

inline constexpr std::string_view kSignalToken = "signal";

/// Binary corpus in which a designated token marks the positive class with
/// the configured precision. Labels are split exactly 50/50.
Corpus generate_planted(const PlantedConfig& config);
/// Digit-free filler word for index i.
std::string filler_word(std::size_t i);

struct BabiConfig {
  std::size_t train_size = 10000;
  std::size_t test_size = 1000;
  std::size_t sentences = 2;
  std::uint64_t seed = 1;
};

const std::vector<std::string>& babi_people();
const std::vector<std::string>& babi_locations();

/// Single-supporting-fact stories: "<person> <verb> to the <location> ."
/// sentences followed by a "Where is <person> ?" query whose label is the
/// person's last mentioned location.
Corpus generate_babi1(const BabiConfig& config);
/// Answers a "Where is X ?" query against a story; throws CorpusError when X
/// never moves.
std::string babi_answer(const std::vector<std::string>& story, const std::vector<std::string>& query);

}  // namespace attnaudit
