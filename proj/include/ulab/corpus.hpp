#pragma once

// Synthetic PII fact corpus, its closed-vocabulary tokenizer and the token
// span annotation used by causal tracing.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ulab/autograd.hpp"

namespace ulab {

// Word-level tokenizer with single-character fallback. Id 0 is the end of
// sequence marker; it never comes out of encode().
class Tokenizer {
 public:
  static constexpr TokenId kEos = 0;
  static constexpr std::string_view kEosText = "<eos>";

  // Vocabulary for everything the corpus generator can produce.
  static Tokenizer standard();
  static Tokenizer load(const std::filesystem::path& path);

  // `tokens[0]` must be the end marker; the rest are single alphabet
  // characters or words.
  explicit Tokenizer(std::vector<std::string> tokens);

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  void save(const std::filesystem::path& path) const;

  static bool in_alphabet(char c);

 private:
  std::vector<std::string> tokens_;
  std::array<TokenId, 256> char_id_{};
  // Words bucketed by first byte, longest first.
  std::array<std::vector<TokenId>, 256> words_by_first_;
};

enum class Task : std::uint8_t { kQa, kCompletion };
enum class Split : std::uint8_t { kForget, kRetain, kHoldout, kUtility };

const char* task_name(Task t);
const char* split_name(Split s);
std::optional<Task> parse_task(std::string_view s);
std::optional<Split> parse_split(std::string_view s);

struct TokenSpan {
  std::size_t begin = 0, end = 0;  // half-open, prompt token positions
  std::size_t size() const { return end - begin; }
  bool operator==(const TokenSpan&) const = default;
};

// (interrogative, subject, relation, attribute). The prompt is i + s + r and
// the attribute is the expected output; its span indexes the output tokens.
struct FactRecord {
  std::string interrogative, subject, relation, attribute;
  TokenSpan i, s, r, a;
  std::size_t prompt_length = 0;
  bool operator==(const FactRecord&) const = default;
};

struct Example {
  std::string id;
  Task task = Task::kQa;
  Split split = Split::kForget;
  std::string subject;
  std::string x, y;
  std::optional<FactRecord> fact;  // present for QA
  bool operator==(const Example&) const = default;
};

struct CorpusCounts {
  std::size_t forget = 120, retain = 120, holdout = 60, utility = 60;
  void validate() const;
  bool operator==(const CorpusCounts&) const = default;
};

struct Corpus {
  std::vector<Example> examples;
  Tokenizer vocab = Tokenizer::standard();
  std::map<Split, std::vector<std::string>> subjects;

  std::vector<const Example*> select(Split split) const;
  std::vector<const Example*> select(Split split, Task task) const;
};

// Pure function of (seed, counts). Forget/retain/holdout draw one subject
// each from the name pool and yield one QA and one completion example per
// subject; utility yields one QA example per invented country.
Corpus generate_corpus(std::uint64_t seed, const CorpusCounts& counts);

std::size_t name_pool_size();

// Training/scoring token view of an example: the prompt and the expected
// output followed by the end marker.
struct EncodedExample {
  std::vector<TokenId> input, output;
};
EncodedExample encode_example(const Example& ex, const Tokenizer& vocab);

enum class TokenCategory : std::uint8_t { kI, kSFirst, kSMid, kSLast, kRFirst, kRMid, kRLast };
inline constexpr std::size_t kNumCategories = 7;
const char* category_name(TokenCategory c);

struct AnnotatedFact {
  FactRecord fact;
  std::vector<TokenCategory> categories;  // one per prompt token
};

// First/middle/last labels for a span of n tokens. One token is `last`; two
// are first + last.
std::vector<TokenCategory> span_categories(std::size_t n, TokenCategory first, TokenCategory mid,
                                           TokenCategory last);

// Re-tokenizes the fact segments, checks they tile the prompt tokenization
// and labels every prompt token.
AnnotatedFact annotate_spans(const Example& ex, const Tokenizer& vocab);

// One JSON object per line: id, task, split, subject, x, y and, for QA, the
// fact segments with their token spans.
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path, const Tokenizer& vocab);

}  // namespace ulab
