#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "ulab/corpus.hpp"

using namespace ulab;

namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path scratch_dir() {
  auto dir = std::filesystem::temp_directory_path() / "ulab_corpus_test";
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("tokenizer round trip and errors") {
  const Tokenizer vocab = Tokenizer::standard();
  CHECK(vocab.encode("").empty());
  CHECK(vocab.decode(std::vector<TokenId>{}).empty());
  for (const char* s : {"What is Federica Azure's Social Security Number?", "900-12-3456",
                        "maple42@post.net", "Lindqvist", "a b  c", "Oslo,Lima: ok?"})
    CHECK(vocab.decode(vocab.encode(s)) == s);
  CHECK_THROWS_AS(vocab.encode("hello!"), std::runtime_error);
  CHECK_THROWS_AS(vocab.encode("caf\xc3\xa9"), std::runtime_error);
  CHECK_THROWS_AS(vocab.decode(std::vector<TokenId>{Tokenizer::kEos}), ContractViolation);

  // Words never match inside a longer word.
  auto inside = vocab.encode("Swas");
  CHECK(inside.size() == 4);
  auto word = vocab.encode(" was");
  CHECK(word.size() == 1);
}

TEST_CASE("the worked example prompt tiles into its spans") {
  const Tokenizer vocab = Tokenizer::standard();
  Example ex;
  ex.id = "worked";
  ex.task = Task::kQa;
  ex.x = "What is Federica Azure's Social Security Number?";
  ex.y = "900-12-3456";
  ex.fact = FactRecord{"What is", " Federica Azure's", " Social Security Number?", "900-12-3456",
                       {}, {}, {}, {}, 0};
  AnnotatedFact a = annotate_spans(ex, vocab);
  const auto n = vocab.encode(ex.x).size();
  CHECK(a.fact.i.size() + a.fact.s.size() + a.fact.r.size() == n);
  CHECK(a.fact.prompt_length == n);
  CHECK(a.fact.i == TokenSpan{0, 2});
  CHECK(a.fact.s == TokenSpan{2, 5});
  CHECK(a.fact.r == TokenSpan{5, 9});
  using C = TokenCategory;
  CHECK(a.categories == std::vector<C>{C::kI, C::kI, C::kSFirst, C::kSMid, C::kSLast, C::kRFirst,
                                       C::kRMid, C::kRMid, C::kRLast});

  ex.fact->subject = " Federica Azure";  // no longer tiles the prompt
  CHECK_THROWS_AS(annotate_spans(ex, vocab), std::runtime_error);
  Example completion = ex;
  completion.task = Task::kCompletion;
  completion.fact.reset();
  CHECK_THROWS_AS(annotate_spans(completion, vocab), ContractViolation);
}

TEST_CASE("span categories") {
  using C = TokenCategory;
  CHECK(span_categories(4, C::kSFirst, C::kSMid, C::kSLast) ==
        std::vector<C>{C::kSFirst, C::kSMid, C::kSMid, C::kSLast});
  CHECK(span_categories(1, C::kSFirst, C::kSMid, C::kSLast) == std::vector<C>{C::kSLast});
  CHECK(span_categories(2, C::kRFirst, C::kRMid, C::kRLast) == std::vector<C>{C::kRFirst, C::kRLast});
}

TEST_CASE("generated corpus shape") {
  CorpusCounts counts{12, 10, 6, 5};
  Corpus c = generate_corpus(3, counts);
  CHECK(c.select(Split::kForget).size() == 24);
  CHECK(c.select(Split::kRetain, Task::kQa).size() == 10);
  CHECK(c.select(Split::kHoldout, Task::kCompletion).size() == 6);
  CHECK(c.select(Split::kUtility).size() == 5);
  CHECK(c.subjects.at(Split::kForget).size() == 12);

  std::set<std::string> ids;
  for (const Example& e : c.examples) {
    CHECK(ids.insert(e.id).second);
    CHECK(!e.y.empty());
    CHECK(c.vocab.decode(c.vocab.encode(e.x)) == e.x);
    CHECK(c.vocab.decode(c.vocab.encode(e.y)) == e.y);
    if (e.task == Task::kQa) {
      REQUIRE(e.fact.has_value());
      CHECK(e.fact->attribute == e.y);
      CHECK(e.x.starts_with("What is " + e.subject + "'s "));
      AnnotatedFact a = annotate_spans(e, c.vocab);
      CHECK(a.fact == *e.fact);
      CHECK(a.categories.size() == c.vocab.encode(e.x).size());
    } else {
      CHECK(!e.fact.has_value());
      CHECK(e.x.starts_with(e.subject + " was born in "));
    }
  }
  CHECK_THROWS_AS(generate_corpus(1, CorpusCounts{0, 1, 1, 1}), ContractViolation);
  CHECK_THROWS_AS(generate_corpus(1, CorpusCounts{name_pool_size(), 1, 1, 1}), std::runtime_error);
  CHECK_THROWS_AS(generate_corpus(1, CorpusCounts{1, 1, 1, 1000}), std::runtime_error);
}

TEST_CASE("forget and retain subjects are disjoint") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Corpus c = generate_corpus(seed, CorpusCounts{});
    std::set<std::string> forget(c.subjects.at(Split::kForget).begin(),
                                 c.subjects.at(Split::kForget).end());
    CHECK(forget.size() == 120);
    for (const auto& s : c.subjects.at(Split::kRetain)) CHECK(forget.count(s) == 0);
    for (const auto& s : c.subjects.at(Split::kHoldout)) CHECK(forget.count(s) == 0);
  }
}

TEST_CASE("QA prompts instantiate the template") {
  Corpus c = generate_corpus(11, CorpusCounts{});
  std::set<std::string> relations;
  for (const Example* e : c.select(Split::kForget, Task::kQa)) relations.insert(e->fact->relation);
  CHECK(relations == std::set<std::string>{" Social Security Number?", " phone number?",
                                           " home address?", " email address?"});
}

TEST_CASE("corpus files are deterministic and round trip") {
  const auto dir = scratch_dir();
  Corpus a = generate_corpus(7, CorpusCounts{});
  Corpus b = generate_corpus(7, CorpusCounts{});
  save_corpus(a, dir / "a.jsonl");
  save_corpus(b, dir / "b.jsonl");
  CHECK(read_file(dir / "a.jsonl") == read_file(dir / "b.jsonl"));
  Corpus other = generate_corpus(8, CorpusCounts{});
  save_corpus(other, dir / "c.jsonl");
  CHECK(read_file(dir / "a.jsonl") != read_file(dir / "c.jsonl"));

  a.vocab.save(dir / "vocab.txt");
  Tokenizer vocab = Tokenizer::load(dir / "vocab.txt");
  CHECK(vocab.tokens() == a.vocab.tokens());
  Corpus loaded = load_corpus(dir / "a.jsonl", vocab);
  CHECK(loaded.examples == a.examples);
  CHECK(loaded.subjects == a.subjects);

  {
    std::ofstream bad(dir / "bad.jsonl");
    bad << read_file(dir / "a.jsonl").substr(0, 40) << "\n";
  }
  CHECK_THROWS_WITH_AS(load_corpus(dir / "bad.jsonl", vocab), doctest::Contains("bad.jsonl:1"),
                       std::runtime_error);
}

TEST_CASE("encoded examples end with the end marker") {
  Corpus c = generate_corpus(1, CorpusCounts{2, 2, 2, 2});
  for (const Example& e : c.examples) {
    EncodedExample enc = encode_example(e, c.vocab);
    CHECK(enc.output.back() == Tokenizer::kEos);
    CHECK(enc.input.size() + enc.output.size() <= 64);
  }
}
