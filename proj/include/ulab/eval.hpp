#pragma once

// Scoring: regurgitation (ROUGE-L), knowledge (exact match), the harmonic
// task aggregate, the loss-threshold membership-inference score, the utility
// probe and the final mean.

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ulab/corpus.hpp"
#include "ulab/model.hpp"

namespace ulab {

std::vector<std::string> whitespace_tokens(std::string_view text);
std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

// LCS F1 over whitespace tokens; 0 when either side is empty or nothing matches.
double rouge_l(std::string_view candidate, std::string_view reference);

// 1 iff the strings match after trimming leading/trailing whitespace.
int exact_match(std::string_view candidate, std::string_view reference);

struct SplitScores {
  double regurgitation = 0.0;
  double knowledge = 0.0;
};

// Harmonic mean, 0 if any value is 0.
double harmonic_mean(std::span<const double> values);

// Harmonic mean of {1 - forget.reg, 1 - forget.know, retain.reg, retain.know}.
double task_aggregate(const SplitScores& forget, const SplitScores& retain);

// 1 - best balanced accuracy of "loss < t means member" over every threshold,
// with accuracy floored at 0.5.
double mia_score(std::span<const double> member_losses, std::span<const double> nonmember_losses);

double final_score(double task_aggregate, double mia, double utility);

// Greedy continuation of `prompt`, end marker stripped, detokenized.
std::string generate_answer(const Transformer& model, const Tokenizer& vocab, std::string_view prompt);

// Mean exact match over the utility split's questions.
double utility_score(const Transformer& model, const Corpus& corpus);

struct ExampleScore {
  std::string id;
  Split split = Split::kForget;
  Task task = Task::kQa;
  std::string candidate, reference;
  double score = 0.0;  // exact match for QA, ROUGE-L for completions
  double nll = 0.0;    // sequence NLL of the reference output
};

struct EvalReport {
  SplitScores forget, retain;
  double task_aggregate = 0.0;
  double mia_score = 0.0;
  double utility = 0.0;
  double final_score = 0.0;
  std::vector<ExampleScore> examples;
};

// Members are forget-split sequence NLLs, non-members holdout NLLs, both
// under `model`.
EvalReport evaluate(const Transformer& model, const Corpus& corpus);

void save_report(const EvalReport& report, const std::filesystem::path& path);

}  // namespace ulab
