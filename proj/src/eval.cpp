#include "ulab/eval.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "ulab/parallel.hpp"

namespace ulab {
namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

}  // namespace

std::vector<std::string> whitespace_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(std::string_view candidate, std::string_view reference) {
  const auto c = whitespace_tokens(candidate);
  const auto r = whitespace_tokens(reference);
  if (c.empty() || r.empty()) return 0.0;
  const auto lcs = static_cast<double>(lcs_length(c, r));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(c.size());
  const double rec = lcs / static_cast<double>(r.size());
  return 2.0 * p * rec / (p + rec);
}

int exact_match(std::string_view candidate, std::string_view reference) {
  return trim(candidate) == trim(reference) ? 1 : 0;
}

double harmonic_mean(std::span<const double> values) {
  ULAB_REQUIRE(!values.empty(), "harmonic_mean: no values");
  double inv = 0.0;
  for (double v : values) {
    ULAB_REQUIRE(v >= 0.0, "harmonic_mean: negative value");
    if (v == 0.0) return 0.0;
    inv += 1.0 / v;
  }
  return static_cast<double>(values.size()) / inv;
}

double task_aggregate(const SplitScores& forget, const SplitScores& retain) {
  for (double v : {forget.regurgitation, forget.knowledge, retain.regurgitation, retain.knowledge})
    ULAB_REQUIRE(v >= 0.0 && v <= 1.0, "task_aggregate: scores must lie in [0, 1]");
  const double parts[] = {1.0 - forget.regurgitation, 1.0 - forget.knowledge, retain.regurgitation,
                          retain.knowledge};
  return harmonic_mean(parts);
}

double mia_score(std::span<const double> member_losses, std::span<const double> nonmember_losses) {
  ULAB_REQUIRE(!member_losses.empty() && !nonmember_losses.empty(), "mia_score: empty loss list");
  std::vector<std::pair<double, bool>> all;
  for (double v : member_losses) all.emplace_back(v, true);
  for (double v : nonmember_losses) all.emplace_back(v, false);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  const auto nm = static_cast<double>(member_losses.size());
  const auto nn = static_cast<double>(nonmember_losses.size());
  // Sweeping t upward past each distinct loss value moves that whole group
  // to the "member" side.
  double best = 0.5;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < all.size();) {
    const double v = all[i].first;
    for (; i < all.size() && all[i].first == v; ++i) (all[i].second ? tp : fp)++;
    const double acc = 0.5 * (static_cast<double>(tp) / nm + (nn - static_cast<double>(fp)) / nn);
    best = std::max(best, acc);
  }
  return 1.0 - best;
}

double final_score(double ta, double mia, double utility) { return (ta + mia + utility) / 3.0; }

std::string generate_answer(const Transformer& model, const Tokenizer& vocab, std::string_view prompt) {
  const auto tokens = vocab.encode(prompt);
  ULAB_REQUIRE(tokens.size() < model.config().max_seq_len, "generate_answer: prompt fills the context");
  auto out = greedy_generate(model, tokens, model.config().max_seq_len - tokens.size(), Tokenizer::kEos);
  std::span<const TokenId> fresh(out.begin() + static_cast<long>(tokens.size()), out.end());
  if (!fresh.empty() && fresh.back() == Tokenizer::kEos) fresh = fresh.first(fresh.size() - 1);
  return vocab.decode(fresh);
}

double utility_score(const Transformer& model, const Corpus& corpus) {
  const auto items = corpus.select(Split::kUtility);
  if (items.empty()) throw std::invalid_argument("utility split is empty");
  std::vector<int> hits(items.size());
  parallel_for(items.size(), [&](std::size_t i) {
    hits[i] = exact_match(generate_answer(model, corpus.vocab, items[i]->x), items[i]->y);
  });
  double s = 0.0;
  for (int h : hits) s += h;
  return s / static_cast<double>(items.size());
}

EvalReport evaluate(const Transformer& model, const Corpus& corpus) {
  for (Split s : {Split::kForget, Split::kRetain, Split::kHoldout, Split::kUtility})
    if (corpus.select(s).empty())
      throw std::invalid_argument(std::string("evaluation needs a nonempty ") + split_name(s) + " split");

  std::vector<const Example*> items;
  for (const auto& e : corpus.examples) items.push_back(&e);
  EvalReport report;
  report.examples.resize(items.size());
  parallel_for(items.size(), [&](std::size_t i) {
    const Example& e = *items[i];
    ExampleScore& s = report.examples[i];
    s.id = e.id;
    s.split = e.split;
    s.task = e.task;
    s.reference = e.y;
    const EncodedExample enc = encode_example(e, corpus.vocab);
    s.nll = sequence_nll(model, enc.input, enc.output);
    if (e.split == Split::kHoldout) return;  // only its loss is used
    s.candidate = generate_answer(model, corpus.vocab, e.x);
    s.score = e.task == Task::kQa ? exact_match(s.candidate, e.y) : rouge_l(s.candidate, e.y);
  });

  struct Acc {
    double reg = 0.0, know = 0.0;
    std::size_t nreg = 0, nknow = 0;
  };
  Acc forget, retain, utility;
  std::vector<double> members, nonmembers;
  for (const auto& s : report.examples) {
    Acc* acc = s.split == Split::kForget   ? &forget
               : s.split == Split::kRetain ? &retain
               : s.split == Split::kUtility ? &utility
                                            : nullptr;
    if (s.split == Split::kForget) members.push_back(s.nll);
    if (s.split == Split::kHoldout) nonmembers.push_back(s.nll);
    if (!acc) continue;
    if (s.task == Task::kQa) {
      acc->know += s.score;
      ++acc->nknow;
    } else {
      acc->reg += s.score;
      ++acc->nreg;
    }
  }
  auto finish = [](const Acc& a) {
    return SplitScores{a.nreg ? a.reg / static_cast<double>(a.nreg) : 0.0,
                       a.nknow ? a.know / static_cast<double>(a.nknow) : 0.0};
  };
  report.forget = finish(forget);
  report.retain = finish(retain);
  report.task_aggregate = task_aggregate(report.forget, report.retain);
  report.mia_score = mia_score(members, nonmembers);
  report.utility = utility.know / static_cast<double>(utility.nknow);
  report.final_score = final_score(report.task_aggregate, report.mia_score, report.utility);
  return report;
}

void save_report(const EvalReport& r, const std::filesystem::path& path) {
  using nlohmann::ordered_json;
  ordered_json j;
  j["task_aggregate"] = r.task_aggregate;
  j["mia_score"] = r.mia_score;
  j["utility"] = r.utility;
  j["final_score"] = r.final_score;
  j["forget"] = {{"regurgitation", r.forget.regurgitation}, {"knowledge", r.forget.knowledge}};
  j["retain"] = {{"regurgitation", r.retain.regurgitation}, {"knowledge", r.retain.knowledge}};
  ordered_json rows = ordered_json::array();
  for (const auto& e : r.examples) {
    ordered_json row;
    row["id"] = e.id;
    row["split"] = split_name(e.split);
    row["task"] = task_name(e.task);
    row["candidate"] = e.candidate;
    row["reference"] = e.reference;
    row["score"] = e.score;
    row["nll"] = e.nll;
    rows.push_back(row);
  }
  j["examples"] = rows;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write report " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace ulab
