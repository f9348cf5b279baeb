#include "ulab/tracing.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "ulab/parallel.hpp"

namespace ulab {
namespace {

double probability(std::span<const double> row, TokenId token) {
  const double mx = *std::max_element(row.begin(), row.end());
  double z = 0.0;
  for (double v : row) z += std::exp(v - mx);
  return std::exp(row[static_cast<std::size_t>(token)] - mx) / z;
}

std::uint64_t sample_seed(std::uint64_t base, std::size_t fact, std::size_t sample) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(fact), static_cast<std::uint32_t>(sample)};
  std::array<std::uint32_t, 2> out;
  seq.generate(out.begin(), out.end());
  return (std::uint64_t{out[1]} << 32) | out[0];
}

bool is_subject(TokenCategory c) {
  return c == TokenCategory::kSFirst || c == TokenCategory::kSMid || c == TokenCategory::kSLast;
}

}  // namespace

void TraceConfig::validate() const {
  ULAB_REQUIRE(std::isfinite(noise_scale) && noise_scale >= 0.0, "trace: noise_scale must be >= 0");
  ULAB_REQUIRE(num_noise_samples >= 1, "trace: num_noise_samples must be >= 1");
  ULAB_REQUIRE(critical_fraction > 0.0 && critical_fraction <= 1.0,
               "trace: critical_fraction must be in (0, 1]");
}

double embedding_std(const Transformer& model) {
  const Tensor& table = model.parameter(model.layout().tok_embed).value;
  double mean = 0.0;
  for (double v : table.data()) mean += v;
  mean /= static_cast<double>(table.size());
  double var = 0.0;
  for (double v : table.data()) var += (v - mean) * (v - mean);
  return std::sqrt(var / static_cast<double>(table.size()));
}

Tensor corrupt_embeddings(const Tensor& clean_level0, TokenSpan subject, double noise_std,
                          std::uint64_t noise_seed) {
  ULAB_REQUIRE(subject.size() > 0, "corrupt_embeddings: empty subject span");
  ULAB_REQUIRE(subject.end <= clean_level0.rows(), "corrupt_embeddings: subject span outside the prompt");
  ULAB_REQUIRE(noise_std >= 0.0, "corrupt_embeddings: negative noise");
  Tensor out = clean_level0;
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t p = subject.begin; p < subject.end; ++p)
    for (std::size_t j = 0; j < out.cols(); ++j) out.at(p, j) += noise_std * normal(rng);
  return out;
}

TraceResult trace_fact(const Transformer& model, const Example& example, const Tokenizer& vocab,
                       const TraceConfig& config, std::size_t fact_index) {
  config.validate();
  const AnnotatedFact fact = annotate_spans(example, vocab);
  const auto tokens = vocab.encode(example.x);
  const auto answer = vocab.encode(example.y);
  const TokenId target = answer.at(0);
  const std::size_t T = tokens.size(), levels = model.config().num_layers + 1;

  TraceResult r;
  r.fact_id = example.id;
  r.categories = fact.categories;

  const ForwardResult clean = forward(model, tokens, true);
  const auto last_row = clean.logits.row(T - 1);
  r.p_clean = probability(last_row, target);
  if (static_cast<TokenId>(argmax(last_row)) != target) {
    r.skipped = true;
    r.skip_reason = "clean top-1 is '" + vocab.token(static_cast<TokenId>(argmax(last_row))) +
                    "', expected '" + vocab.token(target) + "'";
    return r;
  }

  const double noise_std = config.noise_scale * embedding_std(model);
  const std::size_t S = config.num_noise_samples;
  std::vector<HiddenStateCache> corrupted(S);
  std::vector<double> p_corrupt(S);
  std::size_t flips = 0;
  for (std::size_t s = 0; s < S; ++s) {
    const Tensor noisy = corrupt_embeddings(clean.cache->levels[0], fact.fact.s, noise_std,
                                            sample_seed(config.rng_seed, fact_index, s));
    std::vector<Patch> patches;
    for (std::size_t p = fact.fact.s.begin; p < fact.fact.s.end; ++p) {
      auto row = noisy.row(p);
      patches.push_back(Patch{p, 0, {row.begin(), row.end()}});
    }
    ForwardResult run = forward(model, tokens, true, patches);
    const auto row = run.logits.row(T - 1);
    p_corrupt[s] = probability(row, target);
    if (static_cast<TokenId>(argmax(row)) != target) ++flips;
    corrupted[s] = std::move(*run.cache);
  }

  // One slot per (sample, level, position) so the fan-out stays deterministic.
  std::vector<double> restored(S * levels * T);
  parallel_for(restored.size(), [&](std::size_t k) {
    const std::size_t s = k / (levels * T), l = (k / T) % levels, p = k % T;
    const auto state = clean.cache->state(p, l);
    const Patch patch{p, l, {state.begin(), state.end()}};
    const Tensor logits = forward_from_level(model, l, corrupted[s].levels[l], std::span(&patch, 1));
    restored[k] = probability(logits.row(T - 1), target);
  });

  r.effect = Tensor({T, levels}, 0.0);
  for (std::size_t s = 0; s < S; ++s) {
    r.p_corrupt += p_corrupt[s];
    for (std::size_t l = 0; l < levels; ++l)
      for (std::size_t p = 0; p < T; ++p)
        r.effect.at(p, l) += restored[(s * levels + l) * T + p] - p_corrupt[s];
  }
  r.p_corrupt /= static_cast<double>(S);
  for (double& v : r.effect.data()) v /= static_cast<double>(S);
  r.flip_rate = static_cast<double>(flips) / static_cast<double>(S);
  return r;
}

std::optional<double> TraceGrid::at(TokenCategory c, std::size_t level) const {
  const auto i = static_cast<std::size_t>(c);
  if (!present[i]) return std::nullopt;
  return values[i].at(level);
}

TraceGrid aggregate_grid(std::span<const TraceResult> results) {
  std::vector<const TraceResult*> used;
  for (const auto& r : results)
    if (!r.skipped) used.push_back(&r);
  if (used.empty()) throw std::runtime_error("every traced fact was skipped; no grid to aggregate");

  TraceGrid grid;
  grid.num_levels = used.front()->effect.cols();
  grid.facts = used.size();
  // cell[c][l] collects one category mean per fact.
  std::array<std::vector<std::vector<double>>, kNumCategories> cell;
  for (auto& c : cell) c.assign(grid.num_levels, {});
  for (const TraceResult* r : used) {
    ULAB_REQUIRE(r->effect.cols() == grid.num_levels, "aggregate_grid: results disagree on depth");
    ULAB_REQUIRE(r->categories.size() == r->effect.rows(), "aggregate_grid: categories do not match effects");
    for (std::size_t c = 0; c < kNumCategories; ++c) {
      std::size_t count = 0;
      std::vector<double> sum(grid.num_levels, 0.0);
      for (std::size_t p = 0; p < r->categories.size(); ++p) {
        if (static_cast<std::size_t>(r->categories[p]) != c) continue;
        ++count;
        for (std::size_t l = 0; l < grid.num_levels; ++l) sum[l] += r->effect.at(p, l);
      }
      if (count == 0) continue;
      for (std::size_t l = 0; l < grid.num_levels; ++l)
        cell[c][l].push_back(sum[l] / static_cast<double>(count));
    }
  }
  for (std::size_t c = 0; c < kNumCategories; ++c) {
    grid.values[c].assign(grid.num_levels, 0.0);
    grid.present[c] = !cell[c][0].empty();
    if (!grid.present[c]) continue;
    for (std::size_t l = 0; l < grid.num_levels; ++l) {
      auto& v = cell[c][l];
      std::sort(v.begin(), v.end());  // fixed summation order, whatever the input order
      double s = 0.0;
      for (double x : v) s += x;
      grid.values[c][l] = s / static_cast<double>(v.size());
    }
  }
  return grid;
}

std::set<std::size_t> identify_critical_layers(const TraceGrid& grid, double fraction) {
  ULAB_REQUIRE(fraction > 0.0 && fraction <= 1.0, "identify_critical_layers: fraction must be in (0, 1]");
  std::vector<double> per_level(grid.num_levels, -std::numeric_limits<double>::infinity());
  for (std::size_t c = 0; c < kNumCategories; ++c) {
    if (!grid.present[c] || !is_subject(static_cast<TokenCategory>(c))) continue;
    for (std::size_t l = 0; l < grid.num_levels; ++l) per_level[l] = std::max(per_level[l], grid.values[c][l]);
  }
  std::set<std::size_t> out;
  if (per_level.empty() || !std::isfinite(per_level[0])) return out;
  const double top = *std::max_element(per_level.begin(), per_level.end());
  for (std::size_t l = 0; l < grid.num_levels; ++l)
    if (per_level[l] >= fraction * top) out.insert(l);
  return out;
}

LayerRange critical_block_range(const std::set<std::size_t>& levels, std::size_t num_layers) {
  ULAB_REQUIRE(!levels.empty(), "critical_block_range: no critical levels");
  ULAB_REQUIRE(num_layers > 0, "critical_block_range: model has no blocks");
  const std::size_t lo = std::min(*levels.begin(), num_layers - 1);
  const std::size_t hi = std::min(*levels.rbegin(), num_layers - 1);
  return {lo, hi};
}

double mean_subject_effect(const TraceGrid& grid, std::size_t lo, std::size_t hi) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < kNumCategories; ++c) {
    if (!grid.present[c] || !is_subject(static_cast<TokenCategory>(c))) continue;
    for (std::size_t l = lo; l < std::min(hi, grid.num_levels); ++l) {
      sum += grid.values[c][l];
      ++n;
    }
  }
  ULAB_REQUIRE(n > 0, "mean_subject_effect: no subject cells in range");
  return sum / static_cast<double>(n);
}

TraceRun run_tracing(const Transformer& model, const Corpus& corpus, Split split,
                     const TraceConfig& config) {
  config.validate();
  auto facts = corpus.select(split, Task::kQa);
  if (facts.empty()) throw std::runtime_error(std::string("no QA facts in split ") + split_name(split));
  if (config.max_facts > 0 && facts.size() > config.max_facts) facts.resize(config.max_facts);
  TraceRun run;
  run.embed_std = embedding_std(model);
  run.noise_std = config.noise_scale * run.embed_std;
  for (std::size_t k = 0; k < facts.size(); ++k)
    run.results.push_back(trace_fact(model, *facts[k], corpus.vocab, config, k));
  // A model that recalls none of the facts yields an empty grid rather than
  // an error, so an under-trained pipeline still reports what happened.
  const bool any = std::any_of(run.results.begin(), run.results.end(), [](const TraceResult& r) { return !r.skipped; });
  if (any) {
    run.grid = aggregate_grid(run.results);
  } else {
    run.grid.num_levels = model.config().num_layers + 1;
    for (auto& v : run.grid.values) v.assign(run.grid.num_levels, 0.0);
  }
  run.critical_levels = identify_critical_layers(run.grid, config.critical_fraction);
  return run;
}

void save_grid_csv(const TraceGrid& grid, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write trace grid " + path.string());
  out << "category";
  for (std::size_t l = 0; l < grid.num_levels; ++l) out << ',' << l;
  out << '\n';
  char buf[32];
  for (std::size_t c = 0; c < kNumCategories; ++c) {
    out << category_name(static_cast<TokenCategory>(c));
    for (std::size_t l = 0; l < grid.num_levels; ++l) {
      if (!grid.present[c]) {
        out << ",NA";
        continue;
      }
      std::snprintf(buf, sizeof buf, "%.17g", grid.values[c][l]);
      out << ',' << buf;
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("failed writing trace grid " + path.string());
}

void save_trace_metadata(const TraceRun& run, const TraceConfig& config,
                         const std::filesystem::path& path) {
  using nlohmann::ordered_json;
  ordered_json j;
  j["noise_scale"] = config.noise_scale;
  j["embedding_std"] = run.embed_std;
  j["noise_std"] = run.noise_std;
  j["num_noise_samples"] = config.num_noise_samples;
  j["rng_seed"] = config.rng_seed;
  j["critical_fraction"] = config.critical_fraction;
  std::size_t skipped = 0;
  ordered_json facts = ordered_json::array();
  for (const auto& r : run.results) {
    ordered_json f;
    f["id"] = r.fact_id;
    f["skipped"] = r.skipped;
    if (r.skipped) {
      ++skipped;
      f["reason"] = r.skip_reason;
    } else {
      f["p_clean"] = r.p_clean;
      f["p_corrupt"] = r.p_corrupt;
      f["flip_rate"] = r.flip_rate;
    }
    facts.push_back(f);
  }
  j["facts_traced"] = run.results.size();
  j["facts_skipped"] = skipped;
  j["critical_levels"] = run.critical_levels;
  j["facts"] = facts;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write trace metadata " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace ulab
