#pragma once

// Causal tracing: corrupt the subject embeddings, restore one clean hidden
// state at a time and measure how much of the correct first attribute
// token's probability comes back.

#include <array>
#include <filesystem>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "ulab/corpus.hpp"
#include "ulab/model.hpp"

namespace ulab {

struct TraceConfig {
  double noise_scale = 3.0;  // noise std = noise_scale * std of the token embedding table
  std::size_t num_noise_samples = 8;
  std::uint64_t rng_seed = 0;
  std::size_t max_facts = 48;  // 0 traces every candidate fact
  double critical_fraction = 0.5;

  void validate() const;
};

// Standard deviation over every entry of the token embedding table.
double embedding_std(const Transformer& model);

// Adds N(0, noise_std^2) to each row of `clean_level0` inside `subject`;
// rows outside it are copied untouched.
Tensor corrupt_embeddings(const Tensor& clean_level0, TokenSpan subject, double noise_std,
                          std::uint64_t noise_seed);

struct TraceResult {
  std::string fact_id;
  bool skipped = false;
  std::string skip_reason;
  double p_clean = 0.0;
  double p_corrupt = 0.0;   // mean over noise samples
  double flip_rate = 0.0;   // share of noise samples whose top-1 is not the attribute token
  Tensor effect;            // [T, L+1], mean of p_restored - p_corrupt
  std::vector<TokenCategory> categories;  // per prompt position
};

// Three passes: clean, corrupted (fresh noise per sample), and corrupted
// with a single clean (position, level) state restored. The noise for
// sample s of this fact is seeded from (rng_seed, fact_index, s).
TraceResult trace_fact(const Transformer& model, const Example& example, const Tokenizer& vocab,
                       const TraceConfig& config, std::size_t fact_index);

struct TraceGrid {
  std::size_t num_levels = 0;
  // values[c][l]; present[c] is false for categories no fact contained.
  std::array<std::vector<double>, kNumCategories> values;
  std::array<bool, kNumCategories> present{};
  std::size_t facts = 0;

  std::optional<double> at(TokenCategory c, std::size_t level) const;
};

// Category-averaged per fact, then averaged over facts having the category.
// The cross-fact mean is order-invariant.
TraceGrid aggregate_grid(std::span<const TraceResult> results);

// Levels whose largest subject-category effect reaches `fraction` of the
// grid-wide largest subject-category effect.
std::set<std::size_t> identify_critical_layers(const TraceGrid& grid, double fraction = 0.5);

// Block range to unlearn for a critical level set: level k feeds block k,
// so [min, min(max, L-1)].
LayerRange critical_block_range(const std::set<std::size_t>& levels, std::size_t num_layers);

// Mean subject-category effect over the levels in [lo, hi).
double mean_subject_effect(const TraceGrid& grid, std::size_t lo, std::size_t hi);

struct TraceRun {
  std::vector<TraceResult> results;
  TraceGrid grid;
  std::set<std::size_t> critical_levels;
  double noise_std = 0.0;
  double embed_std = 0.0;
};

// Traces the QA facts of `split` (capped at max_facts, in corpus order).
TraceRun run_tracing(const Transformer& model, const Corpus& corpus, Split split,
                     const TraceConfig& config);

// CSV grid (header of level indices, one row per category, "NA" for absent
// categories) and a JSON metadata file.
void save_grid_csv(const TraceGrid& grid, const std::filesystem::path& path);
void save_trace_metadata(const TraceRun& run, const TraceConfig& config,
                         const std::filesystem::path& path);

}  // namespace ulab
