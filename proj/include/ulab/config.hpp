#pragma once

// Run configuration: a plain-text file of `section.key = value` lines with
// `#` comments. Every key is optional; unknown keys are rejected.

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include "ulab/corpus.hpp"
#include "ulab/model.hpp"
#include "ulab/tracing.hpp"
#include "ulab/train.hpp"
#include "ulab/unlearn.hpp"

namespace ulab {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  // Base seed; component seeds that are not set explicitly follow it.
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "ulab-out";

  CorpusCounts corpus;
  ModelConfig model;  // vocab_size comes from the tokenizer
  TrainConfig train;
  TraceConfig trace;
  Split trace_split = Split::kForget;
  UnlearnConfig unlearn;  // unset layer_range: take the traced critical blocks
  double alpha_curve_lo = -1.0;
  double alpha_curve_hi = 2.0;

  std::optional<std::uint64_t> corpus_seed, model_seed, train_seed, trace_seed, unlearn_seed;

  // Copy with every component seed filled in and the vocabulary size set.
  RunConfig resolved(std::size_t vocab_size) const;
  std::uint64_t corpus_seed_or_base() const { return corpus_seed.value_or(seed); }
};

// Throws ConfigError naming path:line for malformed lines, unknown or
// repeated keys and values of the wrong type.
RunConfig parse_config_text(const std::string& text, const std::string& origin = "<config>");
RunConfig parse_config(const std::filesystem::path& path);

}  // namespace ulab
