#pragma once

// Small pre-norm decoder-only transformer.
//
// Hidden-state levels follow the residual stream: level 0 is token plus
// positional embedding, level l (1 <= l <= L) is the output of block l-1.
// Patches overwrite one (position, level) residual vector before anything
// downstream reads it.

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ulab/autograd.hpp"

namespace ulab {

struct ModelConfig {
  std::size_t num_layers = 8;
  std::size_t d_model = 128;
  std::size_t num_heads = 4;
  std::size_t d_mlp = 512;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 64;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t head_dim() const { return d_model / num_heads; }
  bool operator==(const ModelConfig&) const = default;
};

enum class ParamKind : std::uint8_t { kMhsa = 0, kMlp = 1, kEmbed = 2, kNorm = 3, kLmHead = 4 };

const char* kind_name(ParamKind kind);
std::optional<ParamKind> parse_kind(std::string_view name);

// Layer index used by groups that sit outside the transformer blocks.
inline constexpr int kNoLayer = -1;

struct ParameterGroupId {
  int layer = kNoLayer;
  ParamKind kind = ParamKind::kEmbed;
  auto operator<=>(const ParameterGroupId&) const = default;
};

struct Parameter {
  std::string name;
  ParameterGroupId group;
  Tensor value;
};

struct LayerRange {
  std::size_t lo = 0;
  std::size_t hi = 0;  // inclusive
  bool operator==(const LayerRange&) const = default;
};

// Sorted, duplicate-free set of parameter indices.
class ParameterSet {
 public:
  ParameterSet() = default;
  explicit ParameterSet(std::vector<ParamId> ids);

  bool contains(ParamId id) const;
  std::span<const ParamId> ids() const { return ids_; }
  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }

 private:
  std::vector<ParamId> ids_;
};

struct Patch {
  std::size_t position = 0;
  std::size_t layer = 0;
  std::vector<double> vector;
};

struct HiddenStateCache {
  std::vector<Tensor> levels;  // L+1 tensors of shape [T, d_model]
  Tensor probs;                // [T, V] output distribution

  std::span<const double> state(std::size_t position, std::size_t level) const {
    return levels.at(level).row(position);
  }
};

struct ForwardResult {
  Tensor logits;  // [T, V]
  std::optional<HiddenStateCache> cache;
};

class Transformer {
 public:
  explicit Transformer(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::span<const Parameter> parameters() const { return params_; }
  std::span<Parameter> parameters() { return params_; }
  const Parameter& parameter(ParamId id) const { return params_.at(id); }
  Parameter& parameter(ParamId id) { return params_.at(id); }
  std::size_t num_scalars() const;
  std::size_t num_scalars(const ParameterSet& set) const;

  struct BuildOptions {
    const ParameterSet* trainable = nullptr;  // null: everything frozen
    std::span<const Patch> patches;
    std::vector<Tensor>* capture = nullptr;   // receives levels >= start_level
    std::size_t start_level = 0;
    const Tensor* start_states = nullptr;     // [T, d] states when start_level > 0
    // Lengths of independent sequences packed into `tokens` (empty: one).
    // Positions restart and attention stays inside each one.
    std::span<const std::size_t> segments;
  };

  // Builds the forward graph and returns the logits Var [T, V].
  Var build(Tape& tape, std::span<const TokenId> tokens, const BuildOptions& options) const;

  // Binding of the model's parameter indices, in declaration order.
  struct BlockParams {
    ParamId ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo;
    ParamId ln2_gain, ln2_bias, w1, b1, w2, b2;
  };
  struct Layout {
    ParamId tok_embed, pos_embed;
    std::vector<BlockParams> blocks;
    ParamId final_gain, final_bias, head_w, head_b;
  };
  const Layout& layout() const { return layout_; }

 private:
  ParamId add_param(std::string name, ParameterGroupId group, Shape shape);

  ModelConfig config_;
  std::vector<Parameter> params_;
  Layout layout_;
};

// One full forward pass. With `capture`, returns every level's post-patch
// states and the output probabilities.
ForwardResult forward(const Transformer& model, std::span<const TokenId> tokens, bool capture,
                      std::span<const Patch> patches = {});

// Re-runs the blocks from `level` onward, starting from given [T, d] states at
// that level. Patches below `level` are rejected. Produces the same logits
// as a full forward pass that reaches identical states at `level`.
Tensor forward_from_level(const Transformer& model, std::size_t level, const Tensor& states,
                          std::span<const Patch> patches = {});

// Builds x||y, runs the model and returns the summed negative log-likelihood
// of the output tokens only.
Var sequence_loss(Tape& tape, const Transformer& model, std::span<const TokenId> input,
                  std::span<const TokenId> output, const ParameterSet* trainable);
double sequence_nll(const Transformer& model, std::span<const TokenId> input,
                    std::span<const TokenId> output);

// Several (x, y) pairs packed into one forward pass. Row weights carry each
// item's weight on its output rows and zero elsewhere.
struct LossItem {
  std::span<const TokenId> input, output;
  double weight = 1.0;
};
struct PackedBatch {
  std::vector<TokenId> tokens, targets;
  std::vector<std::size_t> segments;
  std::vector<double> row_weights;
  std::vector<std::size_t> offsets;  // first row of each item
};
PackedBatch pack_batch(std::span<const LossItem> items);
Var packed_logits(Tape& tape, const Transformer& model, const PackedBatch& batch,
                  const ParameterSet* trainable);
// sum_k weight_k * NLL(y_k | x_k).
Var batch_sequence_loss(Tape& tape, const Transformer& model, std::span<const LossItem> items,
                        const ParameterSet* trainable);

// Parameters whose group matches a kind in `kinds` and, when `layers` is set,
// a block layer inside the inclusive range. Without a range every group of
// those kinds matches, including the non-block ones.
ParameterSet select_parameters(const Transformer& model, std::optional<LayerRange> layers,
                               const std::set<ParamKind>& kinds);

// Greedy decoding with lowest-id tie breaking. Stops after `max_new` tokens
// or right after emitting `eos`. Returns prompt followed by the new tokens.
std::vector<TokenId> greedy_generate(const Transformer& model, std::span<const TokenId> prompt,
                                     std::size_t max_new, std::optional<TokenId> eos = {});

std::size_t argmax(std::span<const double> row);

// Incremental decoding with cached keys/values. Each step's logits are
// bit-identical to the matching row of a full forward pass.
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const Transformer& model);
  std::vector<double> step(TokenId token);
  std::size_t position() const { return pos_; }

 private:
  const Transformer& model_;
  std::size_t pos_ = 0;
  std::vector<std::vector<double>> keys_, values_;  // per layer, [pos, d] flattened
};

// Binary checkpoint: "ULFG", u32 version, config, then every parameter in
// declaration order as (i32 layer, u8 kind, u32 rank, u64 dims..., f64 data).
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const Transformer& model, const std::filesystem::path& path);
Transformer load_checkpoint(const std::filesystem::path& path);

}  // namespace ulab
