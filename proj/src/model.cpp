#include "ulab/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <random>
#include <stdexcept>

#include "ulab/kernels.hpp"

namespace ulab {

void ModelConfig::validate() const {
  ULAB_REQUIRE(num_layers > 0, "model: num_layers must be positive");
  ULAB_REQUIRE(d_model > 0 && num_heads > 0 && d_mlp > 0, "model: widths must be positive");
  ULAB_REQUIRE(d_model % num_heads == 0, "model: d_model must be divisible by num_heads");
  ULAB_REQUIRE(vocab_size > 0, "model: vocab_size must be positive");
  ULAB_REQUIRE(max_seq_len > 0, "model: max_seq_len must be positive");
}

const char* kind_name(ParamKind kind) {
  switch (kind) {
    case ParamKind::kMhsa: return "MHSA";
    case ParamKind::kMlp: return "MLP";
    case ParamKind::kEmbed: return "EMBED";
    case ParamKind::kNorm: return "NORM";
    case ParamKind::kLmHead: return "LM_HEAD";
  }
  return "?";
}

std::optional<ParamKind> parse_kind(std::string_view name) {
  for (ParamKind k : {ParamKind::kMhsa, ParamKind::kMlp, ParamKind::kEmbed, ParamKind::kNorm,
                      ParamKind::kLmHead})
    if (name == kind_name(k)) return k;
  return std::nullopt;
}

ParameterSet::ParameterSet(std::vector<ParamId> ids) : ids_(std::move(ids)) {
  std::sort(ids_.begin(), ids_.end());
  ids_.erase(std::unique(ids_.begin(), ids_.end()), ids_.end());
}

bool ParameterSet::contains(ParamId id) const {
  return std::binary_search(ids_.begin(), ids_.end(), id);
}

ParamId Transformer::add_param(std::string name, ParameterGroupId group, Shape shape) {
  params_.push_back(Parameter{std::move(name), group, Tensor(std::move(shape), 0.0)});
  return params_.size() - 1;
}

Transformer::Transformer(const ModelConfig& config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model, V = config_.vocab_size, F = config_.d_mlp;
  const ParameterGroupId embed{kNoLayer, ParamKind::kEmbed};
  layout_.tok_embed = add_param("tok_embed", embed, {V, d});
  layout_.pos_embed = add_param("pos_embed", embed, {config_.max_seq_len, d});
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const int li = static_cast<int>(l);
    const std::string p = "block" + std::to_string(l) + ".";
    const ParameterGroupId norm{li, ParamKind::kNorm}, attn{li, ParamKind::kMhsa},
        mlp{li, ParamKind::kMlp};
    BlockParams b{};
    b.ln1_gain = add_param(p + "ln1.gain", norm, {d});
    b.ln1_bias = add_param(p + "ln1.bias", norm, {d});
    b.wq = add_param(p + "attn.wq", attn, {d, d});
    b.bq = add_param(p + "attn.bq", attn, {d});
    b.wk = add_param(p + "attn.wk", attn, {d, d});
    b.bk = add_param(p + "attn.bk", attn, {d});
    b.wv = add_param(p + "attn.wv", attn, {d, d});
    b.bv = add_param(p + "attn.bv", attn, {d});
    b.wo = add_param(p + "attn.wo", attn, {d, d});
    b.bo = add_param(p + "attn.bo", attn, {d});
    b.ln2_gain = add_param(p + "ln2.gain", norm, {d});
    b.ln2_bias = add_param(p + "ln2.bias", norm, {d});
    b.w1 = add_param(p + "mlp.w1", mlp, {d, F});
    b.b1 = add_param(p + "mlp.b1", mlp, {F});
    b.w2 = add_param(p + "mlp.w2", mlp, {F, d});
    b.b2 = add_param(p + "mlp.b2", mlp, {d});
    layout_.blocks.push_back(b);
  }
  layout_.final_gain = add_param("final_norm.gain", {kNoLayer, ParamKind::kNorm}, {d});
  layout_.final_bias = add_param("final_norm.bias", {kNoLayer, ParamKind::kNorm}, {d});
  layout_.head_w = add_param("lm_head.w", {kNoLayer, ParamKind::kLmHead}, {d, V});
  layout_.head_b = add_param("lm_head.b", {kNoLayer, ParamKind::kLmHead}, {V});

  std::mt19937_64 rng(config_.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double std_base = 0.02;
  const double std_out = std_base / std::sqrt(2.0 * static_cast<double>(config_.num_layers));
  for (Parameter& p : params_) {
    const bool is_gain = p.name.ends_with(".gain");
    const bool is_matrix = p.value.rank() == 2;
    if (is_gain) {
      p.value.fill(1.0);
    } else if (is_matrix) {
      const bool residual_out = p.name.ends_with("attn.wo") || p.name.ends_with("mlp.w2");
      const double s = residual_out ? std_out : std_base;
      for (double& v : p.value.data()) v = s * normal(rng);
    }
  }
}

std::size_t Transformer::num_scalars() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += p.value.size();
  return n;
}

std::size_t Transformer::num_scalars(const ParameterSet& set) const {
  std::size_t n = 0;
  for (ParamId id : set.ids()) n += params_.at(id).value.size();
  return n;
}

Var Transformer::build(Tape& tape, std::span<const TokenId> tokens,
                       const BuildOptions& options) const {
  const std::size_t L = config_.num_layers, d = config_.d_model;
  const std::size_t H = config_.num_heads;
  ULAB_REQUIRE(options.start_level <= L, "forward: start level out of range");
  std::size_t T = tokens.size();
  if (options.start_level > 0)
    ULAB_REQUIRE(options.start_states != nullptr, "forward: resuming needs start states");
  if (options.start_states != nullptr) {
    T = options.start_states->rows();
    ULAB_REQUIRE(options.start_states->shape() == Shape({T, d}),
            "forward: start states must have shape [T, d_model]");
  }
  ULAB_REQUIRE(T > 0, "forward: empty token sequence");
  std::vector<std::size_t> segments(options.segments.begin(), options.segments.end());
  if (segments.empty()) segments.push_back(T);
  std::size_t packed = 0;
  for (std::size_t len : segments) {
    ULAB_REQUIRE(len > 0, "forward: empty segment");
    ULAB_REQUIRE(len <= config_.max_seq_len, "forward: sequence of " + std::to_string(len) +
                                                 " tokens exceeds max_seq_len " +
                                                 std::to_string(config_.max_seq_len));
    packed += len;
  }
  ULAB_REQUIRE(packed == T, "forward: segment lengths must sum to the token count");
  for (const Patch& p : options.patches) {
    ULAB_REQUIRE(p.position < T, "forward: patch position " + std::to_string(p.position) +
                                " out of range for " + std::to_string(T) + " tokens");
    ULAB_REQUIRE(p.layer <= L, "forward: patch layer " + std::to_string(p.layer) + " out of range");
    ULAB_REQUIRE(p.layer >= options.start_level, "forward: patch below the resume level");
    ULAB_REQUIRE(p.vector.size() == d, "forward: patch vector width must equal d_model");
  }
  if (options.capture) options.capture->assign(L + 1, Tensor());

  std::vector<Var> bound(params_.size());
  auto P = [&](ParamId id) -> Var {
    if (!bound[id].valid()) {
      const bool grad = options.trainable != nullptr && options.trainable->contains(id);
      bound[id] = tape.parameter(id, params_[id].value, grad);
    }
    return bound[id];
  };
  auto settle = [&](Var h, std::size_t level) {
    for (const Patch& p : options.patches)
      if (p.layer == level) h = ops::set_row(h, p.position, p.vector);
    if (options.capture) (*options.capture)[level] = h.value();
    return h;
  };

  Var h;
  if (options.start_states == nullptr) {
    std::vector<TokenId> positions;
    positions.reserve(T);
    for (std::size_t len : segments)
      for (std::size_t i = 0; i < len; ++i) positions.push_back(static_cast<TokenId>(i));
    h = ops::add(ops::embedding(P(layout_.tok_embed), tokens),
                 ops::embedding(P(layout_.pos_embed), positions));
  } else {
    h = tape.constant(*options.start_states);
  }
  h = settle(h, options.start_level);

  for (std::size_t l = options.start_level; l < L; ++l) {
    const BlockParams& b = layout_.blocks[l];
    Var a = ops::layer_norm(h, P(b.ln1_gain), P(b.ln1_bias));
    Var q = ops::add_bias(ops::matmul(a, P(b.wq)), P(b.bq));
    Var k = ops::add_bias(ops::matmul(a, P(b.wk)), P(b.bk));
    Var v = ops::add_bias(ops::matmul(a, P(b.wv)), P(b.bv));
    Var ctx = ops::causal_attention(q, k, v, H, segments);
    h = ops::add(h, ops::add_bias(ops::matmul(ctx, P(b.wo)), P(b.bo)));
    Var m = ops::layer_norm(h, P(b.ln2_gain), P(b.ln2_bias));
    Var u = ops::gelu(ops::add_bias(ops::matmul(m, P(b.w1)), P(b.b1)));
    h = ops::add(h, ops::add_bias(ops::matmul(u, P(b.w2)), P(b.b2)));
    h = settle(h, l + 1);
  }
  Var f = ops::layer_norm(h, P(layout_.final_gain), P(layout_.final_bias));
  return ops::add_bias(ops::matmul(f, P(layout_.head_w)), P(layout_.head_b));
}

namespace {

Tensor softmax_rows(const Tensor& logits) {
  Tensor p = log_softmax_rows(logits);
  for (double& v : p.data()) v = std::exp(v);
  return p;
}

}  // namespace

ForwardResult forward(const Transformer& model, std::span<const TokenId> tokens, bool capture,
                      std::span<const Patch> patches) {
  Tape tape;
  std::vector<Tensor> levels;
  Transformer::BuildOptions opts;
  opts.patches = patches;
  opts.capture = capture ? &levels : nullptr;
  Var logits = model.build(tape, tokens, opts);
  ForwardResult out{logits.value(), std::nullopt};
  if (capture) out.cache = HiddenStateCache{std::move(levels), softmax_rows(out.logits)};
  return out;
}

Tensor forward_from_level(const Transformer& model, std::size_t level, const Tensor& states,
                          std::span<const Patch> patches) {
  Tape tape;
  Transformer::BuildOptions opts;
  opts.patches = patches;
  opts.start_level = level;
  opts.start_states = &states;
  return model.build(tape, {}, opts).value();
}

Var sequence_loss(Tape& tape, const Transformer& model, std::span<const TokenId> input,
                  std::span<const TokenId> output, const ParameterSet* trainable) {
  ULAB_REQUIRE(!input.empty(), "sequence_nll: empty input");
  ULAB_REQUIRE(!output.empty(), "sequence_nll: empty output");
  const std::size_t m = input.size(), n = output.size();
  ULAB_REQUIRE(m + n <= model.config().max_seq_len, "sequence_nll: x||y exceeds max_seq_len");
  // Feed x || y[0..n-2]; row i predicts token i+1 of x || y.
  std::vector<TokenId> tokens(input.begin(), input.end());
  tokens.insert(tokens.end(), output.begin(), output.end() - 1);
  std::vector<TokenId> targets(tokens.size());
  auto mask = std::make_unique<bool[]>(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    targets[i] = i + 1 < m ? input[i + 1] : output[i + 1 - m];
    mask[i] = i + 1 >= m;
  }
  Transformer::BuildOptions opts;
  opts.trainable = trainable;
  Var logits = model.build(tape, tokens, opts);
  return ops::masked_cross_entropy(logits, targets, std::span<const bool>(mask.get(), tokens.size()));
}

double sequence_nll(const Transformer& model, std::span<const TokenId> input,
                    std::span<const TokenId> output) {
  Tape tape;
  return sequence_loss(tape, model, input, output, nullptr).value().item();
}

PackedBatch pack_batch(std::span<const LossItem> items) {
  ULAB_REQUIRE(!items.empty(), "pack_batch: no items");
  PackedBatch b;
  for (const LossItem& it : items) {
    ULAB_REQUIRE(!it.input.empty() && !it.output.empty(), "pack_batch: empty input or output");
    const std::size_t m = it.input.size(), len = m + it.output.size() - 1;
    b.offsets.push_back(b.tokens.size());
    b.segments.push_back(len);
    b.tokens.insert(b.tokens.end(), it.input.begin(), it.input.end());
    b.tokens.insert(b.tokens.end(), it.output.begin(), it.output.end() - 1);
    for (std::size_t i = 0; i < len; ++i) {
      b.targets.push_back(i + 1 < m ? it.input[i + 1] : it.output[i + 1 - m]);
      b.row_weights.push_back(i + 1 >= m ? it.weight : 0.0);
    }
  }
  return b;
}

Var packed_logits(Tape& tape, const Transformer& model, const PackedBatch& batch,
                  const ParameterSet* trainable) {
  Transformer::BuildOptions opts;
  opts.trainable = trainable;
  opts.segments = batch.segments;
  return model.build(tape, batch.tokens, opts);
}

Var batch_sequence_loss(Tape& tape, const Transformer& model, std::span<const LossItem> items,
                        const ParameterSet* trainable) {
  const PackedBatch b = pack_batch(items);
  return ops::weighted_cross_entropy(packed_logits(tape, model, b, trainable), b.targets,
                                     b.row_weights);
}

ParameterSet select_parameters(const Transformer& model, std::optional<LayerRange> layers,
                               const std::set<ParamKind>& kinds) {
  ULAB_REQUIRE(!kinds.empty(), "select_parameters: no module kinds given");
  if (layers) {
    ULAB_REQUIRE(layers->lo <= layers->hi && layers->hi < model.config().num_layers,
            "select_parameters: layer range [" + std::to_string(layers->lo) + ", " +
                std::to_string(layers->hi) + "] outside model depth " +
                std::to_string(model.config().num_layers));
  }
  std::vector<ParamId> ids;
  const auto params = model.parameters();
  for (ParamId id = 0; id < params.size(); ++id) {
    const ParameterGroupId& g = params[id].group;
    if (!kinds.contains(g.kind)) continue;
    if (layers) {
      if (g.layer == kNoLayer) continue;
      const auto li = static_cast<std::size_t>(g.layer);
      if (li < layers->lo || li > layers->hi) continue;
    }
    ids.push_back(id);
  }
  ULAB_REQUIRE(!ids.empty(), "select_parameters: selection is empty");
  return ParameterSet(std::move(ids));
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

IncrementalDecoder::IncrementalDecoder(const Transformer& model)
    : model_(model), keys_(model.config().num_layers), values_(model.config().num_layers) {}

std::vector<double> IncrementalDecoder::step(TokenId token) {
  const ModelConfig& c = model_.config();
  const std::size_t d = c.d_model, F = c.d_mlp, V = c.vocab_size, H = c.num_heads;
  const std::size_t dh = c.head_dim();
  ULAB_REQUIRE(pos_ < c.max_seq_len, "decoder: sequence exceeds max_seq_len");
  ULAB_REQUIRE(token >= 0 && static_cast<std::size_t>(token) < V, "decoder: token out of range");
  const auto& lay = model_.layout();
  auto W = [&](ParamId id) { return model_.parameter(id).value.ptr(); };

  std::vector<double> x(d), a(d), xhat(d), q(d), kv(d), ctx(d), o(d), u(F);
  const double* te = W(lay.tok_embed) + static_cast<std::size_t>(token) * d;
  const double* pe = W(lay.pos_embed) + pos_ * d;
  for (std::size_t j = 0; j < d; ++j) x[j] = te[j] + pe[j];

  auto norm = [&](const double* in, ParamId gain, ParamId bias, double* out) {
    kernels::layer_norm_row(in, xhat.data(), d);
    const double* g = W(gain);
    const double* b = W(bias);
    for (std::size_t j = 0; j < d; ++j) out[j] = xhat[j] * g[j] + b[j];
  };
  auto linear = [&](const double* in, ParamId w, ParamId b, double* out, std::size_t k,
                    std::size_t n) {
    std::fill(out, out + n, 0.0);
    kernels::matmul_acc(in, W(w), out, 1, k, n);
    const double* bv = W(b);
    for (std::size_t j = 0; j < n; ++j) out[j] += bv[j];
  };

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t len = pos_ + 1;
  std::vector<double> scores(len), probs(len), kh(len * dh), vh(len * dh);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const auto& b = lay.blocks[l];
    norm(x.data(), b.ln1_gain, b.ln1_bias, a.data());
    linear(a.data(), b.wq, b.bq, q.data(), d, d);
    linear(a.data(), b.wk, b.bk, kv.data(), d, d);
    keys_[l].insert(keys_[l].end(), kv.begin(), kv.end());
    linear(a.data(), b.wv, b.bv, kv.data(), d, d);
    values_[l].insert(values_[l].end(), kv.begin(), kv.end());
    for (std::size_t hd = 0; hd < H; ++hd) {
      for (std::size_t p = 0; p < len; ++p) {
        std::copy_n(keys_[l].data() + p * d + hd * dh, dh, kh.data() + p * dh);
        std::copy_n(values_[l].data() + p * d + hd * dh, dh, vh.data() + p * dh);
      }
      kernels::matmul_nt(q.data() + hd * dh, kh.data(), scores.data(), 1, dh, len);
      for (double& s : scores) s *= inv_sqrt_dh;
      kernels::softmax_prefix(scores.data(), probs.data(), len, len);
      std::fill(ctx.begin() + hd * dh, ctx.begin() + (hd + 1) * dh, 0.0);
      kernels::matmul_acc(probs.data(), vh.data(), ctx.data() + hd * dh, 1, len, dh);
    }
    linear(ctx.data(), b.wo, b.bo, o.data(), d, d);
    for (std::size_t j = 0; j < d; ++j) x[j] += o[j];
    norm(x.data(), b.ln2_gain, b.ln2_bias, a.data());
    linear(a.data(), b.w1, b.b1, u.data(), d, F);
    for (double& v : u) v = kernels::gelu(v);
    linear(u.data(), b.w2, b.b2, o.data(), F, d);
    for (std::size_t j = 0; j < d; ++j) x[j] += o[j];
  }
  norm(x.data(), lay.final_gain, lay.final_bias, a.data());
  std::vector<double> logits(V);
  linear(a.data(), lay.head_w, lay.head_b, logits.data(), d, V);
  ++pos_;
  return logits;
}

std::vector<TokenId> greedy_generate(const Transformer& model, std::span<const TokenId> prompt,
                                     std::size_t max_new, std::optional<TokenId> eos) {
  ULAB_REQUIRE(!prompt.empty(), "greedy_generate: empty prompt");
  std::vector<TokenId> out(prompt.begin(), prompt.end());
  if (max_new == 0) return out;
  ULAB_REQUIRE(prompt.size() <= model.config().max_seq_len, "greedy_generate: prompt too long");
  IncrementalDecoder dec(model);
  std::vector<double> logits;
  for (TokenId t : prompt) logits = dec.step(t);
  for (std::size_t i = 0; i < max_new; ++i) {
    const auto next = static_cast<TokenId>(argmax(logits));
    out.push_back(next);
    if (eos && next == *eos) break;
    if (i + 1 == max_new || dec.position() >= model.config().max_seq_len) break;
    logits = dec.step(next);
  }
  return out;
}

namespace {

constexpr char kMagic[4] = {'U', 'L', 'F', 'G'};

template <typename T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: unexpected end of file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace

void save_checkpoint(const Transformer& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  const ModelConfig& c = model.config();
  for (std::size_t v : {c.num_layers, c.d_model, c.num_heads, c.d_mlp, c.vocab_size, c.max_seq_len})
    put<std::uint64_t>(os, v);
  put<std::uint64_t>(os, c.seed);
  const auto params = model.parameters();
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const Parameter& p : params) {
    put<std::int32_t>(os, p.group.layer);
    put<std::uint8_t>(os, static_cast<std::uint8_t>(p.group.kind));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t dim : p.value.shape()) put<std::uint64_t>(os, dim);
    for (double v : p.value.data()) put<double>(os, v);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Transformer load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: " + path.string() + " is not a ULFG checkpoint");
  const auto version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  ModelConfig c;
  c.num_layers = get<std::uint64_t>(is);
  c.d_model = get<std::uint64_t>(is);
  c.num_heads = get<std::uint64_t>(is);
  c.d_mlp = get<std::uint64_t>(is);
  c.vocab_size = get<std::uint64_t>(is);
  c.max_seq_len = get<std::uint64_t>(is);
  c.seed = get<std::uint64_t>(is);
  Transformer model(c);
  const auto count = get<std::uint32_t>(is);
  if (count != model.parameters().size())
    throw std::runtime_error("checkpoint: parameter count does not match its config");
  for (Parameter& p : model.parameters()) {
    ParameterGroupId g;
    g.layer = get<std::int32_t>(is);
    g.kind = static_cast<ParamKind>(get<std::uint8_t>(is));
    if (g != p.group) throw std::runtime_error("checkpoint: parameter group mismatch at " + p.name);
    const auto rank = get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& dim : shape) dim = get<std::uint64_t>(is);
    if (shape != p.value.shape())
      throw std::runtime_error("checkpoint: shape mismatch at " + p.name);
    for (double& v : p.value.data()) v = get<double>(is);
  }
  return model;
}

}  // namespace ulab
