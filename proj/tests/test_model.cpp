#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "ulab/model.hpp"

using namespace ulab;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.num_layers = 3;
  c.d_model = 16;
  c.num_heads = 2;
  c.d_mlp = 32;
  c.vocab_size = 23;
  c.max_seq_len = 16;
  c.seed = 5;
  return c;
}

std::vector<TokenId> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::uniform_int_distribution<TokenId> pick(0, static_cast<TokenId>(vocab - 1));
  std::vector<TokenId> t(n);
  for (auto& v : t) v = pick(rng);
  return t;
}

std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = tiny_config();
  c.num_heads = 3;
  CHECK_THROWS_AS(Transformer{c}, ContractViolation);
}

TEST_CASE("forward shape, errors and causal masking") {
  Transformer model(tiny_config());
  std::mt19937_64 rng(1);
  auto tokens = random_tokens(rng, 9, 23);
  ForwardResult r = forward(model, tokens, true);
  CHECK(r.logits.shape() == Shape({9, 23}));
  REQUIRE(r.cache.has_value());
  CHECK(r.cache->levels.size() == 4);
  for (const Tensor& lvl : r.cache->levels) CHECK(lvl.shape() == Shape({9, 16}));
  CHECK(r.cache->probs.shape() == Shape({9, 23}));

  CHECK_THROWS_AS(forward(model, std::vector<TokenId>{}, false), ContractViolation);
  std::vector<Patch> bad{Patch{9, 0, std::vector<double>(16)}};
  CHECK_THROWS_AS(forward(model, tokens, false, bad), ContractViolation);
  bad = {Patch{0, 4, std::vector<double>(16)}};
  CHECK_THROWS_AS(forward(model, tokens, false, bad), ContractViolation);

  for (std::size_t j = 0; j < tokens.size(); ++j) {
    auto changed = tokens;
    changed[j] = (changed[j] + 1) % 23;
    Tensor other = forward(model, changed, false).logits;
    for (std::size_t i = 0; i < j; ++i) CHECK(to_vec(other.row(i)) == to_vec(r.logits.row(i)));
  }
}

TEST_CASE("patching with the run's own states is an identity") {
  Transformer model(tiny_config());
  std::mt19937_64 rng(2);
  auto tokens = random_tokens(rng, 7, 23);
  ForwardResult clean = forward(model, tokens, true);
  for (std::size_t k = 0; k <= 3; ++k) {
    std::vector<Patch> patches;
    for (std::size_t p = 0; p < tokens.size(); ++p)
      patches.push_back(Patch{p, k, to_vec(clean.cache->state(p, k))});
    CHECK(forward(model, tokens, false, patches).logits == clean.logits);
  }
}

TEST_CASE("full-layer clean restoration undoes an upstream corruption") {
  Transformer model(tiny_config());
  std::mt19937_64 rng(3);
  auto tokens = random_tokens(rng, 8, 23);
  ForwardResult clean = forward(model, tokens, true);
  std::vector<Patch> corrupt;
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t p = 1; p < 4; ++p) {
    auto v = to_vec(clean.cache->state(p, 0));
    for (double& x : v) x += noise(rng);
    corrupt.push_back(Patch{p, 0, v});
  }
  Tensor corrupted = forward(model, tokens, false, corrupt).logits;
  CHECK(corrupted != clean.logits);
  for (std::size_t k = 1; k <= 3; ++k) {
    auto patches = corrupt;
    for (std::size_t p = 0; p < tokens.size(); ++p)
      patches.push_back(Patch{p, k, to_vec(clean.cache->state(p, k))});
    Tensor restored = forward(model, tokens, false, patches).logits;
    double worst = 0.0;
    for (std::size_t i = 0; i < restored.size(); ++i)
      worst = std::max(worst, std::abs(restored[i] - clean.logits[i]));
    CHECK(worst <= 1e-12);
  }
}

TEST_CASE("resuming from a cached level reproduces the full pass") {
  Transformer model(tiny_config());
  std::mt19937_64 rng(4);
  auto tokens = random_tokens(rng, 6, 23);
  ForwardResult clean = forward(model, tokens, true);
  for (std::size_t k = 0; k <= 3; ++k) {
    std::vector<Patch> patch{Patch{2, k, std::vector<double>(16, 0.5)}};
    Tensor full = forward(model, tokens, false, patch).logits;
    Tensor resumed = forward_from_level(model, k, clean.cache->levels[k], patch);
    CHECK(full == resumed);
  }
}

TEST_CASE("incremental decoder matches full forward rows bit for bit") {
  ModelConfig c = tiny_config();
  c.d_model = 40;  // exercises the column tail of the blocked kernel
  c.num_heads = 4;
  Transformer model(c);
  std::mt19937_64 rng(5);
  auto tokens = random_tokens(rng, 11, c.vocab_size);
  Tensor full = forward(model, tokens, false).logits;
  IncrementalDecoder dec(model);
  for (std::size_t i = 0; i < tokens.size(); ++i) CHECK(dec.step(tokens[i]) == to_vec(full.row(i)));
}

TEST_CASE("sequence negative log-likelihood") {
  ModelConfig c = tiny_config();
  Transformer model(c);
  std::vector<TokenId> x{1, 2, 3}, y{4, 5, 6, 7};
  const double nll = sequence_nll(model, x, y);
  CHECK(std::abs(nll - 4.0 * std::log(23.0)) <= 0.15 * 4.0 * std::log(23.0));

  std::vector<TokenId> x2{1, 9, 3};
  CHECK(sequence_nll(model, x2, y) != nll);
  CHECK_THROWS_AS(sequence_nll(model, x, std::vector<TokenId>{}), ContractViolation);
  CHECK_THROWS_AS(sequence_nll(model, std::vector<TokenId>(10, 1), std::vector<TokenId>(7, 1)),
                  ContractViolation);

  // The loss only reads targets at output positions.
  Tape t1, t2;
  std::vector<TokenId> tokens{1, 2, 3, 4, 5, 6};
  Transformer::BuildOptions o;
  Var l1 = model.build(t1, tokens, o);
  Var l2 = model.build(t2, tokens, o);
  std::vector<TokenId> ta{2, 3, 4, 5, 6, 7}, tb{9, 9, 4, 5, 6, 7};
  bool mask[6] = {false, false, true, true, true, true};
  CHECK(ops::masked_cross_entropy(l1, ta, mask).value() ==
        ops::masked_cross_entropy(l2, tb, mask).value());
}

TEST_CASE("full transformer loss gradient matches finite differences") {
  ModelConfig c;
  c.num_layers = 2;
  c.d_model = 8;
  c.num_heads = 2;
  c.d_mlp = 12;
  c.vocab_size = 7;
  c.max_seq_len = 8;
  c.seed = 9;
  Transformer model(c);
  // Spread parameters so gradients are not dominated by the tiny init.
  std::mt19937_64 rng(10);
  std::normal_distribution<double> normal(0.0, 0.3);
  for (Parameter& p : model.parameters())
    for (double& v : p.value.data()) v += normal(rng);
  std::vector<TokenId> x{1, 4, 2}, y{5, 0, 3};
  auto all = select_parameters(model, std::nullopt,
                               {ParamKind::kMhsa, ParamKind::kMlp, ParamKind::kEmbed,
                                ParamKind::kNorm, ParamKind::kLmHead});
  Tape tape;
  GradientMap g = tape.backward(sequence_loss(tape, model, x, y, &all));
  // One scale for the whole model: the key bias has an exactly zero gradient
  // (softmax ignores a per-row shift), so its own scale is rounding noise.
  double diff = 0.0, scale = 1e-6;
  const double h = 1e-5;
  for (ParamId id : all.ids()) {
    Tensor& w = model.parameter(id).value;
    Tensor numeric(w.shape(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + h;
      const double up = sequence_nll(model, x, y);
      w[i] = orig - h;
      const double down = sequence_nll(model, x, y);
      w[i] = orig;
      numeric[i] = (up - down) / (2 * h);
      diff = std::max(diff, std::abs(g.at(id)[i] - numeric[i]));
      scale = std::max(scale, std::abs(numeric[i]));
    }
    CHECK(testing::relative_error(g.at(id), numeric, 1e-3) <= 1e-4);
  }
  CHECK(diff / scale <= 1e-4);
}

TEST_CASE("parameter selection") {
  ModelConfig c;  // default desk architecture
  c.vocab_size = 50;
  Transformer model(c);
  const std::size_t d = c.d_model, f = c.d_mlp;
  auto mlp = select_parameters(model, LayerRange{0, 2}, {ParamKind::kMlp});
  CHECK(model.num_scalars(mlp) == 3 * (d * f + f + f * d + d));

  auto blocks = select_parameters(model, LayerRange{0, c.num_layers - 1},
                                  {ParamKind::kMhsa, ParamKind::kMlp});
  for (ParamId id : blocks.ids()) {
    const auto& g = model.parameter(id).group;
    CHECK(g.layer != kNoLayer);
    CHECK((g.kind == ParamKind::kMhsa || g.kind == ParamKind::kMlp));
  }
  std::size_t expected = 0;
  for (const Parameter& p : model.parameters())
    if (p.group.kind == ParamKind::kMhsa || p.group.kind == ParamKind::kMlp) ++expected;
  CHECK(blocks.size() == expected);

  std::set<ParamId> seen;
  std::size_t total = 0;
  for (ParamKind k : {ParamKind::kMhsa, ParamKind::kMlp, ParamKind::kEmbed, ParamKind::kNorm,
                      ParamKind::kLmHead}) {
    auto s = select_parameters(model, std::nullopt, {k});
    for (ParamId id : s.ids()) CHECK(seen.insert(id).second);
    total += s.size();
  }
  CHECK(total == model.parameters().size());

  CHECK_THROWS_AS(select_parameters(model, LayerRange{2, 1}, {ParamKind::kMlp}), ContractViolation);
  CHECK_THROWS_AS(select_parameters(model, LayerRange{0, c.num_layers}, {ParamKind::kMlp}),
                  ContractViolation);
  CHECK_THROWS_AS(select_parameters(model, LayerRange{0, 1}, {}), ContractViolation);
  CHECK_THROWS_AS(select_parameters(model, LayerRange{0, 1}, {ParamKind::kEmbed}),
                  ContractViolation);
}

TEST_CASE("greedy generation") {
  Transformer model(tiny_config());
  std::vector<TokenId> prompt{3, 1, 4};
  CHECK(greedy_generate(model, prompt, 0) == prompt);
  auto a = greedy_generate(model, prompt, 6);
  CHECK(a == greedy_generate(model, prompt, 6));
  CHECK(a.size() == 9);
  // Each generated token is the argmax of a full forward pass on its prefix.
  for (std::size_t i = prompt.size(); i < a.size(); ++i) {
    std::vector<TokenId> prefix(a.begin(), a.begin() + static_cast<long>(i));
    Tensor logits = forward(model, prefix, false).logits;
    CHECK(static_cast<TokenId>(argmax(logits.row(i - 1))) == a[i]);
  }
  const TokenId stop = a[prompt.size()];
  auto stopped = greedy_generate(model, prompt, 6, stop);
  CHECK(stopped.size() == prompt.size() + 1);
  CHECK_THROWS_AS(greedy_generate(model, std::vector<TokenId>{}, 3), ContractViolation);
  CHECK(argmax(std::vector<double>{1.0, 3.0, 3.0}) == 1);
}

TEST_CASE("checkpoint round trip") {
  Transformer model(tiny_config());
  const auto dir = std::filesystem::temp_directory_path() / "ulab_model_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "m.ulfg";
  save_checkpoint(model, path);
  Transformer loaded = load_checkpoint(path);
  CHECK(loaded.config() == model.config());
  for (std::size_t i = 0; i < model.parameters().size(); ++i)
    CHECK(loaded.parameters()[i].value == model.parameters()[i].value);

  std::ifstream in(path, std::ios::binary);
  char magic[4];
  in.read(magic, 4);
  CHECK(std::string(magic, 4) == "ULFG");

  {
    std::ofstream bad(dir / "bad.ulfg", std::ios::binary);
    bad << "NOPE";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ulfg"), std::runtime_error);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ulfg"), std::runtime_error);
}
