#include "ulab/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "ulab/parallel.hpp"

namespace ulab {

std::vector<double> accumulate_gradients(std::size_t count, const ExampleLoss& loss,
                                         std::span<const double> weights, GradientMap& into) {
  ULAB_REQUIRE(weights.size() == count, "accumulate_gradients: one weight per example");
  std::vector<double> values(count);
  if (worker_count() <= 1 || count <= 1) {
    for (std::size_t k = 0; k < count; ++k) {
      Tape tape;
      Var l = loss(tape, k);
      values[k] = l.value().item();
      tape.backward_into(l, into, weights[k]);
    }
    return values;
  }
  // Same arithmetic as the serial path: each example's contribution is
  // formed on its own, then added to `into` in index order.
  std::vector<GradientMap> parts(count);
  parallel_for(count, [&](std::size_t k) {
    Tape tape;
    Var l = loss(tape, k);
    values[k] = l.value().item();
    tape.backward_into(l, parts[k], weights[k]);
  });
  for (auto& part : parts) {
    for (auto& [id, g] : part) {
      auto it = into.find(id);
      if (it == into.end()) it = into.emplace(id, Tensor(g.shape(), 0.0)).first;
      auto dst = it->second.data();
      auto src = g.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
    part.clear();
  }
  return values;
}

ParamRefs parameter_refs(Transformer& model, const ParameterSet& set) {
  ParamRefs refs;
  for (ParamId id : set.ids()) refs.emplace_back(id, &model.parameter(id).value);
  return refs;
}

TeacherForced teacher_forced(const Transformer& model, const EncodedExample& ex) {
  const std::size_t m = ex.input.size(), n = ex.output.size();
  std::vector<TokenId> tokens(ex.input);
  tokens.insert(tokens.end(), ex.output.begin(), ex.output.end() - 1);
  const Tensor logits = forward(model, tokens, false).logits;
  TeacherForced out{0.0, true};
  for (std::size_t j = 0; j < n; ++j) {
    auto row = logits.row(m - 1 + j);
    const TokenId target = ex.output[j];
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    out.nll += std::log(z) + mx - row[static_cast<std::size_t>(target)];
    if (static_cast<TokenId>(argmax(row)) != target) out.exact = false;
  }
  return out;
}

void TrainConfig::validate() const {
  optimizer.validate();
  ULAB_REQUIRE(batch_size > 0, "train: batch_size must be positive");
  ULAB_REQUIRE(check_every > 0, "train: check_every must be positive");
  ULAB_REQUIRE(max_grad_norm >= 0.0, "train: max_grad_norm must be nonnegative");
  ULAB_REQUIRE(min_lr_ratio > 0.0 && min_lr_ratio <= 1.0, "train: min_lr_ratio must be in (0, 1]");
}

std::vector<const Example*> training_examples(const Corpus& corpus) {
  std::vector<const Example*> out;
  for (const auto& e : corpus.examples)
    if (e.split != Split::kHoldout) out.push_back(&e);
  return out;
}

namespace {

double scheduled_lr(const TrainConfig& c, std::size_t step, std::size_t total) {
  const double base = c.optimizer.learning_rate;
  if (step < c.warmup_steps) return base * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  const double span = static_cast<double>(std::max<std::size_t>(total - c.warmup_steps, 1));
  const double t = std::min(1.0, static_cast<double>(step - c.warmup_steps) / span);
  const double floor = base * c.min_lr_ratio;
  return floor + (base - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace

TrainReport train_memorization(Transformer& model, const Corpus& corpus, const TrainConfig& config,
                               const std::function<void(const TrainEpoch&)>& on_epoch) {
  config.validate();
  const auto examples = training_examples(corpus);
  ULAB_REQUIRE(!examples.empty(), "train: corpus has no training examples");
  std::vector<EncodedExample> encoded;
  for (const Example* e : examples) encoded.push_back(encode_example(*e, corpus.vocab));

  const ParameterSet all = select_parameters(
      model, std::nullopt,
      {ParamKind::kMhsa, ParamKind::kMlp, ParamKind::kEmbed, ParamKind::kNorm, ParamKind::kLmHead});
  const ParamRefs refs = parameter_refs(model, all);
  AdamW opt(config.optimizer);
  std::mt19937_64 rng(config.seed);

  const std::size_t n = encoded.size();
  const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.max_epochs;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  TrainReport report;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    TrainEpoch stats;
    stats.epoch = epoch;
    for (std::size_t start = 0; start < n; start += config.batch_size, ++step) {
      const std::size_t count = std::min(config.batch_size, n - start);
      std::vector<LossItem> items;
      for (std::size_t k = 0; k < count; ++k) {
        const EncodedExample& ex = encoded[order[start + k]];
        items.push_back(LossItem{ex.input, ex.output, 1.0 / static_cast<double>(count)});
      }
      GradientMap grads;
      const double one = 1.0;
      auto losses = accumulate_gradients(
          1, [&](Tape& tape, std::size_t) { return batch_sequence_loss(tape, model, items, &all); },
          std::span(&one, 1), grads);
      loss_sum += losses[0] * static_cast<double>(count);
      clip_global_norm(grads, config.max_grad_norm);
      stats.learning_rate = scheduled_lr(config, step, total_steps);
      opt.set_learning_rate(stats.learning_rate);
      opt.step(refs, grads);
    }
    stats.mean_loss = loss_sum / static_cast<double>(n);
    if (epoch % config.check_every == 0 || epoch == config.max_epochs) {
      std::vector<char> ok(n);
      parallel_for(n, [&](std::size_t i) { ok[i] = teacher_forced(model, encoded[i]).exact; });
      const auto hits = static_cast<std::size_t>(std::count(ok.begin(), ok.end(), 1));
      stats.exact_fraction = static_cast<double>(hits) / static_cast<double>(n);
      report.converged = hits == n;
    }
    report.epochs.push_back(stats);
    if (on_epoch) on_epoch(stats);
    if (report.converged) break;
  }
  return report;
}

}  // namespace ulab
