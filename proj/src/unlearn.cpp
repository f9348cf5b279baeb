#include "ulab/unlearn.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>
#include <stdexcept>

#include "ulab/parallel.hpp"
#include "ulab/train.hpp"

namespace ulab {

void AlphaSchedule::validate() const {
  ULAB_REQUIRE(std::isfinite(a) && std::isfinite(c), "alpha schedule: a and c must be finite");
  ULAB_REQUIRE(b > 0.0, "alpha schedule: b must be positive");
  ULAB_REQUIRE(alpha_min <= alpha_max, "alpha schedule: alpha_min must not exceed alpha_max");
}

double round_one_decimal(double x) { return std::round(x * 10.0) / 10.0; }

double compute_alpha(double delta_l, const AlphaSchedule& s, std::size_t epoch) {
  s.validate();
  if (epoch == 0) return s.alpha_min;
  const double gamma = s.a * std::pow(s.b, delta_l) + s.c;
  return std::clamp(round_one_decimal(gamma), s.alpha_min, s.alpha_max);
}

double joint_loss(double forget_nll, double retain_nll, double alpha) {
  ULAB_REQUIRE(alpha > 0.0, "joint_loss: alpha must be positive");
  return -forget_nll + alpha * retain_nll;
}

const char* method_name(Method m) {
  switch (m) {
    case Method::kConstrainedJoint: return "CONSTRAINED_JOINT";
    case Method::kGradAscent: return "GRAD_ASCENT";
    case Method::kGradDiff: return "GRAD_DIFF";
    case Method::kKlMin: return "KL_MIN";
  }
  return "?";
}

std::optional<Method> parse_method(std::string_view s) {
  for (Method m : {Method::kConstrainedJoint, Method::kGradAscent, Method::kGradDiff, Method::kKlMin})
    if (s == method_name(m)) return m;
  return std::nullopt;
}

double baseline_loss(Method method, double forget_nll, double retain_nll,
                     std::optional<double> retain_kl) {
  switch (method) {
    case Method::kGradAscent: return -forget_nll;
    case Method::kGradDiff: return -forget_nll + retain_nll;
    case Method::kKlMin:
      if (!retain_kl) throw std::invalid_argument("KL_MIN needs the retain KL against a reference model");
      return -forget_nll + *retain_kl;
    case Method::kConstrainedJoint: break;
  }
  throw std::invalid_argument("baseline_loss: constrained joint loss needs an alpha; use joint_loss");
}

void UnlearnConfig::validate(const ModelConfig& model) const {
  optimizer.validate();
  schedule.validate();
  ULAB_REQUIRE(batch_size > 0, "unlearn: batch_size must be positive");
  ULAB_REQUIRE(!kinds.empty(), "unlearn: no parameter kinds selected");
  if (layer_range)
    ULAB_REQUIRE(layer_range->lo <= layer_range->hi && layer_range->hi < model.num_layers,
                 "unlearn: layer range [" + std::to_string(layer_range->lo) + ", " +
                     std::to_string(layer_range->hi) + "] outside a " +
                     std::to_string(model.num_layers) + "-layer model");
}

namespace {

struct Fed {
  std::vector<TokenId> tokens, targets;
  std::unique_ptr<bool[]> mask;
};

// Same layout as sequence_loss: x || y[0..n-2], rows from m-1 predict y.
Fed feed(const EncodedExample& ex) {
  Fed f;
  const std::size_t m = ex.input.size();
  f.tokens = ex.input;
  f.tokens.insert(f.tokens.end(), ex.output.begin(), ex.output.end() - 1);
  f.targets.resize(f.tokens.size());
  f.mask = std::make_unique<bool[]>(f.tokens.size());
  for (std::size_t i = 0; i < f.tokens.size(); ++i) {
    f.targets[i] = i + 1 < m ? ex.input[i + 1] : ex.output[i + 1 - m];
    f.mask[i] = i + 1 >= m;
  }
  return f;
}

struct SplitScore {
  double loss = 0.0, knowledge = 0.0;
};

SplitScore score_split(const Transformer& model, const std::vector<EncodedExample>& encoded,
                       const std::vector<char>& is_qa) {
  std::vector<TeacherForced> tf(encoded.size());
  parallel_for(encoded.size(), [&](std::size_t i) { tf[i] = teacher_forced(model, encoded[i]); });
  SplitScore s;
  std::size_t qa = 0, hits = 0;
  for (std::size_t i = 0; i < tf.size(); ++i) {
    s.loss += tf[i].nll;
    if (is_qa[i]) {
      ++qa;
      hits += tf[i].exact;
    }
  }
  s.loss /= static_cast<double>(tf.size());
  s.knowledge = qa == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(qa);
  return s;
}

}  // namespace

UnlearnResult run_unlearning(Transformer& model, const Corpus& corpus, const UnlearnConfig& config,
                             const std::function<void(const EpochStats&)>& on_epoch) {
  config.validate(model.config());
  if (!config.layer_range) throw std::invalid_argument("unlearn: no layer range configured or traced");
  const auto forget_ex = corpus.select(Split::kForget);
  const auto retain_ex = corpus.select(Split::kRetain);
  if (forget_ex.empty() || retain_ex.empty())
    throw std::invalid_argument("unlearn: forget and retain splits must be nonempty");

  std::vector<EncodedExample> forget, retain;
  std::vector<char> forget_qa, retain_qa;
  for (const Example* e : forget_ex) {
    forget.push_back(encode_example(*e, corpus.vocab));
    forget_qa.push_back(e->task == Task::kQa);
  }
  for (const Example* e : retain_ex) {
    retain.push_back(encode_example(*e, corpus.vocab));
    retain_qa.push_back(e->task == Task::kQa);
  }

  const ParameterSet trainable = select_parameters(model, config.layer_range, config.kinds);
  const ParamRefs refs = parameter_refs(model, trainable);
  AdamW opt(config.optimizer);
  std::mt19937_64 rng(config.seed);

  // Frozen reference distributions for the KL baseline.
  std::vector<Tensor> reference;
  if (config.method == Method::kKlMin) {
    reference.resize(retain.size());
    parallel_for(retain.size(), [&](std::size_t i) {
      reference[i] = log_softmax_rows(forward(model, feed(retain[i]).tokens, false).logits);
    });
  }

  UnlearnResult result;
  const SplitScore f0 = score_split(model, forget, forget_qa);
  const SplitScore r0 = score_split(model, retain, retain_qa);
  const double baseline = r0.loss;
  EpochStats first{0, f0.loss, r0.loss, 0.0, compute_alpha(0.0, config.schedule, 0),
                   f0.knowledge, r0.knowledge};
  result.stats.push_back(first);
  if (on_epoch) on_epoch(first);

  const std::size_t nf = forget.size(), nr = retain.size(), B = config.batch_size;
  const std::size_t steps = (std::max(nf, nr) + B - 1) / B;
  std::vector<std::size_t> forder(nf), rorder(nr);
  for (std::size_t i = 0; i < nf; ++i) forder[i] = i;
  for (std::size_t i = 0; i < nr; ++i) rorder[i] = i;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const double delta = result.stats.back().retain_loss - baseline;
    const double alpha = compute_alpha(delta, config.schedule, epoch);
    std::shuffle(forder.begin(), forder.end(), rng);
    std::shuffle(rorder.begin(), rorder.end(), rng);

    for (std::size_t step = 0; step < steps; ++step) {
      // Batch k of an epoch; the shorter split wraps around.
      std::vector<std::size_t> fb, rb;
      for (std::size_t j = 0; j < B; ++j) {
        const std::size_t slot = step * B + j;
        if (slot >= std::max(nf, nr)) break;
        fb.push_back(forder[slot % nf]);
        rb.push_back(rorder[slot % nr]);
      }
      const double fw = -1.0 / static_cast<double>(fb.size());
      const double rw = (config.method == Method::kConstrainedJoint ? alpha : 1.0) /
                        static_cast<double>(rb.size());
      std::vector<LossItem> ce_items;
      for (std::size_t i : fb) ce_items.push_back(LossItem{forget[i].input, forget[i].output, fw});
      if (config.method == Method::kConstrainedJoint || config.method == Method::kGradDiff)
        for (std::size_t i : rb) ce_items.push_back(LossItem{retain[i].input, retain[i].output, rw});
      GradientMap grads;
      const double one = 1.0;
      accumulate_gradients(
          1,
          [&](Tape& tape, std::size_t) -> Var {
            Var loss = batch_sequence_loss(tape, model, ce_items, &trainable);
            if (config.method != Method::kKlMin) return loss;
            std::vector<LossItem> kl_items;
            for (std::size_t i : rb) kl_items.push_back(LossItem{retain[i].input, retain[i].output, rw});
            const PackedBatch packed = pack_batch(kl_items);
            Tensor ref({packed.tokens.size(), model.config().vocab_size});
            for (std::size_t k = 0; k < rb.size(); ++k) {
              const Tensor& r = reference[rb[k]];
              std::copy_n(r.ptr(), r.size(), ref.ptr() + packed.offsets[k] * ref.cols());
            }
            Var kl = ops::weighted_kl(packed_logits(tape, model, packed, &trainable), ref,
                                      packed.row_weights);
            return ops::add(loss, kl);
          },
          std::span(&one, 1), grads);
      opt.step(refs, grads);
    }

    const SplitScore fs = score_split(model, forget, forget_qa);
    const SplitScore rs = score_split(model, retain, retain_qa);
    EpochStats stats{epoch, fs.loss, rs.loss, delta, alpha, fs.knowledge, rs.knowledge};
    result.stats.push_back(stats);
    if (on_epoch) on_epoch(stats);
    if (config.early_stop_knowledge >= 0.0 && fs.knowledge <= config.early_stop_knowledge) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

}  // namespace ulab
