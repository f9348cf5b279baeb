#pragma once

// Memorization training and the per-example gradient machinery shared with
// unlearning.

#include <functional>
#include <vector>

#include "ulab/corpus.hpp"
#include "ulab/model.hpp"
#include "ulab/optim.hpp"

namespace ulab {

// Builds example k's scalar loss on a fresh tape.
using ExampleLoss = std::function<Var(Tape&, std::size_t k)>;

// Adds sum_k weights[k] * d loss_k / d theta over the trainable set into
// `into` and returns each loss value. Examples may run on parallel workers;
// the reduction runs in index order, so results are bit-identical for any
// worker count.
std::vector<double> accumulate_gradients(std::size_t count, const ExampleLoss& loss,
                                         std::span<const double> weights, GradientMap& into);

// (id, tensor) handles for an optimizer over a parameter subset.
ParamRefs parameter_refs(Transformer& model, const ParameterSet& set);

// Scores the expected output under teacher forcing. `exact` holds iff every
// output position's argmax is its target, which is equivalent to greedy
// decoding reproducing the output (end marker included).
struct TeacherForced {
  double nll = 0.0;
  bool exact = false;
};
TeacherForced teacher_forced(const Transformer& model, const EncodedExample& ex);

struct TrainConfig {
  std::size_t max_epochs = 60;
  std::size_t batch_size = 16;
  OptimizerConfig optimizer{.learning_rate = 2e-3, .weight_decay = 0.0};
  double min_lr_ratio = 0.05;   // cosine decay floor
  std::size_t warmup_steps = 50;
  double max_grad_norm = 1.0;   // global clipping; 0 disables
  std::size_t check_every = 5;  // epochs between convergence checks
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainEpoch {
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double learning_rate = 0.0;
  double exact_fraction = -1.0;  // teacher-forced, only on check epochs
};

struct TrainReport {
  std::vector<TrainEpoch> epochs;
  bool converged = false;  // every training example reproduced exactly
};

// Examples the model memorizes: forget, retain and utility. Holdout stays
// unseen so it can act as the membership-inference reference.
std::vector<const Example*> training_examples(const Corpus& corpus);

// Full-parameter training on the summed output NLL, averaged per batch.
// Stops early once a check epoch reproduces every training example.
TrainReport train_memorization(Transformer& model, const Corpus& corpus, const TrainConfig& config,
                               const std::function<void(const TrainEpoch&)>& on_epoch = {});

}  // namespace ulab
