#pragma once

// Constrained unlearning: minimize -L_forget + alpha * L_retain over a
// selected parameter subset, with alpha escalating as the retain loss drifts
// above its pre-unlearning baseline. Also the gradient-ascent,
// gradient-difference and KL-minimization baselines.

#include <functional>
#include <optional>
#include <set>
#include <string_view>
#include <vector>

#include "ulab/corpus.hpp"
#include "ulab/model.hpp"
#include "ulab/optim.hpp"

namespace ulab {

struct AlphaSchedule {
  double a = 0.3;
  double b = 6.0;
  double c = 0.8;
  double alpha_min = 1.2;
  double alpha_max = 2.8;

  void validate() const;
};

// Round half away from zero to one decimal.
double round_one_decimal(double x);

// Epoch 0: alpha_min. Later epochs: clamp(round(a * b^dL + c, 1), alpha_min, alpha_max).
double compute_alpha(double delta_l, const AlphaSchedule& schedule, std::size_t epoch);

double joint_loss(double forget_nll, double retain_nll, double alpha);

enum class Method : std::uint8_t { kConstrainedJoint, kGradAscent, kGradDiff, kKlMin };
const char* method_name(Method m);
std::optional<Method> parse_method(std::string_view s);

// Scalar forms of the baseline objectives; KL_MIN needs retain_kl.
double baseline_loss(Method method, double forget_nll, double retain_nll,
                     std::optional<double> retain_kl = std::nullopt);

struct UnlearnConfig {
  Method method = Method::kConstrainedJoint;
  std::optional<LayerRange> layer_range;  // unset: decided by tracing
  std::set<ParamKind> kinds{ParamKind::kMhsa, ParamKind::kMlp};
  std::size_t epochs = 8;
  std::size_t batch_size = 8;
  OptimizerConfig optimizer{.learning_rate = 2e-4, .weight_decay = 0.0};
  AlphaSchedule schedule;
  std::uint64_t seed = 0;
  // Stop after an epoch whose forget QA exact match is <= this; < 0 disables.
  double early_stop_knowledge = -1.0;

  void validate(const ModelConfig& model) const;
};

struct EpochStats {
  std::size_t epoch = 0;
  double forget_loss = 0.0;  // mean sequence NLL over the forget split, after the epoch
  double retain_loss = 0.0;  // same for retain; epoch 0 holds the baseline
  double delta_l = 0.0;      // retain_loss(epoch - 1) - baseline, the input to alpha
  double alpha = 0.0;        // weight used during this epoch
  double forget_knowledge = 0.0;  // teacher-forced QA exact match
  double retain_knowledge = 0.0;
};

struct UnlearnResult {
  std::vector<EpochStats> stats;
  bool early_stopped = false;
};

// Epoch 0 measures the baselines without updating. Each later epoch walks
// ceil(max(|F|, |R|) / batch) steps of paired forget/retain batches (the
// shorter split cycles), with alpha fixed for the epoch. Only
// select_parameters(layer_range, kinds) is updated.
UnlearnResult run_unlearning(Transformer& model, const Corpus& corpus, const UnlearnConfig& config,
                             const std::function<void(const EpochStats&)>& on_epoch = {});

}  // namespace ulab
