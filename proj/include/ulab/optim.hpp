#pragma once

#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "ulab/autograd.hpp"

namespace ulab {

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;

  void validate() const;
};

struct MomentState {
  Tensor first;
  Tensor second;
};

// One bias-corrected adaptive-moment update with decoupled weight decay.
// `step` is 1-based.
void adamw_update(Tensor& param, const Tensor& grad, MomentState& state,
                  const OptimizerConfig& config, std::int64_t step);

// Scales every gradient by min(1, max_norm / ||g||) over the whole map and
// returns the norm before scaling. max_norm <= 0 leaves `grads` untouched.
double clip_global_norm(GradientMap& grads, double max_norm);

using ParamRefs = std::vector<std::pair<ParamId, Tensor*>>;

class AdamW {
 public:
  explicit AdamW(OptimizerConfig config);

  // Updates exactly the tensors in `params`; `grads` must have the same key
  // set and matching shapes.
  void step(const ParamRefs& params, const GradientMap& grads);

  std::int64_t step_count() const { return step_; }
  const OptimizerConfig& config() const { return config_; }
  // For schedules; the moment state is kept.
  void set_learning_rate(double lr);

 private:
  OptimizerConfig config_;
  std::map<ParamId, MomentState> state_;
  std::int64_t step_ = 0;
};

}  // namespace ulab
