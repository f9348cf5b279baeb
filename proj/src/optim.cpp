#include "ulab/optim.hpp"

#include <cmath>
#include <string>

namespace ulab {

void OptimizerConfig::validate() const {
  ULAB_REQUIRE(learning_rate > 0.0, "optimizer: learning_rate must be positive");
  ULAB_REQUIRE(0.0 < beta1 && beta1 < beta2 && beta2 < 1.0,
          "optimizer: betas must satisfy 0 < beta1 < beta2 < 1");
  ULAB_REQUIRE(epsilon > 0.0, "optimizer: epsilon must be positive");
  ULAB_REQUIRE(weight_decay >= 0.0, "optimizer: weight_decay must be nonnegative");
}

void adamw_update(Tensor& param, const Tensor& grad, MomentState& state,
                  const OptimizerConfig& config, std::int64_t step) {
  ULAB_REQUIRE(param.shape() == grad.shape(), "optimizer: gradient shape " +
                                             shape_string(grad.shape()) +
                                             " does not match parameter " +
                                             shape_string(param.shape()));
  ULAB_REQUIRE(step >= 1, "optimizer: step count is 1-based");
  if (state.first.empty()) {
    state.first = Tensor(param.shape(), 0.0);
    state.second = Tensor(param.shape(), 0.0);
  }
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
  const double lr = config.learning_rate;
  const double decay = 1.0 - lr * config.weight_decay;
  double* p = param.ptr();
  double* m = state.first.ptr();
  double* v = state.second.ptr();
  const double* g = grad.ptr();
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    p[i] = p[i] * decay - lr * mhat / (std::sqrt(vhat) + config.epsilon);
  }
}

AdamW::AdamW(OptimizerConfig config) : config_(config) { config_.validate(); }

void AdamW::set_learning_rate(double lr) {
  ULAB_REQUIRE(lr > 0.0, "optimizer: learning_rate must be positive");
  config_.learning_rate = lr;
}

void AdamW::step(const ParamRefs& params, const GradientMap& grads) {
  ULAB_REQUIRE(params.size() == grads.size(),
          "optimizer: gradient map covers " + std::to_string(grads.size()) +
              " parameters but " + std::to_string(params.size()) + " were selected");
  ++step_;
  for (const auto& [id, tensor] : params) {
    auto it = grads.find(id);
    ULAB_REQUIRE(it != grads.end(), "optimizer: no gradient for parameter " + std::to_string(id));
    adamw_update(*tensor, it->second, state_[id], config_, step_);
  }
}

double clip_global_norm(GradientMap& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [id, g] : grads)
    for (double v : g.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [id, g] : grads)
      for (double& v : g.data()) v *= scale;
  }
  return norm;
}

}  // namespace ulab
