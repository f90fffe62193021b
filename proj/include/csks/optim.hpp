#pragma once

#include <cstddef>
#include <map>
#include <set>
#include <string>

#include "csks/tensor.hpp"

namespace csks {

class Model;

enum class OptimizerKind { sgd_momentum, adam };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Cosine decay from learning_rate to learning_rate * min_lr_fraction over
  // total_steps; total_steps == 0 keeps the rate constant.
  std::size_t total_steps = 0;
  double min_lr_fraction = 0.0;
  // Global-norm clipping threshold; 0 disables.
  double clip_norm = 0.0;

  void validate() const;
};

struct OptimizerState {
  std::map<std::string, Tensor> first_moment;
  std::map<std::string, Tensor> second_moment;
  std::size_t step = 0;
};

double scheduled_learning_rate(const OptimizerConfig& config, std::size_t step);

// SGD with momentum:  v <- mu*v + g;  p <- p - lr*v.
// Adam: bias-corrected first/second moments. Names in `frozen` are skipped.
void optimizer_step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads,
                    OptimizerState& state, const OptimizerConfig& config,
                    const std::set<std::string>& frozen = {});

// Same update applied in place to a model's unfrozen parameters using their
// accumulated gradients; rounds to the model precision afterwards.
// Returns the pre-clipping global gradient norm.
double optimizer_step(Model& model, OptimizerState& state, const OptimizerConfig& config);

}  // namespace csks
