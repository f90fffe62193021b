#include "csks/optim.hpp"

#include <cmath>
#include <numbers>
#include <vector>

#include "csks/error.hpp"
#include "csks/model.hpp"

namespace csks {

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd_momentum"; }

OptimizerKind optimizer_kind_from_string(const std::string& name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd_momentum" || name == "sgd") return OptimizerKind::sgd_momentum;
  throw UsageError("unknown optimizer '" + name + "'");
}

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0)) throw UsageError("learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw UsageError("momentum must be in [0, 1)");
  if (!(min_lr_fraction >= 0.0 && min_lr_fraction <= 1.0)) throw UsageError("min_lr_fraction must be in [0, 1]");
  if (clip_norm < 0.0) throw UsageError("clip_norm must be non-negative");
}

double scheduled_learning_rate(const OptimizerConfig& config, std::size_t step) {
  if (config.total_steps == 0) return config.learning_rate;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(config.total_steps));
  const double floor = config.learning_rate * config.min_lr_fraction;
  return floor + 0.5 * (config.learning_rate - floor) * (1.0 + std::cos(std::numbers::pi * t));
}

namespace {

struct Slot {
  const std::string* name;
  Tensor* value;
  const Tensor* grad;
};

double apply(std::vector<Slot>& slots, OptimizerState& state, const OptimizerConfig& config) {
  config.validate();
  double norm_sq = 0.0;
  for (const Slot& s : slots) {
    if (s.grad->size() != s.value->size()) {
      throw UsageError("gradient shape mismatch for '" + *s.name + "': " + shape_string(s.grad->shape()) +
                       " vs " + shape_string(s.value->shape()));
    }
    for (double g : s.grad->values()) norm_sq += g * g;
  }
  const double norm = std::sqrt(norm_sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  const double clip = (config.clip_norm > 0.0 && norm > config.clip_norm) ? config.clip_norm / norm : 1.0;
  const double lr = scheduled_learning_rate(config, state.step);
  ++state.step;

  for (Slot& s : slots) {
    Tensor& p = *s.value;
    const Tensor& g = *s.grad;
    Tensor& m = state.first_moment[*s.name];
    if (m.shape() != p.shape()) m = Tensor(p.shape());
    if (config.kind == OptimizerKind::sgd_momentum) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = config.momentum * m[i] + clip * g[i];
        p[i] -= lr * m[i];
      }
    } else {
      Tensor& v = state.second_moment[*s.name];
      if (v.shape() != p.shape()) v = Tensor(p.shape());
      const double t = static_cast<double>(state.step);
      const double c1 = 1.0 - std::pow(config.beta1, t);
      const double c2 = 1.0 - std::pow(config.beta2, t);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = clip * g[i];
        m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
        v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
        p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.epsilon);
      }
    }
  }
  return norm;
}

}  // namespace

void optimizer_step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads,
                    OptimizerState& state, const OptimizerConfig& config, const std::set<std::string>& frozen) {
  std::vector<Slot> slots;
  for (auto& [name, value] : params) {
    if (frozen.count(name)) continue;
    auto it = grads.find(name);
    if (it == grads.end()) throw UsageError("missing gradient for '" + name + "'");
    slots.push_back({&name, &value, &it->second});
  }
  apply(slots, state, config);
}

double optimizer_step(Model& model, OptimizerState& state, const OptimizerConfig& config) {
  std::vector<Slot> slots;
  for (Parameter& p : model.parameters()) {
    if (model.is_frozen(p)) continue;
    slots.push_back({&p.name, &p.var->value, &p.var->grad()});
  }
  const double norm = apply(slots, state, config);
  model.apply_precision();
  for (const Parameter& p : model.parameters()) {
    if (!p.var->value.all_finite()) throw NumericError("parameter '" + p.name + "' became non-finite");
  }
  return norm;
}

}  // namespace csks
