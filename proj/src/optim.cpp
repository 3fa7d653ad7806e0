#include "fuseloc/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fuseloc {

void OptimizerConfig::validate() const {
  if (!(lr_main > 0.0)) throw std::invalid_argument("lr_main must be positive");
  if (!(lr_image_branch > 0.0)) throw std::invalid_argument("lr_image_branch must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be non-negative");
  if (epochs <= 0) throw std::invalid_argument("epochs must be positive");
  if (lr_drop_epoch <= 0) throw std::invalid_argument("lr_drop_epoch must be positive");
  if (lr_drop_epoch > epochs) throw std::invalid_argument("lr_drop_epoch must not exceed epochs");
  if (!(lr_drop_factor > 0.0)) throw std::invalid_argument("lr_drop_factor must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw std::invalid_argument("Adam betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw std::invalid_argument("Adam eps must be positive");
}

Adam::Adam(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

double Adam::learning_rate(ParamGroup group, int epoch) const {
  double lr = group == ParamGroup::image ? cfg_.lr_image_branch : cfg_.lr_main;
  if (epoch >= cfg_.lr_drop_epoch) lr /= cfg_.lr_drop_factor;
  return lr;
}

void Adam::step(ParameterStore& params, int epoch, Precision precision) {
  for (Parameter& p : params) {
    if (!p.trainable) continue;
    for (double g : p.grad)
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
  }
  for (Parameter& p : params) {
    if (!p.trainable) continue;
    Moments& s = state_[p.name];
    if (s.m.size() != p.value.size()) {
      s.m.assign(p.value.size(), 0.0);
      s.v.assign(p.value.size(), 0.0);
      s.t = 0;
    }
    ++s.t;
    const double lr = learning_rate(p.group, epoch);
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i] + cfg_.weight_decay * p.value[i];
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = s.m[i] / c1;
      const double vhat = s.v[i] / c2;
      double v = p.value[i] - lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      v = std::max(v, p.min_value);
      p.value[i] = precision == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v;
    }
  }
}

long Adam::steps_taken(const std::string& name) const {
  auto it = state_.find(name);
  return it == state_.end() ? 0 : it->second.t;
}

}  // namespace fuseloc
