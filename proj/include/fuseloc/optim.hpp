#pragma once

#include <map>
#include <string>
#include <vector>

#include "fuseloc/tensor.hpp"

namespace fuseloc {

struct OptimizerConfig {
  double lr_main = 1e-3;
  double lr_image_branch = 1e-4;
  double weight_decay = 1e-3;  // classic L2: lambda * param is added to the gradient
  int epochs = 50;
  int lr_drop_epoch = 30;
  double lr_drop_factor = 10.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

class Adam {
 public:
  explicit Adam(OptimizerConfig cfg);

  const OptimizerConfig& config() const { return cfg_; }

  /// Group learning rate for a 0-based epoch; divided by lr_drop_factor once
  /// epoch >= lr_drop_epoch.
  double learning_rate(ParamGroup group, int epoch) const;

  /// One update of every trainable parameter from its accumulated grad.
  /// Throws NumericError naming the parameter if a gradient is not finite.
  void step(ParameterStore& params, int epoch, Precision precision = Precision::f64);

  long steps_taken(const std::string& name) const;

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
    long t = 0;
  };

  OptimizerConfig cfg_;
  std::map<std::string, Moments> state_;
};

}  // namespace fuseloc
