#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ivcl/tensor.hpp"

namespace ivcl {

/// Named references to a model's trainable tensors, in a stable order.
using ParamRefs = std::vector<std::pair<std::string, Tensor*>>;

enum class OptimizerKind { Adam, AdamW };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // AdamW only: decoupled, applied before the moment update
};

/// Adam / AdamW with bias correction. Moment buffers are created zeroed on the
/// first step and keep the parameter's shape.
class Optimizer {
 public:
  struct Moments {
    std::string name;
    std::vector<float> m;
    std::vector<float> v;
  };

  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  /// Updates `params` in place. Throws NumericError naming the parameter if a
  /// gradient holds NaN/Inf; in that case nothing is modified.
  void step(const ParamRefs& params, std::span<const Tensor> grads);

  const OptimizerConfig& config() const { return config_; }
  std::int64_t steps() const { return step_count_; }
  const std::vector<Moments>& moments() const { return moments_; }
  void restore(std::int64_t steps, std::vector<Moments> moments);

 private:
  OptimizerConfig config_;
  std::int64_t step_count_ = 0;
  std::vector<Moments> moments_;
};

}  // namespace ivcl
