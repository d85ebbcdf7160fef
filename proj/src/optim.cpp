#include "ivcl/optim.hpp"

#include <cmath>

namespace ivcl {

void Optimizer::step(const ParamRefs& params, std::span<const Tensor> grads) {
  if (params.size() != grads.size())
    throw ShapeError("optimizer: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p] = params[i];
    if (grads[i].shape() != p->shape())
      throw ShapeError("optimizer: gradient " + to_string(grads[i].shape()) + " for parameter '" + name + "' of " +
                       to_string(p->shape()));
    if (p->dtype() != DType::F32) throw ShapeError("optimizer: parameter '" + name + "' is not f32");
    for (float g : grads[i].data<float>())
      if (!std::isfinite(g))
        throw NumericError("non-finite gradient in parameter '" + name + "' at step " + std::to_string(step_count_ + 1));
  }
  if (moments_.empty()) {
    moments_.reserve(params.size());
    for (const auto& [name, p] : params) {
      const auto n = static_cast<std::size_t>(p->numel());
      moments_.push_back({name, std::vector<float>(n, 0.0f), std::vector<float>(n, 0.0f)});
    }
  } else if (moments_.size() != params.size()) {
    throw ShapeError("optimizer: parameter list changed between steps");
  }

  ++step_count_;
  const double t = static_cast<double>(step_count_);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  const auto b1 = static_cast<float>(config_.beta1);
  const auto b2 = static_cast<float>(config_.beta2);
  const auto lr = static_cast<float>(config_.lr);
  const auto eps = static_cast<float>(config_.eps);
  const auto inv_bc1 = static_cast<float>(1.0 / bc1);
  const auto inv_bc2 = static_cast<float>(1.0 / bc2);
  const auto decay = static_cast<float>(1.0 - config_.lr * config_.weight_decay);
  const bool decoupled = config_.kind == OptimizerKind::AdamW && config_.weight_decay != 0.0;

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& mom = moments_[i];
    if (mom.name != params[i].first || mom.m.size() != static_cast<std::size_t>(params[i].second->numel()))
      throw ShapeError("optimizer: state mismatch for parameter '" + params[i].first + "'");
    auto theta = params[i].second->mutable_data<float>();
    auto g = grads[i].data<float>();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      if (decoupled) theta[j] *= decay;
      mom.m[j] = b1 * mom.m[j] + (1.0f - b1) * g[j];
      mom.v[j] = b2 * mom.v[j] + (1.0f - b2) * g[j] * g[j];
      const float mhat = mom.m[j] * inv_bc1;
      const float vhat = mom.v[j] * inv_bc2;
      theta[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

void Optimizer::restore(std::int64_t steps, std::vector<Moments> moments) {
  step_count_ = steps;
  moments_ = std::move(moments);
}

}  // namespace ivcl
