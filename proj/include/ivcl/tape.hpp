#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <unordered_map>
#include <vector>

#include "ivcl/tensor.hpp"

namespace ivcl {

/// Handed to a recorded backward rule: the output gradient in, one slot per
/// input out. Slots for inputs that need no gradient may be left undefined.
class BackwardContext {
 public:
  BackwardContext(const Tensor& grad_out, std::span<const bool> needs, std::span<Tensor> grads)
      : grad_out_(grad_out), needs_(needs), grads_(grads) {}

  const Tensor& grad_out() const { return grad_out_; }
  bool needs(std::size_t input) const { return needs_[input]; }
  void set(std::size_t input, Tensor grad) { grads_[input] = std::move(grad); }

 private:
  const Tensor& grad_out_;
  std::span<const bool> needs_;
  std::span<Tensor> grads_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

/// Define-by-run gradient tape. Constructing a tape makes it the active tape
/// of the calling thread until it is destroyed; ops executed meanwhile whose
/// inputs are tracked get recorded. Tensors flagged `requires_grad` become
/// leaves the first time an op consumes them.
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active();

  /// True if `t` participates in this tape (recorded output or leaf candidate).
  bool tracks(const Tensor& t) const;

  /// Attaches a node to `out` and records `fn` as its backward rule, if any input
  /// is tracked. Otherwise returns `out` unchanged.
  Tensor record(Tensor out, std::initializer_list<const Tensor*> inputs, BackwardFn fn);
  Tensor record(Tensor out, std::span<const Tensor> inputs, BackwardFn fn);

  /// Reverse sweep from a scalar loss. Gradients accumulate across fan-out.
  void backward(const Tensor& loss);

  /// Gradient of `t` after backward(); zeros if `t` did not influence the loss.
  Tensor grad(const Tensor& t) const;

  std::size_t num_operations() const { return entries_.size(); }
  std::uint64_t id() const { return id_; }

 private:
  struct Entry {
    std::vector<std::int32_t> inputs;
    std::int32_t output;
    BackwardFn fn;
  };

  std::int32_t node_of(const Tensor& t);
  std::int32_t lookup(const Tensor& t) const;
  Tensor record_impl(Tensor out, std::span<const Tensor* const> inputs, BackwardFn fn);

  std::uint64_t id_;
  GradTape* previous_;
  std::int32_t next_node_ = 0;
  std::vector<Entry> entries_;
  std::unordered_map<const void*, std::int32_t> leaves_;
  std::vector<Tensor> grads_;
  bool backward_done_ = false;
};

/// Suspends recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Convenience for op implementations: records if a tape is active.
Tensor record_op(Tensor out, std::initializer_list<const Tensor*> inputs, BackwardFn fn);
bool any_tracked(std::initializer_list<const Tensor*> inputs);

}  // namespace ivcl
