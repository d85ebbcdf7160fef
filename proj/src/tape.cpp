#include "ivcl/tape.hpp"

#include <atomic>

#include "kernels.hpp"

namespace ivcl {

namespace {
thread_local GradTape* g_active_tape = nullptr;
thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_next_tape_id{1};
}  // namespace

GradTape::GradTape() : id_(g_next_tape_id.fetch_add(1)), previous_(g_active_tape) { g_active_tape = this; }

GradTape::~GradTape() { g_active_tape = previous_; }

GradTape* GradTape::active() { return g_active_tape; }

bool GradTape::tracks(const Tensor& t) const {
  if (!t.defined()) return false;
  return (t.tape_id_ == id_ && t.node_ >= 0) || t.requires_grad_;
}

std::int32_t GradTape::lookup(const Tensor& t) const {
  if (t.tape_id_ == id_ && t.node_ >= 0) return t.node_;
  if (t.requires_grad_) {
    auto it = leaves_.find(t.storage_id());
    if (it != leaves_.end()) return it->second;
  }
  return -1;
}

std::int32_t GradTape::node_of(const Tensor& t) {
  if (t.tape_id_ == id_ && t.node_ >= 0) return t.node_;
  if (!t.requires_grad_) return -1;
  auto [it, inserted] = leaves_.try_emplace(t.storage_id(), next_node_);
  if (inserted) ++next_node_;
  return it->second;
}

Tensor GradTape::record(Tensor out, std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  return record_impl(std::move(out), std::span<const Tensor* const>(inputs.begin(), inputs.size()),
                     std::move(fn));
}

Tensor GradTape::record(Tensor out, std::span<const Tensor> inputs, BackwardFn fn) {
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(inputs.size());
  for (const auto& t : inputs) ptrs.push_back(&t);
  return record_impl(std::move(out), ptrs, std::move(fn));
}

Tensor GradTape::record_impl(Tensor out, std::span<const Tensor* const> inputs, BackwardFn fn) {
  if (!g_grad_enabled || backward_done_) return out;
  Entry entry;
  entry.inputs.reserve(inputs.size());
  bool any = false;
  for (const Tensor* t : inputs) {
    const auto n = node_of(*t);
    any = any || n >= 0;
    entry.inputs.push_back(n);
  }
  if (!any) return out;
  entry.output = next_node_++;
  entry.fn = std::move(fn);
  out.node_ = entry.output;
  out.tape_id_ = id_;
  out.requires_grad_ = false;
  entries_.push_back(std::move(entry));
  return out;
}

void GradTape::backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ContractViolation("backward() needs a scalar loss, got " + to_string(loss.shape()));
  const auto root = lookup(loss);
  if (root < 0) throw ContractViolation("backward(): loss was not recorded on this tape");
  if (backward_done_) throw ContractViolation("backward() called twice on the same tape");
  backward_done_ = true;

  NoGradGuard no_grad;
  grads_.assign(static_cast<std::size_t>(next_node_), Tensor{});
  grads_[static_cast<std::size_t>(root)] = Tensor::full(loss.shape(), 1.0, loss.dtype());

  std::vector<Tensor> input_grads;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    const Tensor& g = grads_[static_cast<std::size_t>(it->output)];
    if (!g.defined()) continue;
    const auto k = it->inputs.size();
    input_grads.assign(k, Tensor{});
    auto needs = std::make_unique<bool[]>(k);
    for (std::size_t i = 0; i < k; ++i) needs[i] = it->inputs[i] >= 0;
    BackwardContext ctx(g, std::span<const bool>(needs.get(), k), input_grads);
    it->fn(ctx);
    for (std::size_t i = 0; i < k; ++i) {
      if (it->inputs[i] < 0 || !input_grads[i].defined()) continue;
      Tensor& slot = grads_[static_cast<std::size_t>(it->inputs[i])];
      slot = slot.defined() ? kernels::add(slot, input_grads[i]) : input_grads[i];
    }
    // Release the closure (and the activations it captured) as soon as it ran.
    it->fn = nullptr;
  }
}

Tensor GradTape::grad(const Tensor& t) const {
  const auto n = lookup(t);
  if (n >= 0 && static_cast<std::size_t>(n) < grads_.size() && grads_[static_cast<std::size_t>(n)].defined()) {
    const Tensor& g = grads_[static_cast<std::size_t>(n)];
    if (g.shape() != t.shape())
      throw ContractViolation("gradient shape " + to_string(g.shape()) + " differs from tensor " +
                              to_string(t.shape()));
    return g;
  }
  return Tensor::zeros_like(t);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

bool any_tracked(std::initializer_list<const Tensor*> inputs) {
  GradTape* tape = g_active_tape;
  if (tape == nullptr || !g_grad_enabled) return false;
  for (const Tensor* t : inputs)
    if (tape->tracks(*t)) return true;
  return false;
}

Tensor record_op(Tensor out, std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  GradTape* tape = g_active_tape;
  if (tape == nullptr || !g_grad_enabled) return out;
  return tape->record(std::move(out), inputs, std::move(fn));
}

}  // namespace ivcl
