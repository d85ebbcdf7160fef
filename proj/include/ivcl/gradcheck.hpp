#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ivcl/optim.hpp"
#include "ivcl/tensor.hpp"

namespace ivcl {

struct GradcheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::int64_t evaluations = 0;
  bool passed = false;
};

struct GradcheckOptions {
  double step = 1e-3;
  double tolerance = 1e-3;
  /// Entries probed per tensor; 0 probes every entry.
  std::int64_t max_entries = 0;
  std::uint64_t seed = 0;
};

/// Compares tape gradients of `loss()` against central differences in each of
/// `wrt` (f64 tensors sharing storage with what `loss` reads). The error of a
/// tensor is max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-6); tensors whose
/// gradient is identically zero (e.g. attention key biases) are thus compared
/// absolutely.
GradcheckResult gradcheck(const std::string& name, const std::vector<Tensor>& wrt,
                          const std::function<Tensor()>& loss, const GradcheckOptions& options = {});

/// Fixed random projection of `out` to a scalar, so every output entry
/// carries a distinct weight in the checked loss.
Tensor random_projection_loss(const Tensor& out, std::uint64_t seed);

/// Redraws every f64 parameter uniformly from [-1, 1]. Composite checks use
/// this so that no layer norm sees a near-constant input, where h = 1e-3 is
/// too coarse for the curvature.
void randomize_uniform(const ParamRefs& params, std::uint64_t seed);

/// Every primitive op and composite block (patch embedding, attention,
/// transformer block, the three slot poolings, temporal transformer, decoder,
/// reconstruction and classification losses) on small f64 instances.
std::vector<GradcheckResult> gradcheck_suite(const GradcheckOptions& options = {});

}  // namespace ivcl
