#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ivcl/tensor.hpp"

namespace ivcl {

// Differentiable primitives. Each records a backward rule on the active tape
// when one of its inputs is tracked; otherwise it is a plain computation.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

/// x[..., d] + row[d]: adds `row` to every vector along the last axis.
Tensor add_row(const Tensor& x, const Tensor& row);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

/// x·Φ(x) with the exact Gaussian CDF.
Tensor gelu(const Tensor& x);

/// Normalizes every vector along the last axis, then applies gamma/beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

Tensor softmax(const Tensor& x, std::int64_t axis = -1);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// [n×d] -> [1×d] average over rows.
Tensor mean_rows(const Tensor& x);

/// Row gather from a [n×d] table; repeated ids accumulate in the gradient.
Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> ids);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::int64_t begin, std::int64_t count);

/// Mean softmax cross-entropy of [n×C] logits against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels);
/// mean((pred - target)^2) over all elements.
Tensor mse(const Tensor& pred, const Tensor& target);

/// A contiguous run of rows in a packed token matrix.
struct Segment {
  std::int64_t begin = 0;
  std::int64_t length = 0;
};

struct AttentionResult {
  Tensor out;                 ///< [Nq×d]
  std::vector<Tensor> probs;  ///< per segment pair, [heads×nq×nk], untracked
};

/// Scaled dot-product attention over packed sequences: the queries of
/// q_segments[i] attend to the keys/values of kv_segments[i]. Heads split the
/// feature axis evenly; scores are scaled by 1/sqrt(d/heads). With `causal`,
/// query t only sees keys 0..t of its segment.
AttentionResult attention(const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t heads,
                          std::span<const Segment> q_segments, std::span<const Segment> kv_segments,
                          bool causal = false);

// Untracked helpers.
std::vector<std::int64_t> argmax_rows(const Tensor& x);
Tensor one_hot(std::span<const std::int64_t> ids, std::int64_t classes, DType dtype = default_dtype());

}  // namespace ivcl
