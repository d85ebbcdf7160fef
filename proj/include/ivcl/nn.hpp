#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ivcl/ops.hpp"
#include "ivcl/optim.hpp"
#include "ivcl/tensor.hpp"

namespace ivcl {

using Rng = std::mt19937_64;

/// Samples N(0, std²) truncated to ±2 std, as an f32 parameter.
Tensor truncated_normal(Shape shape, double std, Rng& rng);
Tensor parameter(Tensor t);

struct BlockConfig {
  std::int64_t hidden_dim = 128;
  std::int64_t num_heads = 4;
  std::int64_t mlp_dim = 512;
  double dropout = 0.0;

  void validate() const;
};

struct Linear {
  Tensor weight;  // [in×out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, Rng& rng, double init_std = 0.02);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamRefs& out);
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;
  double eps = 1e-6;

  LayerNorm() = default;
  explicit LayerNorm(std::int64_t dim);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamRefs& out);
};

struct MultiHeadAttention {
  std::int64_t heads = 1;
  Linear query, key, value, output;

  MultiHeadAttention() = default;
  MultiHeadAttention(const BlockConfig& cfg, Rng& rng);

  /// Self-attention within each segment of the packed token matrix `x`.
  AttentionResult self_attend(const Tensor& x, std::span<const Segment> segments, bool causal = false) const;
  /// Queries from `x` attend to `memory`, segment pair by segment pair.
  AttentionResult cross_attend(const Tensor& x, const Tensor& memory, std::span<const Segment> x_segments,
                               std::span<const Segment> memory_segments) const;
  void collect(const std::string& prefix, ParamRefs& out);
};

/// Pre-norm encoder layer: x + MHSA(LN(x)), then + MLP(LN(·)) with a
/// linear-GELU-linear MLP.
struct TransformerBlock {
  LayerNorm norm1, norm2;
  MultiHeadAttention attn;
  Linear fc1, fc2;

  TransformerBlock() = default;
  TransformerBlock(const BlockConfig& cfg, Rng& rng);

  /// `attn_out`, when given, receives the per-segment [heads×n×n] attention.
  Tensor forward(const Tensor& x, std::span<const Segment> segments, std::vector<Tensor>* attn_out = nullptr,
                 bool causal = false) const;
  void collect(const std::string& prefix, ParamRefs& out);
  /// Zeroes the two projections that write into the residual stream.
  void zero_residual_projections();
};

/// Decoder layer with causal self-attention and cross-attention to a memory.
struct CrossDecoderBlock {
  LayerNorm norm1, norm2, norm3;
  MultiHeadAttention self_attn, cross_attn;
  Linear fc1, fc2;

  CrossDecoderBlock() = default;
  CrossDecoderBlock(const BlockConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& memory, std::span<const Segment> x_segments,
                 std::span<const Segment> memory_segments) const;
  void collect(const std::string& prefix, ParamRefs& out);
};

/// Returns the two-element (out, attention) pair for a single unsegmented sequence.
AttentionResult multi_head_self_attention(const Tensor& x, const MultiHeadAttention& attn);

/// Splits an [H×W×C] image into (H/P)·(W/P) row-major patches of P·P·C values.
Tensor patchify(const Tensor& image, std::int64_t patch);
Tensor unpatchify(const Tensor& patches, std::int64_t height, std::int64_t width, std::int64_t channels,
                  std::int64_t patch);

/// Interleaved sin/cos table with frequency base 10000.
Tensor sinusoidal_positions(std::int64_t count, std::int64_t dim, DType dtype = default_dtype());

Tensor embedding_lookup(const Tensor& table, std::span<const std::int64_t> ids);

/// One segment covering all `rows`.
std::vector<Segment> single_segment(std::int64_t rows);

}  // namespace ivcl
