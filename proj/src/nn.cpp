#include "ivcl/nn.hpp"

#include <cmath>

namespace ivcl {

Tensor truncated_normal(Shape shape, double std, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<float> values(static_cast<std::size_t>(numel_of(shape)));
  for (auto& v : values) {
    double z = normal(rng);
    while (std::abs(z) > 2.0) z = normal(rng);
    v = static_cast<float>(z * std);
  }
  return parameter(Tensor(std::move(shape), std::move(values)));
}

Tensor parameter(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

void BlockConfig::validate() const {
  if (hidden_dim <= 0 || num_heads <= 0 || mlp_dim <= 0)
    throw ConfigError("block config: dimensions must be positive");
  if (hidden_dim % num_heads != 0)
    throw ConfigError("block config: hidden_dim " + std::to_string(hidden_dim) + " not divisible by num_heads " +
                      std::to_string(num_heads));
  if (dropout != 0.0) throw ConfigError("block config: dropout is not supported (must be 0)");
}

Linear::Linear(std::int64_t in, std::int64_t out, Rng& rng, double init_std)
    : weight(truncated_normal({in, out}, init_std, rng)), bias(parameter(Tensor::zeros({out}, DType::F32))) {}

Tensor Linear::forward(const Tensor& x) const { return add_row(matmul(x, weight), bias); }

void Linear::collect(const std::string& prefix, ParamRefs& out) {
  out.emplace_back(prefix + ".weight", &weight);
  out.emplace_back(prefix + ".bias", &bias);
}

LayerNorm::LayerNorm(std::int64_t dim)
    : gamma(parameter(Tensor::full({dim}, 1.0, DType::F32))), beta(parameter(Tensor::zeros({dim}, DType::F32))) {}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }

void LayerNorm::collect(const std::string& prefix, ParamRefs& out) {
  out.emplace_back(prefix + ".gamma", &gamma);
  out.emplace_back(prefix + ".beta", &beta);
}

MultiHeadAttention::MultiHeadAttention(const BlockConfig& cfg, Rng& rng)
    : heads(cfg.num_heads),
      query(cfg.hidden_dim, cfg.hidden_dim, rng),
      key(cfg.hidden_dim, cfg.hidden_dim, rng),
      value(cfg.hidden_dim, cfg.hidden_dim, rng),
      output(cfg.hidden_dim, cfg.hidden_dim, rng) {
  cfg.validate();
}

AttentionResult MultiHeadAttention::self_attend(const Tensor& x, std::span<const Segment> segments,
                                                bool causal) const {
  auto r = attention(query.forward(x), key.forward(x), value.forward(x), heads, segments, segments, causal);
  r.out = output.forward(r.out);
  return r;
}

AttentionResult MultiHeadAttention::cross_attend(const Tensor& x, const Tensor& memory,
                                                 std::span<const Segment> x_segments,
                                                 std::span<const Segment> memory_segments) const {
  auto r = attention(query.forward(x), key.forward(memory), value.forward(memory), heads, x_segments,
                     memory_segments, false);
  r.out = output.forward(r.out);
  return r;
}

void MultiHeadAttention::collect(const std::string& prefix, ParamRefs& out) {
  query.collect(prefix + ".query", out);
  key.collect(prefix + ".key", out);
  value.collect(prefix + ".value", out);
  output.collect(prefix + ".output", out);
}

TransformerBlock::TransformerBlock(const BlockConfig& cfg, Rng& rng)
    : norm1(cfg.hidden_dim),
      norm2(cfg.hidden_dim),
      attn(cfg, rng),
      fc1(cfg.hidden_dim, cfg.mlp_dim, rng),
      fc2(cfg.mlp_dim, cfg.hidden_dim, rng) {}

Tensor TransformerBlock::forward(const Tensor& x, std::span<const Segment> segments, std::vector<Tensor>* attn_out,
                                 bool causal) const {
  auto a = attn.self_attend(norm1.forward(x), segments, causal);
  if (attn_out != nullptr) *attn_out = std::move(a.probs);
  Tensor h = add(x, a.out);
  return add(h, fc2.forward(gelu(fc1.forward(norm2.forward(h)))));
}

void TransformerBlock::collect(const std::string& prefix, ParamRefs& out) {
  norm1.collect(prefix + ".norm1", out);
  attn.collect(prefix + ".attn", out);
  norm2.collect(prefix + ".norm2", out);
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

void TransformerBlock::zero_residual_projections() {
  for (Tensor* t : {&attn.output.weight, &attn.output.bias, &fc2.weight, &fc2.bias}) {
    auto data = t->mutable_data<float>();
    std::fill(data.begin(), data.end(), 0.0f);
  }
}

CrossDecoderBlock::CrossDecoderBlock(const BlockConfig& cfg, Rng& rng)
    : norm1(cfg.hidden_dim),
      norm2(cfg.hidden_dim),
      norm3(cfg.hidden_dim),
      self_attn(cfg, rng),
      cross_attn(cfg, rng),
      fc1(cfg.hidden_dim, cfg.mlp_dim, rng),
      fc2(cfg.mlp_dim, cfg.hidden_dim, rng) {}

Tensor CrossDecoderBlock::forward(const Tensor& x, const Tensor& memory, std::span<const Segment> x_segments,
                                  std::span<const Segment> memory_segments) const {
  Tensor h = add(x, self_attn.self_attend(norm1.forward(x), x_segments, true).out);
  h = add(h, cross_attn.cross_attend(norm2.forward(h), memory, x_segments, memory_segments).out);
  return add(h, fc2.forward(gelu(fc1.forward(norm3.forward(h)))));
}

void CrossDecoderBlock::collect(const std::string& prefix, ParamRefs& out) {
  norm1.collect(prefix + ".norm1", out);
  self_attn.collect(prefix + ".self_attn", out);
  norm2.collect(prefix + ".norm2", out);
  cross_attn.collect(prefix + ".cross_attn", out);
  norm3.collect(prefix + ".norm3", out);
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

AttentionResult multi_head_self_attention(const Tensor& x, const MultiHeadAttention& attn) {
  const auto segs = single_segment(x.dim(0));
  return attn.self_attend(x, segs);
}

Tensor patchify(const Tensor& image, std::int64_t patch) {
  if (image.rank() != 3) throw ShapeError("patchify: expected [H×W×C], got " + to_string(image.shape()));
  const auto h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (patch <= 0 || h % patch != 0 || w % patch != 0)
    throw ConfigError("patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible by patch size " + std::to_string(patch));
  const auto gh = h / patch, gw = w / patch, pd = patch * patch * c;
  return dispatch(image.dtype(), [&]<class T>(T) {
    auto src = image.data<T>();
    std::vector<T> out(static_cast<std::size_t>(gh * gw * pd));
    for (std::int64_t py = 0; py < gh; ++py)
      for (std::int64_t px = 0; px < gw; ++px) {
        T* dst = out.data() + (py * gw + px) * pd;
        for (std::int64_t y = 0; y < patch; ++y)
          std::copy_n(src.data() + ((py * patch + y) * w + px * patch) * c, patch * c, dst + y * patch * c);
      }
    return Tensor({gh * gw, pd}, std::move(out));
  });
}

Tensor unpatchify(const Tensor& patches, std::int64_t height, std::int64_t width, std::int64_t channels,
                  std::int64_t patch) {
  if (patch <= 0 || height % patch != 0 || width % patch != 0)
    throw ConfigError("unpatchify: image size not divisible by patch size");
  const auto gh = height / patch, gw = width / patch, pd = patch * patch * channels;
  if (patches.rank() != 2 || patches.dim(0) != gh * gw || patches.dim(1) != pd)
    throw ShapeError("unpatchify: patches " + to_string(patches.shape()) + " do not tile " + std::to_string(height) +
                     "x" + std::to_string(width) + "x" + std::to_string(channels));
  return dispatch(patches.dtype(), [&]<class T>(T) {
    auto src = patches.data<T>();
    std::vector<T> out(static_cast<std::size_t>(height * width * channels));
    for (std::int64_t py = 0; py < gh; ++py)
      for (std::int64_t px = 0; px < gw; ++px) {
        const T* s = src.data() + (py * gw + px) * pd;
        for (std::int64_t y = 0; y < patch; ++y)
          std::copy_n(s + y * patch * channels, patch * channels,
                      out.data() + ((py * patch + y) * width + px * patch) * channels);
      }
    return Tensor({height, width, channels}, std::move(out));
  });
}

Tensor sinusoidal_positions(std::int64_t count, std::int64_t dim, DType dtype) {
  if (dim <= 0 || dim % 2 != 0) throw ConfigError("sinusoidal_positions: dimension must be even");
  std::vector<double> table(static_cast<std::size_t>(count * dim));
  for (std::int64_t pos = 0; pos < count; ++pos)
    for (std::int64_t i = 0; i < dim / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
      table[static_cast<std::size_t>(pos * dim + 2 * i)] = std::sin(static_cast<double>(pos) * freq);
      table[static_cast<std::size_t>(pos * dim + 2 * i + 1)] = std::cos(static_cast<double>(pos) * freq);
    }
  return Tensor({count, dim}, std::move(table)).to(dtype);
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::int64_t> ids) { return gather_rows(table, ids); }

std::vector<Segment> single_segment(std::int64_t rows) { return {Segment{0, rows}}; }

}  // namespace ivcl
