#include <functional>
#include <random>

#include "ivcl/gradcheck.hpp"
#include "ivcl/model.hpp"
#include "ivcl/pretraining.hpp"
#include "ivcl/tape.hpp"
#include "ivcl/transfer.hpp"

namespace ivcl {

namespace {

Tensor uniform_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = u(rng);
  return Tensor(shape, std::move(v));
}

Tensor to_scalar(const Tensor& out, std::uint64_t seed) {
  return out.numel() == 1 ? out : random_projection_loss(out, seed);
}

struct Primitive {
  const char* name;
  std::vector<Shape> shapes;
  std::function<Tensor(const std::vector<Tensor>&)> f;
};

std::vector<Primitive> primitives() {
  static const std::vector<std::int64_t> ids{2, 0, 2, 1};
  static const std::vector<std::int64_t> labels{1, 0, 3};
  static const std::vector<Segment> segs_q{{0, 3}, {3, 2}}, segs_k{{0, 2}, {2, 4}}, causal{{0, 3}, {3, 2}};
  return {
      {"add", {{3, 4}, {3, 4}}, [](auto& in) { return add(in[0], in[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](auto& in) { return sub(in[0], in[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](auto& in) { return mul(in[0], in[1]); }},
      {"scale", {{3, 4}}, [](auto& in) { return scale(in[0], -1.7); }},
      {"add_row", {{3, 4}, {4}}, [](auto& in) { return add_row(in[0], in[1]); }},
      {"matmul", {{3, 5}, {5, 2}}, [](auto& in) { return matmul(in[0], in[1]); }},
      {"transpose", {{3, 5}}, [](auto& in) { return transpose(in[0]); }},
      {"reshape", {{3, 4}}, [](auto& in) { return mul(reshape(in[0], {2, 6}), reshape(in[0], {2, 6})); }},
      {"gelu", {{3, 4}}, [](auto& in) { return gelu(scale(in[0], 2.0)); }},
      {"layer_norm", {{3, 6}, {6}, {6}}, [](auto& in) { return layer_norm(in[0], in[1], in[2]); }},
      {"softmax", {{3, 5}}, [](auto& in) { return softmax(in[0], -1); }},
      {"softmax_axis0", {{3, 5}}, [](auto& in) { return softmax(in[0], 0); }},
      {"sum", {{3, 4}}, [](auto& in) { return sum(mul(in[0], in[0])); }},
      {"mean", {{3, 4}}, [](auto& in) { return mean(mul(in[0], in[0])); }},
      {"mean_rows", {{3, 4}}, [](auto& in) { return mean_rows(mul(in[0], in[0])); }},
      {"gather_rows", {{3, 4}}, [](auto& in) { return gather_rows(in[0], ids); }},
      {"concat_rows", {{2, 3}, {1, 3}}, [](auto& in) { return concat_rows(std::vector<Tensor>{in[0], in[1], in[0]}); }},
      {"slice_rows", {{5, 3}}, [](auto& in) { return slice_rows(in[0], 1, 3); }},
      {"embedding_lookup", {{4, 3}}, [](auto& in) { return mul(embedding_lookup(in[0], ids), embedding_lookup(in[0], ids)); }},
      {"cross_entropy", {{3, 4}}, [](auto& in) { return cross_entropy(scale(in[0], 3.0), labels); }},
      {"mse", {{3, 4}, {3, 4}}, [](auto& in) { return mse(in[0], in[1]); }},
      {"attention", {{5, 4}, {6, 4}, {6, 4}}, [](auto& in) { return attention(in[0], in[1], in[2], 2, segs_q, segs_k).out; }},
      {"attention_causal", {{5, 4}, {5, 4}, {5, 4}},
       [](auto& in) { return attention(scale(in[0], 3.0), in[1], in[2], 2, causal, causal, true).out; }},
  };
}

ModelConfig suite_model(std::int64_t slots, PoolMethod method) {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.encoder_layers = 3;
  c.hidden_dim = 8;
  c.encoder_heads = 2;
  c.mlp_dim = 16;
  c.num_slots = slots;
  c.pool_layer = 1;
  c.pool_method = method;
  c.temporal_layers = 1;
  c.temporal_heads = 2;
  c.decoder_layers = 1;
  c.decoder_heads = 2;
  c.max_frames = 8;
  c.init_seed = 3;
  return c;
}

std::vector<Tensor> tensors_of(const ParamRefs& refs) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : refs) out.push_back(*t);
  return out;
}

ParamRefs f64_params(ParamRefs refs, std::uint64_t seed) {
  for (auto& [name, t] : refs) *t = t->to(DType::F64).set_requires_grad(true);
  randomize_uniform(refs, seed);
  return refs;
}

}  // namespace

std::vector<GradcheckResult> gradcheck_suite(const GradcheckOptions& options) {
  PrecisionScope precision(DType::F64);
  std::vector<GradcheckResult> results;
  std::uint64_t seed = options.seed * 1000 + 1;

  for (const auto& p : primitives()) {
    std::vector<Tensor> in;
    for (const auto& s : p.shapes) in.push_back(uniform_tensor(s, ++seed).set_requires_grad(true));
    const auto proj = ++seed;
    results.push_back(gradcheck(p.name, in, [&] { return to_scalar(p.f(in), proj); }, options));
  }

  const BlockConfig block{8, 2, 16, 0.0};
  {
    Rng rng(++seed);
    Linear embed(48, 8, rng);
    ParamRefs refs;
    embed.collect("embed", refs);
    refs = f64_params(refs, ++seed);
    Tensor patches = uniform_tensor({16, 48}, ++seed, 0.0, 1.0);
    const Tensor positions = sinusoidal_positions(16, 8, DType::F64);
    results.push_back(gradcheck("patch_embed", tensors_of(refs), [&] {
      return random_projection_loss(add(embed.forward(patches), positions), 7);
    }, options));
  }
  {
    Rng rng(++seed);
    MultiHeadAttention mhsa(block, rng);
    ParamRefs refs;
    mhsa.collect("mhsa", refs);
    refs = f64_params(refs, ++seed);
    Tensor x = uniform_tensor({5, 8}, ++seed).set_requires_grad(true);
    auto wrt = tensors_of(refs);
    wrt.push_back(x);
    results.push_back(gradcheck("mhsa", wrt, [&] {
      return random_projection_loss(multi_head_self_attention(x, mhsa).out, 8);
    }, options));
  }
  {
    Rng rng(++seed);
    TransformerBlock b1(block, rng), b2(block, rng);
    ParamRefs refs;
    b1.collect("b1", refs);
    b2.collect("b2", refs);
    refs = f64_params(refs, ++seed);
    Tensor x = uniform_tensor({4, 8}, ++seed).set_requires_grad(true);
    auto wrt = tensors_of(refs);
    wrt.push_back(x);
    const auto segs = single_segment(4);
    results.push_back(gradcheck("transformer_block", wrt, [&] {
      return random_projection_loss(b2.forward(b1.forward(x, segs), segs), 9);
    }, options));
  }
  for (auto method : {PoolMethod::Slice, PoolMethod::SoftAttention, PoolMethod::GumbelMax}) {
    IvclModel m = IvclModel(suite_model(2, method)).cast(DType::F64);
    randomize_uniform(m.parameters(), ++seed);
    Tensor frame = uniform_tensor({16, 48}, ++seed, 0.0, 1.0);
    GumbelSelection frozen;
    EncodeOptions opts;
    opts.gumbel = &frozen;
    {
      NoGradGuard no_grad;
      encode_image(m, frame, all_patch_ids(16), opts);
    }
    results.push_back(gradcheck(std::string("pool_") + to_string(method), tensors_of(m.parameters()), [&] {
      auto f = encode_image(m, frame, all_patch_ids(16), opts);
      return add(random_projection_loss(f.slots, 1), random_projection_loss(f.patches, 2));
    }, options));
  }
  {
    IvclModel m = IvclModel(suite_model(2, PoolMethod::Slice)).cast(DType::F64);
    randomize_uniform(m.parameters(), ++seed);
    const std::vector<std::int64_t> visible{1, 4, 6, 11};
    Tensor ctx_frame = uniform_tensor({16, 48}, ++seed, 0.0, 1.0), q_frame = uniform_tensor({16, 48}, ++seed, 0.0, 1.0);
    auto run = [&](bool decode) {
      auto ctx = encode_image(m, ctx_frame, all_patch_ids(16));
      auto q = encode_image(m, q_frame, visible);
      std::vector<ContextSlots> c{{0, ctx.slots}};
      std::vector<QueryPatches> qs{{3, q}};
      auto out = temporal_forward(m, c, qs);
      return decode ? random_projection_loss(decode_frame(m, out[0], visible), 3) : random_projection_loss(out[0], 4);
    };
    ParamRefs temporal;
    m.temporal().collect("temporal", temporal);
    ParamRefs decoder;
    m.decoder().collect("decoder", decoder);
    results.push_back(gradcheck("temporal", tensors_of(temporal), [&] { return run(false); }, options));
    results.push_back(gradcheck("decoder", tensors_of(decoder), [&] { return run(true); }, options));
  }
  {
    IvclModel m = IvclModel(suite_model(2, PoolMethod::Slice)).cast(DType::F64);
    randomize_uniform(m.parameters(), ++seed);
    Rng rng(++seed);
    std::vector<Clip> clips{{uniform_tensor({16, 48}, ++seed, 0.0, 1.0), uniform_tensor({16, 48}, ++seed, 0.0, 1.0),
                             uniform_tensor({16, 48}, ++seed, 0.0, 1.0)}};
    std::vector<MaskPlan> plans{make_mask_plan(3, 1, 16, 0.375, rng)};
    results.push_back(gradcheck("reconstruction_loss", tensors_of(m.parameters()), [&] {
      return masked_reconstruction(m, clips, plans, true).loss;
    }, options));
  }
  {
    IvclModel m = IvclModel(suite_model(2, PoolMethod::Slice), false).cast(DType::F64);
    Rng rng(++seed);
    TaskHead head(8, 3, rng);
    ParamRefs refs = m.parameters();
    head.collect("head", refs);
    refs = f64_params(refs, ++seed);
    std::vector<std::vector<Tensor>> videos{{uniform_tensor({16, 48}, ++seed, 0.0, 1.0), uniform_tensor({16, 48}, ++seed, 0.0, 1.0)},
                                            {uniform_tensor({16, 48}, ++seed, 0.0, 1.0)}};
    const std::vector<std::int64_t> labels{2, 0};
    results.push_back(gradcheck("classification_loss", tensors_of(refs), [&] {
      return cross_entropy(head.forward(encode_videos_for_transfer(m, videos)), labels);
    }, options));
  }
  return results;
}

}  // namespace ivcl
