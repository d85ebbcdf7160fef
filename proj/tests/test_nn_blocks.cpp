#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ivcl/gradcheck.hpp"
#include "ivcl/nn.hpp"
#include "ivcl/tape.hpp"

using namespace ivcl;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, DType dtype = DType::F32) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v)).to(dtype);
}

BlockConfig small_block() { return {8, 2, 16, 0.0}; }

}  // namespace

TEST(BlockConfig, HeadsMustDivideWidth) {
  EXPECT_THROW((BlockConfig{10, 3, 16, 0.0}.validate()), ConfigError);
  EXPECT_THROW((BlockConfig{8, 2, 16, 0.1}.validate()), ConfigError);
  EXPECT_NO_THROW(small_block().validate());
}

TEST(Patchify, ShapesAndConstantImage) {
  Tensor img = Tensor::full({32, 32, 3}, 0.25, DType::F32);
  Tensor p = patchify(img, 16);
  EXPECT_EQ(p.shape(), (Shape{4, 768}));
  auto v = p.data<float>();
  for (std::int64_t r = 1; r < 4; ++r)
    for (std::int64_t c = 0; c < 768; ++c) ASSERT_EQ(v[r * 768 + c], v[c]);
}

TEST(Patchify, RowMajorPatchOrder) {
  std::vector<float> px(4 * 4 * 1);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(i);
  Tensor p = patchify(Tensor({4, 4, 1}, px), 2);
  auto v = p.data<float>();
  // patch 1 is the top-right 2x2 block
  EXPECT_EQ(v[4 + 0], 2.0f);
  EXPECT_EQ(v[4 + 1], 3.0f);
  EXPECT_EQ(v[4 + 2], 6.0f);
  EXPECT_EQ(v[4 + 3], 7.0f);
}

TEST(Patchify, RoundTripIsExact) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tensor img = random_tensor({48, 32, 3}, seed);
    EXPECT_TRUE(unpatchify(patchify(img, 16), 48, 32, 3, 16).bit_equal(img));
  }
}

TEST(Patchify, IndivisibleIsConfigError) {
  EXPECT_THROW(patchify(Tensor::zeros({30, 32, 3}, DType::F32), 16), ConfigError);
}

TEST(Sinusoidal, KnownValues) {
  Tensor t = sinusoidal_positions(2, 4, DType::F64);
  auto v = t.data<double>();
  EXPECT_EQ(v[0], 0.0);
  EXPECT_EQ(v[1], 1.0);
  EXPECT_EQ(v[2], 0.0);
  EXPECT_EQ(v[3], 1.0);
  const double w = std::pow(10000.0, -2.0 / 4.0);
  EXPECT_NEAR(v[4], std::sin(1.0), 1e-15);
  EXPECT_NEAR(v[5], std::cos(1.0), 1e-15);
  EXPECT_NEAR(v[6], std::sin(w), 1e-15);
  EXPECT_NEAR(v[7], std::cos(w), 1e-15);
}

TEST(Sinusoidal, RangeAndOddDim) {
  Tensor t = sinusoidal_positions(64, 32, DType::F64);
  for (double x : t.data<double>()) {
    EXPECT_GE(x, -1.0);
    EXPECT_LE(x, 1.0);
  }
  EXPECT_THROW(sinusoidal_positions(4, 5), ConfigError);
}

TEST(Attention, SingleTokenGetsWeightOne) {
  Rng rng(1);
  MultiHeadAttention attn(small_block(), rng);
  Tensor x = random_tensor({1, 8}, 2);
  auto r = multi_head_self_attention(x, attn);
  ASSERT_EQ(r.probs.size(), 1u);
  EXPECT_EQ(r.probs[0].shape(), (Shape{2, 1, 1}));
  for (float p : r.probs[0].data<float>()) EXPECT_EQ(p, 1.0f);
  Tensor expected = attn.output.forward(attn.value.forward(x));
  auto a = r.out.data<float>(), b = expected.data<float>();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST(Attention, RowsAreStochastic) {
  Rng rng(2);
  MultiHeadAttention attn(small_block(), rng);
  Tensor x = scale(random_tensor({7, 8}, 3), 5.0);
  auto r = multi_head_self_attention(x, attn);
  ASSERT_EQ(r.probs[0].shape(), (Shape{2, 7, 7}));
  auto p = r.probs[0].data<float>();
  for (int row = 0; row < 14; ++row) {
    double s = 0.0;
    for (int c = 0; c < 7; ++c) s += p[row * 7 + c];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Attention, PermutationEquivariant) {
  Rng rng(3);
  MultiHeadAttention attn(small_block(), rng);
  Tensor x = random_tensor({5, 8}, 4);
  const std::vector<std::int64_t> perm{3, 0, 4, 1, 2};
  Tensor y = multi_head_self_attention(x, attn).out;
  Tensor y_perm = multi_head_self_attention(gather_rows(x, perm), attn).out;
  auto a = gather_rows(y, perm), b = y_perm;
  for (std::int64_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.value(i), b.value(i), 1e-6);
}

TEST(Attention, SegmentsAreIndependent) {
  Rng rng(4);
  MultiHeadAttention attn(small_block(), rng);
  Tensor x = random_tensor({6, 8}, 5);
  const std::vector<Segment> segs{{0, 2}, {2, 4}};
  Tensor packed = attn.self_attend(x, segs).out;
  Tensor second = multi_head_self_attention(slice_rows(x, 2, 4), attn).out;
  for (std::int64_t i = 0; i < second.numel(); ++i) EXPECT_NEAR(packed.value(16 + i), second.value(i), 1e-6);
}

TEST(TransformerBlock, ZeroedProjectionsGiveIdentity) {
  Rng rng(5);
  TransformerBlock block(small_block(), rng);
  block.zero_residual_projections();
  Tensor x = random_tensor({6, 8}, 6);
  EXPECT_TRUE(block.forward(x, single_segment(6)).bit_equal(x));
}

TEST(TransformerBlock, ShapePreserved) {
  Rng rng(6);
  TransformerBlock block(small_block(), rng);
  for (std::int64_t n : {1, 2, 9}) {
    Tensor y = block.forward(random_tensor({n, 8}, 7), single_segment(n));
    EXPECT_EQ(y.shape(), (Shape{n, 8}));
  }
}

TEST(TransformerBlock, TwoLayerStackPassesGradcheck) {
  PrecisionScope precision(DType::F64);
  Rng rng(7);
  TransformerBlock b1(small_block(), rng), b2(small_block(), rng);
  ParamRefs refs;
  b1.collect("b1", refs);
  b2.collect("b2", refs);
  for (auto& [name, t] : refs) *t = t->to(DType::F64);
  Tensor x = random_tensor({4, 8}, 8, DType::F64).set_requires_grad(true);
  std::vector<Tensor> wrt{x};
  for (auto& [name, t] : refs) wrt.push_back(*t);
  const auto segs = single_segment(4);
  auto r = gradcheck("block stack", wrt, [&] {
    return random_projection_loss(b2.forward(b1.forward(x, segs), segs), 9);
  });
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(EmbeddingLookup, IdentityTableGivesOneHot) {
  std::vector<float> eye(9, 0.0f);
  for (int i = 0; i < 3; ++i) eye[i * 4] = 1.0f;
  const std::vector<std::int64_t> ids{2, 0};
  Tensor rows = embedding_lookup(Tensor({3, 3}, eye), ids);
  EXPECT_EQ(rows.to_f32(), (std::vector<float>{0, 0, 1, 1, 0, 0}));
}

TEST(EmbeddingLookup, OutOfRange) {
  const std::vector<std::int64_t> ids{-1};
  EXPECT_THROW(embedding_lookup(Tensor::zeros({3, 3}, DType::F32), ids), IndexError);
}

TEST(EmbeddingLookup, ScatterGradcheck) {
  PrecisionScope precision(DType::F64);
  Tensor table = random_tensor({4, 3}, 10, DType::F64).set_requires_grad(true);
  const std::vector<std::int64_t> ids{1, 3, 1, 0};
  auto r = gradcheck("embedding", {table}, [&] {
    Tensor rows = embedding_lookup(table, ids);
    return random_projection_loss(mul(rows, rows), 11);
  });
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(Init, TruncatedNormalWithinTwoSigma) {
  Rng rng(8);
  Tensor t = truncated_normal({64, 64}, 0.02, rng);
  EXPECT_TRUE(t.requires_grad());
  double s = 0.0;
  for (float v : t.data<float>()) {
    EXPECT_LE(std::abs(v), 0.04f + 1e-7f);
    s += v * v;
  }
  const double sd = std::sqrt(s / 4096.0);
  // truncated N(0,1) at ±2 has standard deviation ≈ 0.8796
  EXPECT_NEAR(sd, 0.02 * 0.8796, 0.02 * 0.05);
}
