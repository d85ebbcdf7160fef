#include <gtest/gtest.h>

#include <random>

#include "ivcl/gradcheck.hpp"
#include "ivcl/model.hpp"
#include "ivcl/tape.hpp"

using namespace ivcl;

namespace {

ModelConfig tiny(std::int64_t slots = 2, PoolMethod method = PoolMethod::Slice) {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.channels = 3;
  c.encoder_layers = 3;
  c.hidden_dim = 8;
  c.encoder_heads = 2;
  c.mlp_dim = 16;
  c.num_slots = slots;
  c.pool_layer = 2;
  c.pool_method = method;
  c.temporal_layers = 1;
  c.temporal_heads = 2;
  c.decoder_layers = 1;
  c.decoder_heads = 2;
  c.max_frames = 8;
  c.init_seed = 3;
  return c;
}

Tensor random_patches(const ModelConfig& c, std::uint64_t seed, DType dtype = DType::F32) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(c.total_patches() * c.patch_dim()));
  for (auto& x : v) x = u(rng);
  return Tensor({c.total_patches(), c.patch_dim()}, std::move(v)).to(dtype);
}

Tensor with_patch_replaced(const Tensor& patches, std::int64_t id, std::uint64_t seed) {
  Tensor out = patches.clone();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto v = out.mutable_data<float>();
  const auto pd = out.dim(1);
  for (std::int64_t j = 0; j < pd; ++j) v[static_cast<std::size_t>(id * pd + j)] = static_cast<float>(u(rng));
  return out;
}

std::vector<Tensor> params_of(IvclModel& m) {
  std::vector<Tensor> out;
  for (auto& [name, t] : m.parameters()) out.push_back(*t);
  return out;
}

}  // namespace

TEST(ModelConfig, Validation) {
  ModelConfig c = tiny();
  c.pool_layer = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.num_slots = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.image_size = 18;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_pool_method("max"), ConfigError);
  EXPECT_EQ(parse_pool_method("gumbel"), PoolMethod::GumbelMax);
}

TEST(EncodeImage, Shapes) {
  IvclModel m(tiny(1));
  const std::vector<std::int64_t> visible{0, 5, 6, 15};
  auto f = encode_image(m, random_patches(m.config(), 1), visible);
  EXPECT_EQ(f.slots.shape(), (Shape{1, 8}));
  EXPECT_EQ(f.patches.shape(), (Shape{4, 8}));
  EXPECT_EQ(f.patch_ids, visible);
}

TEST(EncodeImage, MaskedContentCannotLeak) {
  IvclModel m(tiny());
  const std::vector<std::int64_t> visible{1, 2, 3, 8, 9};
  Tensor a = random_patches(m.config(), 2);
  Tensor b = with_patch_replaced(a, 4, 99);
  auto fa = encode_image(m, a, visible), fb = encode_image(m, b, visible);
  EXPECT_TRUE(fa.slots.bit_equal(fb.slots));
  EXPECT_TRUE(fa.patches.bit_equal(fb.patches));
}

TEST(EncodeImage, SlotsRespondToEveryVisiblePatch) {
  IvclModel m(tiny());
  const std::vector<std::int64_t> visible{0, 3, 7, 12};
  Tensor a = random_patches(m.config(), 3);
  auto base = encode_image(m, a, visible);
  for (auto id : visible) {
    auto other = encode_image(m, with_patch_replaced(a, id, 100 + id), visible);
    EXPECT_FALSE(other.slots.bit_equal(base.slots)) << "patch " << id;
  }
}

TEST(EncodeImage, EmptyOrUnsortedVisibleRejected) {
  IvclModel m(tiny());
  Tensor a = random_patches(m.config(), 4);
  EXPECT_THROW(encode_image(m, a, std::vector<std::int64_t>{}), ContractViolation);
  EXPECT_THROW(encode_image(m, a, std::vector<std::int64_t>{3, 1}), ContractViolation);
  EXPECT_THROW(encode_image(m, a, std::vector<std::int64_t>{16}), ContractViolation);
}

TEST(EncodeImage, BatchedEqualsSingle) {
  IvclModel m(tiny());
  const auto all = all_patch_ids(16);
  const std::vector<std::int64_t> some{2, 4, 9};
  std::vector<FrameInput> frames{{random_patches(m.config(), 5), all, true},
                                 {random_patches(m.config(), 6), some, true}};
  auto batch = m.encoder().encode(frames);
  for (std::size_t i = 0; i < 2; ++i) {
    auto single = encode_image(m, frames[i].patches, frames[i].visible);
    auto got = batch.frame(i);
    for (std::int64_t j = 0; j < single.slots.numel(); ++j) EXPECT_NEAR(got.slots.value(j), single.slots.value(j), 1e-6);
    for (std::int64_t j = 0; j < single.patches.numel(); ++j)
      EXPECT_NEAR(got.patches.value(j), single.patches.value(j), 1e-6);
  }
}

TEST(PoolSlots, SliceAtLastLayerReadsSlotRows) {
  ModelConfig c = tiny();
  IvclModel m(c);
  std::vector<Tensor> states;
  EncodeOptions opts;
  opts.layer_states = &states;
  auto f = encode_image(m, random_patches(c, 7), all_patch_ids(16), opts);
  ASSERT_EQ(states.size(), 3u);
  EXPECT_TRUE(m.encoder().pool_slots(states).bit_equal(f.slots));
}

TEST(PoolSlots, EarlierPoolLayerDiscardsPatches) {
  ModelConfig c = tiny();
  c.pool_layer = 0;
  IvclModel m(c);
  std::vector<Tensor> states;
  EncodeOptions opts;
  opts.layer_states = &states;
  std::vector<FrameInput> frames{{random_patches(c, 8), all_patch_ids(16), false}};
  auto batch = m.encoder().encode(frames, opts);
  EXPECT_EQ(states.size(), 1u);
  EXPECT_FALSE(batch.patches.defined());
  EXPECT_EQ(batch.frames[0].patch_offset, -1);
  EXPECT_TRUE(m.encoder().pool_slots(states).bit_equal(batch.slots));
}

TEST(PoolSlots, GumbelArgmaxWithoutNoise) {
  Tensor scores({1, 3}, std::vector<float>{1, 3, 2});
  auto w = gumbel_max_weights(scores, 1.0, nullptr);
  EXPECT_EQ(w.hard.to_f32(), (std::vector<float>{0, 1, 0}));
  EXPECT_EQ(w.weights.to_f32(), (std::vector<float>{0, 1, 0}));
}

TEST(PoolSlots, GumbelNoiseIsSeeded) {
  Tensor scores({2, 6}, std::vector<float>(12, 0.0f));
  Rng r1(5), r2(5);
  auto a = gumbel_max_weights(scores, 0.5, &r1), b = gumbel_max_weights(scores, 0.5, &r2);
  EXPECT_TRUE(a.hard.bit_equal(b.hard));
}

TEST(PoolSlots, SoftAttentionWeightsSumToOne) {
  ModelConfig c = tiny(3, PoolMethod::SoftAttention);
  c.pool_layer = 1;
  IvclModel m(c);
  std::vector<Tensor> states;
  EncodeOptions opts;
  opts.layer_states = &states;
  encode_image(m, random_patches(c, 9), all_patch_ids(16), opts);
  Tensor w = m.encoder().pool_weights(states[1]);
  ASSERT_EQ(w.shape(), (Shape{3, 16}));
  for (int r = 0; r < 3; ++r) {
    double s = 0.0;
    for (int j = 0; j < 16; ++j) s += w.value(r * 16 + j);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  EXPECT_THROW(IvclModel(tiny()).encoder().pool_weights(states[1]), ConfigError);
}

TEST(PoolSlots, MethodsShareShapesAcrossSlotCounts) {
  for (auto method : {PoolMethod::Slice, PoolMethod::SoftAttention, PoolMethod::GumbelMax})
    for (std::int64_t s : {1, 2, 4, 8}) {
      ModelConfig c = tiny(s, method);
      c.pool_layer = 1;
      IvclModel m(c);
      Rng rng(1);
      EncodeOptions opts;
      opts.gumbel_rng = &rng;
      auto f = encode_image(m, random_patches(c, 10), all_patch_ids(16), opts);
      EXPECT_EQ(f.slots.shape(), (Shape{s, 8})) << to_string(method) << " S=" << s;
      EXPECT_EQ(f.patches.shape(), (Shape{16, 8}));
    }
}

TEST(TemporalForward, NoContextAndShapePreserved) {
  IvclModel m(tiny());
  const std::vector<std::int64_t> visible{0, 1, 5};
  std::vector<QueryPatches> q{{2, encode_image(m, random_patches(m.config(), 11), visible)}};
  auto out = temporal_forward(m, {}, q);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].shape(), (Shape{3, 8}));
}

TEST(TemporalForward, ContextSlotsInfluenceQueries) {
  IvclModel m(tiny());
  const auto all = all_patch_ids(16);
  const std::vector<std::int64_t> visible{0, 1, 5, 9};
  auto ctx = encode_image(m, random_patches(m.config(), 12), all);
  std::vector<QueryPatches> q{{1, encode_image(m, random_patches(m.config(), 13), visible)}};
  std::vector<ContextSlots> c{{0, ctx.slots}};
  auto with = temporal_forward(m, c, q);
  c[0].slots = Tensor::zeros(ctx.slots.shape(), DType::F32);
  auto zeroed = temporal_forward(m, c, q);
  EXPECT_FALSE(with[0].bit_equal(zeroed[0]));
}

TEST(TemporalForward, FrameIndexBeyondTable) {
  IvclModel m(tiny());
  auto ctx = encode_image(m, random_patches(m.config(), 14), all_patch_ids(16));
  std::vector<ContextSlots> c{{8, ctx.slots}};
  std::vector<QueryPatches> q{{0, ctx}};
  EXPECT_THROW(temporal_forward(m, c, q), ConfigError);
}

TEST(DecodeFrame, ShapesAndNoMask) {
  IvclModel m(tiny());
  Tensor ctx = Tensor::full({16, 8}, 0.1, DType::F32);
  EXPECT_EQ(decode_frame(m, ctx, all_patch_ids(16)).shape(), (Shape{16, 48}));
  const std::vector<std::int64_t> ids{3, 4};
  EXPECT_EQ(decode_frame(m, slice_rows(ctx, 0, 2), ids).shape(), (Shape{16, 48}));
}

TEST(DecodeFrame, SwappedPositionsSwapPredictions) {
  IvclModel m(tiny());
  const auto& c = m.config();
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<float> v(3 * 8);
  for (auto& x : v) x = static_cast<float>(u(rng));
  Tensor ctx({3, 8}, v);
  std::vector<FrameDecoder::FrameTokens> frames{{0, {0, 7, 10}}};
  Tensor pos = sinusoidal_positions(c.total_patches(), c.hidden_dim, DType::F32);
  std::vector<std::int64_t> order = all_patch_ids(16);
  std::swap(order[2], order[13]);  // both masked positions
  Tensor swapped = gather_rows(pos, order);
  Tensor a = m.decoder().decode(ctx, frames, &pos);
  Tensor b = m.decoder().decode(ctx, frames, &swapped);
  const auto pd = c.patch_dim();
  for (std::int64_t j = 0; j < pd; ++j) {
    EXPECT_NEAR(a.value(2 * pd + j), b.value(13 * pd + j), 1e-5);
    EXPECT_NEAR(a.value(13 * pd + j), b.value(2 * pd + j), 1e-5);
  }
}

TEST(Transfer, SingleFrameSingleSlot) {
  IvclModel m(tiny(1));
  Tensor f = random_patches(m.config(), 16);
  Tensor pooled = encode_video_for_transfer(m, std::vector<Tensor>{f});
  auto slots = encode_image(m, f, all_patch_ids(16)).slots;
  const std::vector<std::int64_t> t0{0};
  Tensor token = m.temporal().forward(slots, t0, single_segment(1));
  EXPECT_EQ(pooled.shape(), (Shape{1, 8}));
  for (std::int64_t j = 0; j < 8; ++j) EXPECT_NEAR(pooled.value(j), token.value(j), 1e-6);
}

TEST(Transfer, IdenticalFramesWithoutTimeEmbeddingAgree) {
  IvclModel m(tiny(1));
  auto& table = m.temporal().time_table();
  std::fill(table.mutable_data<float>().begin(), table.mutable_data<float>().end(), 0.0f);
  Tensor f = random_patches(m.config(), 17);
  auto slots = encode_image(m, f, all_patch_ids(16)).slots;
  Tensor tokens = concat_rows(std::vector<Tensor>{slots, slots, slots});
  const std::vector<std::int64_t> t{0, 1, 2};
  Tensor out = m.temporal().forward(tokens, t, single_segment(3));
  for (std::int64_t j = 0; j < 8; ++j) {
    EXPECT_NEAR(out.value(j), out.value(8 + j), 1e-6);
    EXPECT_NEAR(out.value(j), out.value(16 + j), 1e-6);
  }
}

TEST(Transfer, BatchedVideosMatchIndividually) {
  IvclModel m(tiny(2));
  std::vector<std::vector<Tensor>> videos{{random_patches(m.config(), 18), random_patches(m.config(), 19)},
                                          {random_patches(m.config(), 20)}};
  Tensor batch = encode_videos_for_transfer(m, videos);
  EXPECT_EQ(batch.shape(), (Shape{2, 8}));
  for (std::size_t b = 0; b < 2; ++b) {
    Tensor one = encode_video_for_transfer(m, videos[b]);
    for (std::int64_t j = 0; j < 8; ++j)
      EXPECT_NEAR(batch.value(static_cast<std::int64_t>(b) * 8 + j), one.value(j), 1e-6);
  }
}

TEST(Model, CastIsDeepCopy) {
  IvclModel m(tiny());
  IvclModel copy = m.cast(DType::F32);
  auto& w = *copy.parameters()[0].second;
  w.mutable_data<float>()[0] += 1.0f;
  EXPECT_FALSE(w.bit_equal(*m.parameters()[0].second));
  EXPECT_FALSE(copy.has_decoder() != m.has_decoder());
}

TEST(Model, DecoderIsOptional) {
  IvclModel m(tiny(), false);
  EXPECT_FALSE(m.has_decoder());
  EXPECT_THROW(m.decoder(), ContractViolation);
  IvclModel full(tiny());
  // encoder and temporal parameters do not depend on the decoder's presence
  auto a = m.parameters(), b = full.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_TRUE(a[i].second->bit_equal(*b[i].second));
  }
}

class ModelGradcheck : public ::testing::TestWithParam<PoolMethod> {};

TEST_P(ModelGradcheck, EncoderPooling) {
  PrecisionScope precision(DType::F64);
  ModelConfig c = tiny(2, GetParam());
  c.pool_layer = 1;
  IvclModel m = IvclModel(c).cast(DType::F64);
  randomize_uniform(m.parameters(), 31);
  Tensor frame = random_patches(c, 21, DType::F64);
  GumbelSelection frozen;
  EncodeOptions opts;
  opts.gumbel = &frozen;
  {
    NoGradGuard g;
    encode_image(m, frame, all_patch_ids(16), opts);
  }
  auto r = gradcheck(std::string("pool ") + to_string(GetParam()), params_of(m), [&] {
    auto f = encode_image(m, frame, all_patch_ids(16), opts);
    return add(random_projection_loss(f.slots, 1), random_projection_loss(f.patches, 2));
  });
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

INSTANTIATE_TEST_SUITE_P(Methods, ModelGradcheck,
                         ::testing::Values(PoolMethod::Slice, PoolMethod::SoftAttention, PoolMethod::GumbelMax),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(ModelGradcheck, TemporalAndDecoder) {
  PrecisionScope precision(DType::F64);
  IvclModel m = IvclModel(tiny()).cast(DType::F64);
  randomize_uniform(m.parameters(), 32);
  const std::vector<std::int64_t> visible{1, 4, 6, 11};
  Tensor ctx_frame = random_patches(m.config(), 22, DType::F64);
  Tensor q_frame = random_patches(m.config(), 23, DType::F64);
  auto r = gradcheck("temporal+decoder", params_of(m), [&] {
    auto ctx = encode_image(m, ctx_frame, all_patch_ids(16));
    auto q = encode_image(m, q_frame, visible);
    std::vector<ContextSlots> c{{0, ctx.slots}};
    std::vector<QueryPatches> qs{{3, q}};
    auto out = temporal_forward(m, c, qs);
    return random_projection_loss(decode_frame(m, out[0], visible), 3);
  });
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(ModelGradcheck, TransferPathTwoFrames) {
  PrecisionScope precision(DType::F64);
  IvclModel m = IvclModel(tiny(), false).cast(DType::F64);
  randomize_uniform(m.parameters(), 33);
  std::vector<Tensor> frames{random_patches(m.config(), 24, DType::F64), random_patches(m.config(), 25, DType::F64)};
  auto r = gradcheck("transfer", params_of(m), [&] {
    return random_projection_loss(encode_video_for_transfer(m, frames), 4);
  });
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}
