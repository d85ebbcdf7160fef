#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <set>
#include <sstream>

#include "ivcl/pretraining.hpp"
#include "ivcl/tape.hpp"

using namespace ivcl;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.encoder_layers = 2;
  c.hidden_dim = 16;
  c.encoder_heads = 2;
  c.mlp_dim = 32;
  c.num_slots = 2;
  c.pool_layer = 1;
  c.temporal_layers = 1;
  c.temporal_heads = 2;
  c.decoder_layers = 1;
  c.decoder_heads = 2;
  c.max_frames = 8;
  c.init_seed = 5;
  return c;
}

Tensor random_patches(std::int64_t rows, std::int64_t cols, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> v(static_cast<std::size_t>(rows * cols));
  for (auto& x : v) x = u(rng);
  return Tensor({rows, cols}, std::move(v));
}

std::vector<Video> shell_videos(std::size_t count, std::int64_t frames) {
  ShellGameConfig cfg;
  cfg.image_size = 16;
  cfg.num_frames = frames;
  std::vector<Video> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(gen_shell_game(episode_seed(1, i), cfg).frames);
  return out;
}

std::vector<Clip> fixed_clips(const std::vector<Video>& videos, std::int64_t frames) {
  std::vector<Clip> clips;
  std::vector<std::int64_t> ids(static_cast<std::size_t>(frames));
  for (std::int64_t t = 0; t < frames; ++t) ids[static_cast<std::size_t>(t)] = t;
  for (const auto& v : videos) clips.push_back(clip_patches(v, ids, 4, DType::F32));
  return clips;
}

}  // namespace

TEST(MaskCount, RoundsToNearest) {
  EXPECT_EQ(mask_count(16, 0.375), 6);
  EXPECT_EQ(mask_count(16, 0.125), 2);
  EXPECT_EQ(mask_count(16, 0.5), 8);
  EXPECT_EQ(mask_count(16, 0.875), 14);
  EXPECT_EQ(mask_count(10, 0.25), 3);  // 2.5 rounds away from zero
  EXPECT_THROW(mask_count(16, 0.01), ConfigError);
  EXPECT_THROW(mask_count(16, 0.99), ConfigError);
}

TEST(MaskPlan, ExactCountsAndUnmaskedContext) {
  Rng rng(1);
  for (double r : {0.125, 0.375, 0.5, 0.875})
    for (int i = 0; i < 200; ++i) {
      auto plan = make_mask_plan(8, 3, 16, r, rng);
      ASSERT_EQ(plan.context.size(), 3u);
      ASSERT_TRUE(std::is_sorted(plan.context.begin(), plan.context.end()));
      for (std::int64_t t = 0; t < 8; ++t) {
        const auto& m = plan.masked[static_cast<std::size_t>(t)];
        if (plan.is_context(t)) {
          ASSERT_TRUE(m.empty());
        } else {
          ASSERT_EQ(static_cast<std::int64_t>(m.size()), std::llround(r * 16));
          ASSERT_EQ(std::set<std::int64_t>(m.begin(), m.end()).size(), m.size());
          ASSERT_EQ(plan.visible(t, 16).size() + m.size(), 16u);
        }
      }
    }
}

TEST(MaskPlan, NoContextMeansAllQuery) {
  Rng rng(2);
  auto plan = make_mask_plan(5, 0, 16, 0.375, rng);
  EXPECT_TRUE(plan.context.empty());
  EXPECT_EQ(plan.query_frames().size(), 5u);
  EXPECT_THROW(make_mask_plan(5, 5, 16, 0.375, rng), ConfigError);
}

TEST(MaskPlan, MaskedPatchesUniform) {
  Rng rng(3);
  std::vector<double> counts(16, 0.0);
  const int plans = 10000;
  for (int i = 0; i < plans; ++i) {
    auto plan = make_mask_plan(2, 1, 16, 0.375, rng);
    for (const auto& m : plan.masked)
      for (auto id : m) counts[static_cast<std::size_t>(id)] += 1.0;
  }
  const double expected = plans * 6.0 / 16.0;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  boost::math::chi_squared dist(15);
  EXPECT_GT(boost::math::cdf(boost::math::complement(dist, chi2)), 0.01) << chi2;
}

TEST(MaskPlan, ContextFramesUniform) {
  Rng rng(4);
  std::vector<double> counts(8, 0.0);
  const int plans = 10000;
  for (int i = 0; i < plans; ++i)
    for (auto t : make_mask_plan(8, 2, 16, 0.375, rng).context) counts[static_cast<std::size_t>(t)] += 1.0;
  const double expected = plans * 2.0 / 8.0;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  boost::math::chi_squared dist(7);
  EXPECT_GT(boost::math::cdf(boost::math::complement(dist, chi2)), 0.01) << chi2;
}

TEST(SampleClip, IdentityAndOrder) {
  Rng rng(5);
  EXPECT_EQ(sample_clip(4, 4, rng), (std::vector<std::int64_t>{0, 1, 2, 3}));
  for (int i = 0; i < 100; ++i) {
    auto ids = sample_clip(30, 7, rng);
    ASSERT_EQ(ids.size(), 7u);
    for (std::size_t j = 1; j < ids.size(); ++j) ASSERT_LT(ids[j - 1], ids[j]);
  }
  EXPECT_THROW(sample_clip(3, 4, rng), DataError);
}

TEST(SampleClip, InclusionProbability) {
  Rng rng(6);
  const int draws = 10000;
  const std::int64_t len = 24, T = 8;
  std::vector<int> hits(static_cast<std::size_t>(len), 0);
  for (int i = 0; i < draws; ++i)
    for (auto t : sample_clip(len, T, rng)) ++hits[static_cast<std::size_t>(t)];
  const double p = static_cast<double>(T) / static_cast<double>(len);
  const double sigma = std::sqrt(p * (1 - p) / draws);
  for (int h : hits) EXPECT_NEAR(h / static_cast<double>(draws), p, 3 * sigma);
}

TEST(ReconstructionLoss, ZeroAndConstantOffset) {
  Rng rng(7);
  MaskPlan plan = make_mask_plan(3, 1, 16, 0.375, rng);
  Tensor target = random_patches(32, 48, 8);
  EXPECT_EQ(reconstruction_loss(target, target, plan).item(), 0.0);
  Tensor shifted = add(target, Tensor::full({32, 48}, 1.0, DType::F32));
  // float rounding of x + 1 - x is exact for x in [0, 1)
  EXPECT_EQ(reconstruction_loss(shifted, target, plan).item(), 1.0);
}

TEST(ReconstructionLoss, MatchesNaiveLoop) {
  Rng rng(9);
  std::vector<MaskPlan> plans{make_mask_plan(4, 1, 16, 0.375, rng), make_mask_plan(4, 2, 16, 0.5, rng)};
  const std::int64_t q = 3 + 2;
  Tensor pred = random_patches(q * 16, 48, 10), target = random_patches(q * 16, 48, 11);
  for (bool all : {false, true}) {
    double s = 0.0;
    std::int64_t n = 0, frame = 0;
    for (const auto& plan : plans)
      for (std::int64_t t = 0; t < 4; ++t) {
        if (plan.is_context(t)) continue;
        for (std::int64_t p = 0; p < 16; ++p) {
          const auto& m = plan.masked[static_cast<std::size_t>(t)];
          if (!all && std::find(m.begin(), m.end(), p) == m.end()) continue;
          for (std::int64_t c = 0; c < 48; ++c) {
            const double d = pred.value((frame * 16 + p) * 48 + c) - target.value((frame * 16 + p) * 48 + c);
            s += d * d;
            ++n;
          }
        }
        ++frame;
      }
    EXPECT_NEAR(reconstruction_loss(pred, target, plans, all).item(), s / static_cast<double>(n), 1e-6);
  }
}

TEST(ReconstructionLoss, ShapeMismatch) {
  Rng rng(12);
  MaskPlan plan = make_mask_plan(2, 0, 16, 0.375, rng);
  EXPECT_THROW(reconstruction_loss(random_patches(32, 48, 1), random_patches(32, 47, 2), plan), ShapeError);
  EXPECT_THROW(reconstruction_loss(random_patches(31, 48, 1), random_patches(31, 48, 2), plan), ShapeError);
}

TEST(MaskedReconstruction, BlindToMaskedPixels) {
  IvclModel model(tiny_config());
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Clip> clips{{}, {}};
    for (auto& c : clips)
      for (int t = 0; t < 4; ++t) c.push_back(random_patches(16, 48, rng()));
    std::vector<MaskPlan> plans{make_mask_plan(4, 1, 16, 0.375, rng), make_mask_plan(4, 2, 16, 0.375, rng)};
    NoGradGuard no_grad;
    Tensor a = masked_reconstruction(model, clips, plans, true).predicted;
    for (std::size_t b = 0; b < 2; ++b)
      for (auto t : plans[b].query_frames()) {
        auto& frame = clips[b][static_cast<std::size_t>(t)];
        frame = frame.clone();
        auto data = frame.mutable_data<float>();
        for (auto id : plans[b].masked[static_cast<std::size_t>(t)])
          for (int c = 0; c < 48; ++c) data[static_cast<std::size_t>(id * 48 + c)] = static_cast<float>(rng() % 1000) / 999.0f;
      }
    Tensor b = masked_reconstruction(model, clips, plans, true).predicted;
    EXPECT_TRUE(a.bit_equal(b));
  }
}

TEST(MaskedReconstruction, TemporalTokenCounts) {
  IvclModel model(tiny_config());
  Rng rng(14);
  std::vector<Clip> clips{{}};
  for (int t = 0; t < 5; ++t) clips[0].push_back(random_patches(16, 48, 20 + t));
  std::vector<MaskPlan> video{make_mask_plan(5, 0, 16, 0.375, rng)};
  NoGradGuard no_grad;
  EXPECT_EQ(masked_reconstruction(model, clips, video, false).temporal_tokens, 5 * 10);
  std::vector<MaskPlan> ivcl{make_mask_plan(5, 2, 16, 0.375, rng)};
  auto out = masked_reconstruction(model, clips, ivcl, true);
  EXPECT_EQ(out.temporal_tokens, 2 * 2 + 3 * 10);
  EXPECT_EQ(out.predicted.shape(), (Shape{3 * 16, 48}));
  EXPECT_THROW(masked_reconstruction(model, clips, ivcl, false), ContractViolation);
}

TEST(MaskedReconstruction, BatchedEqualsSeparate) {
  IvclModel model(tiny_config());
  Rng rng(15);
  std::vector<Clip> clips{{}, {}};
  for (auto& c : clips)
    for (int t = 0; t < 3; ++t) c.push_back(random_patches(16, 48, rng()));
  std::vector<MaskPlan> plans{make_mask_plan(3, 1, 16, 0.375, rng), make_mask_plan(3, 1, 16, 0.375, rng)};
  NoGradGuard no_grad;
  Tensor joint = masked_reconstruction(model, clips, plans, true).predicted;
  for (std::size_t b = 0; b < 2; ++b) {
    Tensor alone = masked_reconstruction(model, std::span(&clips[b], 1), std::span(&plans[b], 1), true).predicted;
    for (std::int64_t i = 0; i < alone.numel(); ++i)
      ASSERT_NEAR(joint.value(static_cast<std::int64_t>(b) * alone.numel() + i), alone.value(i), 1e-5);
  }
}

TEST(PretrainStep, FinitePositiveLossAndSlotGradient) {
  IvclModel model(tiny_config());
  auto clips = fixed_clips(shell_videos(2, 4), 4);
  Rng rng(16);
  std::vector<MaskPlan> plans{make_mask_plan(4, 2, 16, 0.375, rng), make_mask_plan(4, 1, 16, 0.375, rng)};
  {
    GradTape tape;
    Tensor loss = masked_reconstruction(model, clips, plans, true).loss;
    EXPECT_TRUE(std::isfinite(loss.item()));
    EXPECT_GT(loss.item(), 0.0);
    tape.backward(loss);
    double norm = 0.0;
    for (double g : tape.grad(model.encoder().slot_table()).to_f64()) norm += g * g;
    EXPECT_GT(norm, 0.0);
  }
  Optimizer opt({OptimizerKind::Adam, 1e-3});
  PretrainConfig cfg;
  const Tensor before = model.encoder().slot_table().clone();
  EXPECT_GT(pretrain_step(model, opt, clips, plans, cfg), 0.0);
  EXPECT_FALSE(model.encoder().slot_table().bit_equal(before));
}

TEST(PretrainStep, ImageMaeIsSingleFrameIvcl) {
  IvclModel a(tiny_config()), b(tiny_config());
  auto clips = fixed_clips(shell_videos(3, 1), 1);
  Rng rng(17);
  std::vector<MaskPlan> plans;
  std::vector<Tensor> frames;
  for (auto& c : clips) {
    plans.push_back(make_mask_plan(1, 0, 16, 0.375, rng));
    frames.push_back(c[0]);
  }
  Optimizer oa({OptimizerKind::Adam, 1e-3}), ob({OptimizerKind::Adam, 1e-3});
  PretrainConfig cfg;
  for (int step = 0; step < 3; ++step) {
    const double la = image_mae_step(a, oa, frames, plans, cfg);
    const double lb = pretrain_step(b, ob, clips, plans, cfg);
    EXPECT_EQ(la, lb);
  }
  auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(pa[i].second->bit_equal(*pb[i].second)) << pa[i].first;
}

TEST(PretrainStep, NanLossAborts) {
  IvclModel model(tiny_config());
  auto params = model.parameters();
  for (auto& [name, t] : params)
    if (name == "decoder.head.weight") t->mutable_data<float>()[0] = std::nanf("");
  auto clips = fixed_clips(shell_videos(1, 2), 2);
  Rng rng(18);
  std::vector<MaskPlan> plans{make_mask_plan(2, 1, 16, 0.375, rng)};
  Optimizer opt({OptimizerKind::Adam, 1e-3});
  try {
    pretrain_step(model, opt, clips, plans, PretrainConfig{});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
  }
}

namespace {

// Full-batch training on a fixed 16-clip set with fixed plans.
std::vector<double> overfit(Objective objective, int steps) {
  ModelConfig mc = tiny_config();
  mc.hidden_dim = 32;
  mc.mlp_dim = 64;
  IvclModel model(mc);
  const std::int64_t frames = objective == Objective::ImageMae ? 1 : 4;
  const std::int64_t context = objective == Objective::Ivcl ? 1 : 0;
  auto clips = fixed_clips(shell_videos(16, 4), frames);
  Rng rng(19);
  std::vector<MaskPlan> plans;
  for (std::size_t i = 0; i < clips.size(); ++i) plans.push_back(make_mask_plan(frames, context, 16, 0.375, rng));
  Optimizer opt({OptimizerKind::Adam, 3e-3});
  PretrainConfig cfg;
  std::vector<double> losses;
  std::vector<Tensor> singles;
  for (auto& c : clips) singles.push_back(c[0]);
  for (int s = 0; s < steps; ++s) {
    switch (objective) {
      case Objective::Ivcl:
        losses.push_back(pretrain_step(model, opt, clips, plans, cfg));
        break;
      case Objective::ImageMae:
        losses.push_back(image_mae_step(model, opt, singles, plans, cfg));
        break;
      case Objective::VideoMae:
        losses.push_back(video_mae_step(model, opt, clips, plans, cfg));
        break;
    }
  }
  return losses;
}

class Overfit : public ::testing::TestWithParam<Objective> {};

}  // namespace

TEST_P(Overfit, LossFallsBelowQuarter) {
  const auto losses = overfit(GetParam(), 200);
  EXPECT_LT(losses.back(), 0.25 * losses.front()) << losses.front() << " -> " << losses.back();
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 10; ++i) {
    head += losses[static_cast<std::size_t>(i)];
    tail += losses[losses.size() - 1 - static_cast<std::size_t>(i)];
  }
  EXPECT_LT(tail, head);
}

INSTANTIATE_TEST_SUITE_P(Objectives, Overfit,
                         ::testing::Values(Objective::Ivcl, Objective::ImageMae, Objective::VideoMae),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(Pretrain, SameSeedSameLossLog) {
  auto videos = shell_videos(6, 6);
  PretrainConfig cfg;
  cfg.total_frames = 4;
  cfg.context_frames = 1;
  cfg.batch_size = 3;
  cfg.steps = 4;
  cfg.seed = 21;
  std::ostringstream log_a, log_b;
  IvclModel a(tiny_config()), b(tiny_config());
  auto ra = pretrain(a, videos, cfg, Objective::Ivcl, &log_a);
  auto rb = pretrain(b, videos, cfg, Objective::Ivcl, &log_b);
  EXPECT_EQ(log_a.str(), log_b.str());
  ASSERT_EQ(ra.losses.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(ra.losses[i], rb.losses[i]);
  EXPECT_EQ(log_a.str().rfind("step 1 loss ", 0), 0u);
}

TEST(Pretrain, GumbelPoolingTrains) {
  ModelConfig mc = tiny_config();
  mc.pool_method = PoolMethod::GumbelMax;
  IvclModel model(mc);
  PretrainConfig cfg;
  cfg.total_frames = 3;
  cfg.context_frames = 1;
  cfg.batch_size = 2;
  cfg.steps = 2;
  auto r = pretrain(model, shell_videos(2, 4), cfg);
  for (double l : r.losses) EXPECT_TRUE(std::isfinite(l));
}

TEST(Pretrain, ShortVideoIsDataError) {
  IvclModel model(tiny_config());
  PretrainConfig cfg;
  cfg.total_frames = 8;
  cfg.context_frames = 1;
  cfg.steps = 1;
  EXPECT_THROW(pretrain(model, shell_videos(1, 4), cfg), DataError);
  cfg.context_frames = 8;
  EXPECT_THROW(pretrain(model, shell_videos(1, 8), cfg), ConfigError);
}

TEST(Ablation, GridShapeAndCsv) {
  const std::vector<double> ratios{0.125, 0.375, 0.5, 0.875};
  const std::vector<std::int64_t> contexts{0, 2, 4, 8}, frames{4, 8, 16, 32}, slots{1, 2, 4, 8};
  auto grid = ablation_grid({0.375, 2, 16, 1}, ratios, contexts, frames, slots);
  ASSERT_EQ(grid.size(), 16u);
  EXPECT_EQ(grid[4].context, 0);
  EXPECT_EQ(grid[8].frames, 4);
  EXPECT_EQ(grid[15].slots, 8);
  std::ostringstream csv;
  auto rows = run_ablation(grid, [](const AblationPoint& p) { return p.mask_ratio; }, &csv);
  EXPECT_EQ(rows.size(), 16u);
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "mask_ratio,context,frames,slots,metric");
  int n = 0;
  while (std::getline(in, line)) ++n;
  EXPECT_EQ(n, 16);
  EXPECT_THROW(ablation_grid({0.375, 8, 16, 1}, ratios, std::vector<std::int64_t>{16}, frames, slots), ConfigError);
}

TEST(Objective, Names) {
  for (auto o : {Objective::Ivcl, Objective::ImageMae, Objective::VideoMae}) EXPECT_EQ(parse_objective(to_string(o)), o);
  EXPECT_THROW(parse_objective("mae"), ConfigError);
}
