#include <gtest/gtest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "ivcl/analysis.hpp"

using namespace ivcl;

namespace {

Tensor random_stochastic(std::int64_t n, std::mt19937_64& rng) {
  std::gamma_distribution<double> g(0.7, 1.0);
  std::vector<double> v(static_cast<std::size_t>(n * n));
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < n; ++j) s += v[static_cast<std::size_t>(i * n + j)] = g(rng) + 1e-12;
    for (std::int64_t j = 0; j < n; ++j) v[static_cast<std::size_t>(i * n + j)] /= s;
  }
  return Tensor({n, n}, v);
}

using Dense = std::vector<std::vector<double>>;

// naive oracle: Â = 0.5 A + 0.5 I, row-normalized; rollout = Â_L ... Â_1
Dense oracle_rollout(const std::vector<Tensor>& layers) {
  const auto n = static_cast<std::size_t>(layers[0].dim(0));
  Dense acc(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) acc[i][i] = 1.0;
  for (const auto& a : layers) {
    Dense hat(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        hat[i][j] = 0.5 * a.value(static_cast<std::int64_t>(i * n + j)) + (i == j ? 0.5 : 0.0);
        s += hat[i][j];
      }
      for (auto& v : hat[i]) v /= s;
    }
    Dense next(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < n; ++k) next[i][j] += hat[i][k] * acc[k][j];
    acc = next;
  }
  return acc;
}

Tensor identity(std::int64_t n) {
  std::vector<double> v(static_cast<std::size_t>(n * n), 0.0);
  for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i * n + i)] = 1.0;
  return Tensor({n, n}, v);
}

Tensor uniform(std::int64_t n) { return Tensor::full({n, n}, 1.0 / static_cast<double>(n), DType::F64); }

Image test_frame(std::int64_t h, std::int64_t w) {
  Image img{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w * 3))};
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>((i * 37) % 256);
  return img;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("ivcl_analysis_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST(Rollout, MatchesNaiveProductOracle) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto layers_n = 2 + static_cast<int>(rng() % 5);
    const auto n = 4 + static_cast<std::int64_t>(rng() % 13);
    std::vector<Tensor> layers;
    for (int l = 0; l < layers_n; ++l) layers.push_back(random_stochastic(n, rng));
    const Tensor got = attention_rollout(layers);
    const auto want = oracle_rollout(layers);
    for (std::int64_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::int64_t j = 0; j < n; ++j) {
        ASSERT_NEAR(got.value(i * n + j), want[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)], 1e-6);
        row += got.value(i * n + j);
      }
      ASSERT_NEAR(row, 1.0, 1e-6);
    }
  }
}

TEST(Rollout, IdentityStacks) {
  for (int k = 1; k <= 6; ++k) {
    std::vector<Tensor> layers(static_cast<std::size_t>(k), identity(7));
    EXPECT_TRUE(attention_rollout(layers).bit_equal(identity(7))) << k;
  }
}

TEST(Rollout, IntermediateLayersStayStochastic) {
  std::mt19937_64 rng(2);
  std::vector<Tensor> layers;
  for (int l = 0; l < 6; ++l) {
    layers.push_back(random_stochastic(9, rng));
    const Tensor r = attention_rollout(layers);
    for (std::int64_t i = 0; i < 9; ++i) {
      double row = 0.0;
      for (std::int64_t j = 0; j < 9; ++j) {
        EXPECT_GE(r.value(i * 9 + j), 0.0);
        row += r.value(i * 9 + j);
      }
      EXPECT_NEAR(row, 1.0, 1e-12);
    }
  }
}

TEST(Rollout, RejectsBadInput) {
  EXPECT_THROW(attention_rollout(std::vector<Tensor>{}), ContractViolation);
  EXPECT_THROW(attention_rollout(std::vector<Tensor>{Tensor::full({3, 3}, 0.5, DType::F64)}), ContractViolation);
  EXPECT_THROW(attention_rollout(std::vector<Tensor>{identity(3), identity(4)}), ContractViolation);
  EXPECT_THROW(attention_rollout(std::vector<Tensor>{Tensor::full({2, 3}, 0.5, DType::F64)}), ContractViolation);
  Tensor neg({2, 2}, std::vector<double>{1.5, -0.5, 0.0, 1.0});
  EXPECT_THROW(attention_rollout(std::vector<Tensor>{neg}), ContractViolation);
}

TEST(HeadAverage, MeanOverHeads) {
  Tensor a({2, 2, 2}, std::vector<double>{1, 0, 0, 1, 0, 1, 1, 0});
  const Tensor m = head_average(a);
  for (std::int64_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(m.value(i), 0.5);
  EXPECT_THROW(head_average(Tensor::zeros({2, 2, 3})), ShapeError);
}

TEST(SlotHeatmap, SumsToOneOnTheGrid) {
  std::mt19937_64 rng(3);
  const Tensor r = attention_rollout(std::vector<Tensor>{random_stochastic(5, rng), random_stochastic(5, rng)});
  const auto map = slot_heatmap(r, 0, 1, 2, 2);
  EXPECT_EQ(map.rows, 2);
  EXPECT_EQ(map.cols, 2);
  double s = 0.0;
  for (double w : map.weights) {
    EXPECT_GE(w, 0.0);
    s += w;
  }
  EXPECT_NEAR(s, 1.0, 1e-12);
  EXPECT_THROW(slot_heatmap(r, 1, 1, 2, 2), IndexError);
  EXPECT_THROW(slot_heatmap(r, 0, 2, 2, 2), ShapeError);
}

TEST(SlotHeatmap, UniformAttentionGivesUniformMap) {
  const std::int64_t slots = 2, n = slots + 16;
  const Tensor r = attention_rollout(std::vector<Tensor>{uniform(n), uniform(n), uniform(n)});
  for (std::int64_t s = 0; s < slots; ++s) {
    const auto map = slot_heatmap(r, s, slots, 4, 4);
    for (double w : map.weights) EXPECT_NEAR(w, 1.0 / 16.0, 1e-12);
  }
  // a slot that never attends to patches falls back to the uniform map
  const auto map = slot_heatmap(attention_rollout(std::vector<Tensor>{identity(n)}), 0, slots, 4, 4);
  for (double w : map.weights) EXPECT_DOUBLE_EQ(w, 1.0 / 16.0);
}

TEST(ExportHeatmap, HeaderAndReadBack) {
  const Image frame = test_frame(8, 12);
  RolloutMap map{2, 3, {0.1, 0.2, 0.3, 0.0, 0.25, 0.15}};
  const auto path = temp_path("map.ppm");
  export_heatmap(map, frame, path, 0.6);
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string header = "P6\n12 8\n255\n";
  ASSERT_EQ(bytes.substr(0, header.size()), header);
  ASSERT_EQ(bytes.size(), header.size() + 8 * 12 * 3);
  // independent blend: heat = 0.6 · w / max(w), red tint over luma
  for (std::int64_t y = 0; y < 8; ++y)
    for (std::int64_t x = 0; x < 12; ++x) {
      const double lum = 0.299 * frame.at(y, x, 0) + 0.587 * frame.at(y, x, 1) + 0.114 * frame.at(y, x, 2);
      const double h = 0.6 * map.at(y / 4, x / 4) / 0.3;
      const std::array<double, 3> want{(1 - h) * lum + h * 255.0, (1 - h) * lum, (1 - h) * lum};
      for (int c = 0; c < 3; ++c) {
        const auto got = static_cast<unsigned char>(bytes[header.size() + static_cast<std::size_t>((y * 12 + x) * 3 + c)]);
        ASSERT_EQ(got, static_cast<unsigned char>(std::lround(want[static_cast<std::size_t>(c)]))) << y << "," << x;
      }
    }
  const Image back = read_ppm(path);
  EXPECT_EQ(back.rgb, blend_heatmap(map, frame, 0.6).rgb);
  std::filesystem::remove(path);
}

TEST(ExportHeatmap, ZeroMapIsGrayscale) {
  const Image frame = test_frame(4, 4);
  RolloutMap map{2, 2, {0, 0, 0, 0}};
  const Image out = blend_heatmap(map, frame);
  for (std::int64_t y = 0; y < 4; ++y)
    for (std::int64_t x = 0; x < 4; ++x) {
      EXPECT_EQ(out.at(y, x, 0), out.at(y, x, 1));
      EXPECT_EQ(out.at(y, x, 1), out.at(y, x, 2));
    }
}

TEST(ExportHeatmap, UnwritablePath) {
  RolloutMap map{1, 1, {1.0}};
  EXPECT_THROW(export_heatmap(map, test_frame(2, 2), "/nonexistent_dir/x.ppm"), IoError);
  EXPECT_THROW(read_ppm("/nonexistent_dir/x.ppm"), IoError);
}

TEST(RegionMass, UniformIsOneAndConcentratedIsHigh) {
  RolloutMap flat{4, 4, std::vector<double>(16, 1.0 / 16.0)};
  EXPECT_NEAR(region_mass_ratio(flat, {0, 16, 0, 16}, 64, 64), 1.0, 1e-12);
  EXPECT_NEAR(region_mass_ratio(flat, {5, 30, 7, 60}, 64, 64), 1.0, 1e-12);
  RolloutMap peak{4, 4, std::vector<double>(16, 0.0)};
  peak.weights[5] = 1.0;
  EXPECT_NEAR(region_mass_ratio(peak, {16, 32, 16, 32}, 64, 64), 16.0, 1e-12);
  EXPECT_NEAR(region_mass_ratio(peak, {0, 16, 0, 16}, 64, 64), 0.0, 1e-12);
}

TEST(SnitchVisibility, AgreesWithRenderedGold) {
  ShellGameConfig cfg;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto ep = gen_shell_game(seed, cfg);
    const auto vis = snitch_visibility(ep);
    ASSERT_EQ(vis.size(), ep.frames.size());
    for (std::size_t t = 0; t < vis.size(); ++t) {
      bool gold = false;
      for (const auto& o : ep.scenes[t].objects) gold = gold || (o.color == std::array<std::uint8_t, 3>{255, 200, 0});
      ASSERT_EQ(gold, vis[t].has_value()) << seed << " frame " << t;
    }
  }
}

TEST(EncoderRollout, ShapesAndAlignmentReport) {
  ModelConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.encoder_layers = 3;
  c.hidden_dim = 16;
  c.encoder_heads = 2;
  c.mlp_dim = 32;
  c.num_slots = 2;
  c.pool_layer = 1;
  c.temporal_layers = 1;
  c.temporal_heads = 2;
  c.decoder_layers = 1;
  c.decoder_heads = 2;
  IvclModel model(c, false);
  ShellGameConfig cfg;
  cfg.image_size = 32;
  cfg.num_frames = 4;
  const auto ep = gen_shell_game(5, cfg);
  const Tensor r = encoder_rollout(model, ep.frames[0]);
  EXPECT_EQ(r.shape(), (Shape{2 + 16, 2 + 16}));
  const auto report = snitch_alignment(model, std::span(&ep, 1));
  std::int64_t visible = 0;
  for (const auto& v : snitch_visibility(ep)) visible += v.has_value();
  EXPECT_EQ(report.frames, visible);
  EXPECT_GT(report.mean_ratio, 0.0);
}
