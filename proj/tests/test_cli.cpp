#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "ivcl/checkpoint.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

const std::vector<std::string> kTiny{
    "--image_size", "16", "--patch_size", "4", "--encoder_layers", "2", "--hidden_dim", "16", "--encoder_heads", "2",
    "--mlp_dim", "32", "--pool_layer", "1", "--temporal_layers", "1", "--temporal_heads", "2", "--decoder_layers", "1",
    "--decoder_heads", "2", "--num_frames", "8", "--total_frames", "8", "--context_frames", "2", "--train_episodes", "12",
    "--val_episodes", "6", "--test_episodes", "32", "--pretrain_steps", "3", "--pretrain_batch_size", "2",
    "--finetune_steps", "3", "--finetune_batch_size", "4", "--frames_per_example", "4", "--ablate_pretrain_steps", "1",
    "--ablate_finetune_steps", "1", "--ablate_episodes", "4"};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("ivcl_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  Outcome run(std::vector<std::string> args, const std::string& out_dir = "out") {
    // Per-test flags come last so they override the shared tiny setup.
    std::vector<std::string> full{"ivcl"};
    if (!args.empty()) {
      full.push_back(args.front());
      full.insert(full.end(), kTiny.begin(), kTiny.end());
      full.insert(full.end(), {"--data_dir", (dir_ / "data").string(), "--out_dir", (dir_ / out_dir).string()});
      full.insert(full.end(), args.begin() + 1, args.end());
    }
    args = full;
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = ivcl::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
  }

  std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, GenDataWritesThreeSplits) {
  const auto r = run({"gen-data"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* split : {"train", "val", "test"}) EXPECT_TRUE(fs::exists(dir_ / "data" / (std::string("shell_game_") + split + ".ivtw")));
  const auto b = run({"gen-data", "--task", "blicket", "--blicket_split", "comp_train"});
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_TRUE(fs::exists(dir_ / "data" / "blicket_test.ivtw"));
}

TEST_F(Cli, PretrainIsDeterministicAndFinetuneDropsDecoder) {
  ASSERT_EQ(run({"gen-data"}).code, 0);
  const auto a = run({"pretrain"}, "a");
  ASSERT_EQ(a.code, 0) << a.err;
  const auto csv = slurp(dir_ / "a" / "pretrain_loss.csv"), ckpt = slurp(dir_ / "a" / "pretrain.ckpt");
  EXPECT_EQ(csv.rfind("step,loss\n1,", 0), 0u);
  const auto b = run({"pretrain"}, "a");
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(csv, slurp(dir_ / "a" / "pretrain_loss.csv"));
  EXPECT_TRUE(ckpt == slurp(dir_ / "a" / "pretrain.ckpt"));

  const auto f = run({"finetune", "--checkpoint", (dir_ / "a" / "pretrain.ckpt").string()}, "ft");
  ASSERT_EQ(f.code, 0) << f.err;
  EXPECT_NE(f.out.find("initialized 2: head.weight head.bias"), std::string::npos) << f.out;
  EXPECT_NE(f.out.find("dropped 21: decoder.mask_token"), std::string::npos) << f.out;
  const auto ck = ivcl::load_checkpoint((dir_ / "ft" / "finetune.ckpt").string());
  for (const auto& [name, t] : ck.tensors) EXPECT_NE(name.rfind("decoder.", 0), 0u) << name;

  const auto e = run({"eval", "--checkpoint", (dir_ / "ft" / "finetune.ckpt").string()}, "ev");
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_NE(e.out.find("initialized 0"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir_ / "ev" / "eval.csv"));
}

TEST_F(Cli, UntrainedEvalIsNearChance) {
  ASSERT_EQ(run({"gen-data", "--test_episodes", "400"}).code, 0);
  const auto r = run({"eval", "--test_episodes", "400"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(slurp(dir_ / "out" / "eval.csv"));
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  std::istringstream fields(row);
  std::string split, loss, top1, count;
  std::getline(fields, split, ',');
  std::getline(fields, loss, ',');
  std::getline(fields, top1, ',');
  std::getline(fields, count, ',');
  EXPECT_EQ(count, "400");
  // 16 classes; binomial sd at n = 400 is about 0.012, a constant predictor can reach the majority rate
  EXPECT_LT(std::stod(top1), 0.2);
}

TEST_F(Cli, AblateOverMaskRatiosWritesFourRows) {
  const auto r = run({"ablate", "--ablate_axes", "mask_ratio"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(slurp(dir_ / "out" / "ablation.csv"));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[0], "mask_ratio,context,frames,slots,metric");
  EXPECT_EQ(lines[1].rfind("0.125,2,8,1,", 0), 0u);
  EXPECT_EQ(lines[4].rfind("0.875,2,8,1,", 0), 0u);
}

TEST_F(Cli, VisualizeWritesOneHeatmapPerFrameAndSlot) {
  const auto r = run({"visualize", "--num_slots", "2", "--visualize_frames", "0,3", "--visualize_slots", "0,1"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* name : {"heatmap_f0_s0.ppm", "heatmap_f0_s1.ppm", "heatmap_f3_s0.ppm", "heatmap_f3_s1.ppm"})
    EXPECT_EQ(slurp(dir_ / "out" / name).rfind("P6\n16 16\n255\n", 0), 0u) << name;
  EXPECT_NE(r.out.find("snitch_alignment"), std::string::npos);
}

TEST_F(Cli, ErrorsAreOneLineWithKind) {
  auto r = run({"pretrain", "--mask_ratio", "1.5"});
  EXPECT_NE(r.code, 0);
  EXPECT_EQ(r.err.rfind("error config: ", 0), 0u) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);

  r = run({"pretrain"});
  EXPECT_NE(r.code, 0);
  EXPECT_EQ(r.err.rfind("error io: ", 0), 0u) << r.err;

  r = run({"eval", "--checkpoint", (dir_ / "missing.ckpt").string()});
  EXPECT_EQ(r.err.rfind("error io: ", 0), 0u) << r.err;

  std::ofstream(dir_ / "junk.ckpt") << "IVCK garbage garbage";
  r = run({"eval", "--checkpoint", (dir_ / "junk.ckpt").string()});
  EXPECT_EQ(r.err.rfind("error data: ", 0), 0u) << r.err;

  r = run({"pretrain", "--hidden_dim", "abc"});
  EXPECT_EQ(r.err.rfind("error config: --hidden_dim", 0), 0u) << r.err;

  std::ofstream(dir_ / "bad.cfg") << "seed = 1\nunknown_thing = 2\n";
  r = run({"pretrain", "--config", (dir_ / "bad.cfg").string()});
  EXPECT_NE(r.err.find("bad.cfg:2"), std::string::npos) << r.err;

  r = run({});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("error usage: ", 0), 0u);
}

TEST_F(Cli, ConfigFileIsOverriddenByFlags) {
  std::ofstream(dir_ / "run.cfg") << "pretrain_steps = 2\nmask_ratio = 0.5\n";
  ASSERT_EQ(run({"gen-data"}).code, 0);
  const auto r = run({"pretrain", "--config", (dir_ / "run.cfg").string(), "--pretrain_steps", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("steps 4 "), std::string::npos) << r.out;
  const auto ck = ivcl::load_checkpoint((dir_ / "out" / "pretrain.ckpt").string());
  EXPECT_NE(ck.config.find("mask_ratio = 0.5\n"), std::string::npos);
}

TEST(CliThreads, ParallelForVisitsEveryIndexOnce) {
  std::vector<std::atomic<int>> hits(1000);
  ivcl::cli::parallel_for(1000, [&](std::int64_t i) { hits[static_cast<std::size_t>(i)]++; });
  for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
  EXPECT_THROW(ivcl::cli::parallel_for(10, [](std::int64_t i) {
                 if (i == 7) throw ivcl::DataError("boom");
               }),
               ivcl::DataError);
}
