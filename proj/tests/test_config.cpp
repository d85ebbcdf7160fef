#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ivcl/checkpoint.hpp"
#include "ivcl/config.hpp"

using namespace ivcl;

namespace {

std::string config_error(const std::string& text) {
  try {
    parse_config_text(text, "run.cfg");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.encoder_layers = 2;
  c.hidden_dim = 8;
  c.encoder_heads = 2;
  c.mlp_dim = 16;
  c.pool_layer = 1;
  c.temporal_layers = 1;
  c.temporal_heads = 2;
  c.decoder_layers = 1;
  c.decoder_heads = 2;
  c.max_frames = 8;
  c.init_seed = 4;
  return c;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("ivcl_test_config_" + name);
}

}  // namespace

TEST(Config, EmptyTextGivesDefaults) {
  const RunConfig cfg = parse_config_text("");
  const RunConfig def;
  EXPECT_EQ(cfg.model.hidden_dim, def.model.hidden_dim);
  EXPECT_EQ(cfg.pretrain.mask_ratio, def.pretrain.mask_ratio);
  EXPECT_EQ(cfg.transfer.task, Task::ShellGame);
  EXPECT_EQ(cfg.transfer.num_classes, 16);
  EXPECT_EQ(cfg.data_dir, "data");
}

TEST(Config, CommentsAndBlankLinesAreIgnored) {
  const RunConfig cfg = parse_config_text("# header\n\nhidden_dim = 64   # inline\n  mask_ratio=0.5\n");
  EXPECT_EQ(cfg.model.hidden_dim, 64);
  EXPECT_EQ(cfg.pretrain.mask_ratio, 0.5);
}

TEST(Config, OutOfRangeMaskRatioNamesLine) {
  const auto msg = config_error("seed = 3\nmask_ratio = 1.5\n");
  EXPECT_NE(msg.find("run.cfg:2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("mask_ratio"), std::string::npos) << msg;
  EXPECT_NE(msg.find("1.5"), std::string::npos) << msg;
}

TEST(Config, UnknownKeyAndMalformedValuesAreRejected) {
  EXPECT_NE(config_error("hiden_dim = 3\n").find("unknown key 'hiden_dim'"), std::string::npos);
  EXPECT_NE(config_error("hidden_dim = 12.5\n").find("run.cfg:1"), std::string::npos);
  EXPECT_NE(config_error("pool_method = mean\n").find("run.cfg:1"), std::string::npos);
  EXPECT_NE(config_error("linear_probe = maybe\n").find("run.cfg:1"), std::string::npos);
  EXPECT_FALSE(config_error("hidden_dim\n").empty());
  EXPECT_FALSE(config_error("context_frames = 40\ntotal_frames = 32\n").empty());
}

TEST(Config, ErrorKindIsConfig) {
  try {
    parse_config_text("encoder_heads = 0\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.kind()), "config");
  }
}

TEST(Config, SerializeRoundTripsEveryKey) {
  RunConfig cfg;
  set_config_value(cfg, "mask_ratio", "0.1");
  set_config_value(cfg, "task", "blicket");
  set_config_value(cfg, "question_mix", "1,0,2,0.5");
  set_config_value(cfg, "ablate_slots", "2,4");
  set_config_value(cfg, "pretrain_lr", "0.00030000000000000003");
  set_config_value(cfg, "seed", "17");
  set_config_value(cfg, "out_dir", "runs/a b");
  const auto text = serialize_config(cfg);
  const RunConfig back = parse_config_text(text);
  EXPECT_EQ(serialize_config(back), text);
  for (const auto& key : config_keys()) EXPECT_EQ(get_config_value(back, key), get_config_value(cfg, key)) << key;
  EXPECT_EQ(back.transfer.num_classes, 3);
  EXPECT_EQ(back.pretrain.lr, 0.00030000000000000003);
}

TEST(Config, MissingFileIsIoError) {
  try {
    parse_config("/nonexistent/ivcl.cfg");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.kind()), "io");
  }
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  IvclModel model(tiny_model(), true);
  Optimizer opt({});
  auto params = model.parameters();
  std::vector<Tensor> grads;
  for (const auto& [name, t] : params) grads.push_back(Tensor::full(t->shape(), 0.25, t->dtype()));
  opt.step(params, grads);
  const auto a = serialize_checkpoint(make_checkpoint("hidden_dim = 8\n", params, &opt));
  const auto path = temp_file("round.ckpt").string();
  save_checkpoint(path, parse_checkpoint(a));
  const auto reloaded = load_checkpoint(path);
  EXPECT_EQ(serialize_checkpoint(reloaded), a);
  ASSERT_TRUE(reloaded.optimizer);
  EXPECT_EQ(reloaded.optimizer->steps, 1);
}

TEST(Checkpoint, LoadedParametersAreBitEqual) {
  IvclModel src(tiny_model(), true);
  auto cfg = tiny_model();
  cfg.init_seed = 11;
  IvclModel dst(cfg, true);
  const auto report = load_parameters(make_checkpoint("", src.parameters()), dst.parameters());
  EXPECT_TRUE(report.dropped.empty());
  EXPECT_TRUE(report.initialized.empty());
  const auto ps = src.parameters(), pd = dst.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) EXPECT_TRUE(ps[i].second->bit_equal(*pd[i].second)) << ps[i].first;
}

TEST(Checkpoint, EveryCorruptedByteIsDetected) {
  IvclModel model(tiny_model(), false);
  const auto good = serialize_checkpoint(make_checkpoint("x", model.parameters()));
  for (std::size_t i = 0; i < good.size(); i += 7) {
    auto bad = good;
    bad[i] ^= 0x10;
    EXPECT_THROW(parse_checkpoint(bad), DataError) << "byte " << i;
  }
  auto bad = good;
  bad[good.size() / 2] ^= 1;
  try {
    parse_checkpoint(bad);
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("checksum mismatch"), std::string::npos);
  }
}

TEST(Checkpoint, VersionTruncationAndTrailingBytes) {
  IvclModel model(tiny_model(), false);
  auto bytes = serialize_checkpoint(make_checkpoint("x", model.parameters()));
  auto wrong_version = bytes;
  wrong_version[4] = 2;
  try {
    parse_checkpoint(wrong_version);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("unsupported version 2"), std::string::npos);
  }
  EXPECT_THROW(parse_checkpoint({bytes.begin(), bytes.begin() + 20}), DataError);
  EXPECT_THROW(parse_checkpoint({}), DataError);
  auto wrong_magic = bytes;
  wrong_magic[0] = 'X';
  EXPECT_THROW(parse_checkpoint(wrong_magic), DataError);
}

TEST(Checkpoint, ShapeMismatchNamesTheTensor) {
  IvclModel a(tiny_model(), false);
  auto cfg = tiny_model();
  cfg.mlp_dim = 24;
  IvclModel b(cfg, false);
  try {
    load_parameters(make_checkpoint("", a.parameters()), b.parameters(), true);
    FAIL();
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("encoder.layer0.fc1.weight"), std::string::npos) << msg;
  }
}

TEST(Checkpoint, TransferLoadDropsExactlyTheDecoder) {
  IvclModel pretrained(tiny_model(), true);
  const auto ckpt = make_checkpoint("", pretrained.parameters());
  IvclModel model(tiny_model(), false);
  Rng rng(1);
  TaskHead head(8, 16, rng);
  auto refs = model.parameters();
  head.collect("head", refs);
  EXPECT_THROW(load_parameters(ckpt, refs, false), DataError);
  const auto report = load_parameters(ckpt, refs, true);
  std::size_t decoder = 0;
  for (const auto& [name, t] : pretrained.parameters()) decoder += name.rfind("decoder.", 0) == 0;
  EXPECT_EQ(report.dropped.size(), decoder);
  for (const auto& name : report.dropped) EXPECT_EQ(name.rfind("decoder.", 0), 0u) << name;
  EXPECT_EQ(report.initialized, (std::vector<std::string>{"head.weight", "head.bias"}));
  EXPECT_EQ(report.loaded.size(), model.parameters().size());
}

TEST(Config, ShippedConfigsParse) {
  std::size_t seen = 0;
  for (const auto& entry : std::filesystem::directory_iterator(IVCL_CONFIG_DIR)) {
    if (entry.path().extension() != ".cfg") continue;
    EXPECT_NO_THROW(parse_config(entry.path().string())) << entry.path();
    ++seen;
  }
  EXPECT_GE(seen, 3u);
}
