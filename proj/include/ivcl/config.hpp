#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ivcl/model.hpp"
#include "ivcl/pretraining.hpp"
#include "ivcl/toyworlds.hpp"
#include "ivcl/transfer.hpp"

namespace ivcl {

struct DataConfig {
  ShellGameConfig shell;
  BlicketConfig blicket;
  std::int64_t train_episodes = 1000;
  std::int64_t val_episodes = 300;
  std::int64_t test_episodes = 500;
  std::uint64_t seed = 0;
};

struct AblationConfig {
  /// Subset of mask_ratio, context, frames, slots.
  std::vector<std::string> axes{"mask_ratio", "context", "frames", "slots"};
  std::vector<double> mask_ratios{0.125, 0.375, 0.5, 0.875};
  std::vector<std::int64_t> contexts{0, 4, 8, 16};
  std::vector<std::int64_t> frames{8, 16, 32, 64};
  std::vector<std::int64_t> slots{1, 2, 4, 8};
  std::int64_t pretrain_steps = 20;
  std::int64_t finetune_steps = 20;
  std::int64_t episodes = 64;
};

/// Everything one run needs. Unset keys keep their defaults, which follow the
/// published hyperparameters where there are any.
struct RunConfig {
  ModelConfig model;
  PretrainConfig pretrain;
  Objective objective = Objective::Ivcl;
  TransferConfig transfer;
  DataConfig data;
  AblationConfig ablation;
  std::string data_dir = "data";
  std::string out_dir = "out";
  std::string checkpoint;
  std::vector<std::int64_t> visualize_frames{0};
  std::vector<std::int64_t> visualize_slots{0};
  std::uint64_t seed = 0;

  /// Cross-field checks of every constituent config.
  void validate() const;
};

/// Every key the text format accepts, in serialization order.
std::vector<std::string> config_keys();

/// `key = value` lines, `#` starts a comment. Unknown keys, malformed values
/// and out-of-range values raise ConfigError naming `origin` and the line.
RunConfig parse_config_text(const std::string& text, const std::string& origin = "config");
RunConfig parse_config(const std::string& path);
/// Applies one assignment, e.g. from a command-line override.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& cfg, const std::string& key);
/// All keys, one `key = value` line each; parse_config_text inverts it.
std::string serialize_config(const RunConfig& cfg);

}  // namespace ivcl
