#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ivcl/model.hpp"
#include "ivcl/optim.hpp"
#include "ivcl/toyworlds.hpp"

namespace ivcl {

struct PretrainConfig {
  std::int64_t total_frames = 32;
  std::int64_t context_frames = 8;
  double mask_ratio = 0.375;
  std::int64_t epochs = 1000;
  std::int64_t batch_size = 256;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  /// Regress every query patch instead of the masked ones only.
  bool loss_on_all_query_patches = false;
  /// Overrides epochs when positive.
  std::int64_t steps = 0;

  void validate() const;
};

/// Which frames of a clip are context frames and which patches each query
/// frame hides. Context frames have empty masked sets.
struct MaskPlan {
  std::vector<std::int64_t> context;              ///< sorted frame ids
  std::vector<std::vector<std::int64_t>> masked;  ///< per frame, sorted patch ids

  std::int64_t frames() const { return static_cast<std::int64_t>(masked.size()); }
  bool is_context(std::int64_t t) const;
  std::vector<std::int64_t> query_frames() const;
  /// Complement of masked[t] in [0, total_patches).
  std::vector<std::int64_t> visible(std::int64_t t, std::int64_t total_patches) const;
};

/// round(ratio · total_patches); ConfigError when that hides nothing or everything.
std::int64_t mask_count(std::int64_t total_patches, double ratio);

/// T distinct frame ids of a video of `video_length` frames, ascending.
std::vector<std::int64_t> sample_clip(std::int64_t video_length, std::int64_t frames, Rng& rng);

MaskPlan make_mask_plan(std::int64_t frames, std::int64_t context_frames, std::int64_t total_patches,
                        double mask_ratio, Rng& rng);

/// Patch tensors of one clip, one [total_patches × patch_dim] tensor per frame.
using Clip = std::vector<Tensor>;

/// MSE between predicted and target patches of the query frames.
/// `predicted` and `target` stack total_patches rows per query frame, clips in
/// order and query frames ascending within a clip.
Tensor reconstruction_loss(const Tensor& predicted, const Tensor& target, std::span<const MaskPlan> plans,
                           bool all_query_patches = false);
Tensor reconstruction_loss(const Tensor& predicted, const Tensor& target, const MaskPlan& plan,
                           bool all_query_patches = false);

struct ReconstructionOutput {
  Tensor loss;
  Tensor predicted;  ///< query-frame reconstructions, layout as in reconstruction_loss
  Tensor target;
  std::int64_t temporal_tokens = 0;
};

/// Forward pass shared by the three objectives. With slots, context frames
/// contribute their pooled slots and query frames their visible patch tokens;
/// without slots the encoder sees patches only and plans may not hold context
/// frames.
ReconstructionOutput masked_reconstruction(const IvclModel& model, std::span<const Clip> clips,
                                           std::span<const MaskPlan> plans, bool with_slots,
                                           bool all_query_patches = false, Rng* gumbel_rng = nullptr);

/// One optimizer step on the IV-CL objective; returns the loss.
double pretrain_step(IvclModel& model, Optimizer& opt, std::span<const Clip> clips, std::span<const MaskPlan> plans,
                     const PretrainConfig& cfg, Rng* gumbel_rng = nullptr);
/// Single-frame masked autoencoding. Each clip holds one frame and each plan
/// is a one-frame query plan; this is the IV-CL step with T = 1 and C = 0.
double image_mae_step(IvclModel& model, Optimizer& opt, std::span<const Tensor> frames,
                      std::span<const MaskPlan> plans, const PretrainConfig& cfg);
/// Factorized video MAE: per-frame patch encoding without slots, joint
/// temporal attention over every frame's visible patches.
double video_mae_step(IvclModel& model, Optimizer& opt, std::span<const Clip> clips,
                      std::span<const MaskPlan> plans, const PretrainConfig& cfg);

enum class Objective { Ivcl, ImageMae, VideoMae };
const char* to_string(Objective objective);
Objective parse_objective(const std::string& text);

/// Video frames as rendered images.
using Video = std::vector<Image>;

Clip clip_patches(const Video& video, std::span<const std::int64_t> frame_ids, std::int64_t patch, DType dtype);

struct PretrainResult {
  std::vector<double> losses;
};

/// Epochs over `videos` in a seeded order. Each visit samples a fresh clip and
/// mask plan. Writes `step <n> loss <x>` lines to `log` when given.
PretrainResult pretrain(IvclModel& model, std::span<const Video> videos, const PretrainConfig& cfg,
                        Objective objective = Objective::Ivcl, std::ostream* log = nullptr);

/// One point of an ablation sweep.
struct AblationPoint {
  double mask_ratio = 0.375;
  std::int64_t context = 8;
  std::int64_t frames = 32;
  std::int64_t slots = 1;
};

struct AblationRow {
  AblationPoint point;
  double metric = 0.0;
};

/// Three one-dimensional sweeps around `base` (mask ratio, context size,
/// frame count), then a slot sweep. The frame sweep caps the context size
/// at frames - 1.
std::vector<AblationPoint> ablation_grid(const AblationPoint& base, std::span<const double> mask_ratios,
                                         std::span<const std::int64_t> contexts,
                                         std::span<const std::int64_t> frames,
                                         std::span<const std::int64_t> slots);

std::vector<AblationRow> run_ablation(std::span<const AblationPoint> points,
                                      const std::function<double(const AblationPoint&)>& evaluate,
                                      std::ostream* csv = nullptr);
void write_ablation_header(std::ostream& csv);
void write_ablation_row(std::ostream& csv, const AblationRow& row);

}  // namespace ivcl
