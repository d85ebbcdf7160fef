#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ivcl/model.hpp"
#include "ivcl/optim.hpp"
#include "ivcl/pretraining.hpp"
#include "ivcl/toyworlds.hpp"

namespace ivcl {

enum class Task { ShellGame, Blicket };
const char* to_string(Task task);
Task parse_task(const std::string& text);

struct TransferConfig {
  Task task = Task::ShellGame;
  /// Frames fed per example; 0 uses every frame.
  std::int64_t frames_per_example = 0;
  double lr = 5e-5;
  double weight_decay = 0.05;
  std::int64_t epochs = 500;
  std::int64_t batch_size = 512;
  std::int64_t num_classes = 16;
  /// Train the head alone on frozen features.
  bool linear_probe = false;
  std::uint64_t seed = 0;
  /// Overrides epochs when positive; the last epoch may be partial.
  std::int64_t steps = 0;
  /// Evaluate on validation every this many steps (0: once per epoch).
  std::int64_t eval_every = 0;

  void validate() const;
};

/// G² for the shell game, 3 for blicket questions.
std::int64_t task_classes(Task task, std::int64_t grid = 4);

/// A single linear layer from the pooled feature to class logits.
struct TaskHead {
  Linear linear;

  TaskHead() = default;
  TaskHead(std::int64_t dim, std::int64_t classes, Rng& rng);
  Tensor forward(const Tensor& features) const { return linear.forward(features); }
  void collect(const std::string& prefix, ParamRefs& out) { linear.collect(prefix, out); }
};

/// One labelled video; frames are rendered images.
struct LabelledVideo {
  Video frames;
  std::int64_t label = 0;
};

struct StepStats {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Cross-entropy of the head on transfer features, then one optimizer step on
/// the encoder, temporal transformer and head (the head alone when probing).
/// Each example is a list of [total_patches × patch_dim] frames.
StepStats finetune_step(IvclModel& model, TaskHead& head, Optimizer& opt, std::span<const Clip> clips,
                        std::span<const std::int64_t> labels, const TransferConfig& cfg, Rng* gumbel_rng = nullptr);

/// Logits [B × classes] without recording gradients.
Tensor predict(const IvclModel& model, const TaskHead& head, std::span<const Clip> clips);

/// Seven frames, context first and the query last.
Video assemble_blicket_input(const BlicketEpisode& episode);
Video assemble_blicket_input(const Episode& episode);
/// Images as a pseudo-video with sequential time ids; ConfigError beyond max_frames.
Clip assemble_multi_image_input(std::span<const Image> images, const ModelConfig& cfg, DType dtype = default_dtype());

/// `count` frame ids spread evenly over a video of `length` frames.
std::vector<std::int64_t> strided_frames(std::int64_t length, std::int64_t count);

struct EvalResult {
  double loss = 0.0;
  double top1 = 0.0;
  std::int64_t count = 0;
};

/// Accuracy over `videos` with evenly strided frames.
EvalResult evaluate(const IvclModel& model, const TaskHead& head, std::span<const LabelledVideo> videos,
                    const TransferConfig& cfg);

struct FinetuneResult {
  double best_val_top1 = 0.0;
  std::int64_t best_epoch = 0;
  EvalResult test;
};

/// Finetunes, keeps the parameters with the best validation accuracy and
/// reports test accuracy with them. Writes `epoch,split,loss,top1` rows.
FinetuneResult finetune(IvclModel& model, TaskHead& head, std::span<const LabelledVideo> train,
                        std::span<const LabelledVideo> val, std::span<const LabelledVideo> test,
                        const TransferConfig& cfg, std::ostream* csv = nullptr);

/// Encoder and temporal parameters plus the head's, excluding any decoder.
ParamRefs finetune_parameters(IvclModel& model, TaskHead& head);

}  // namespace ivcl
