#include "ivcl/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>

#include "ivcl/tape.hpp"

namespace ivcl {

const char* to_string(Task task) { return task == Task::ShellGame ? "shell_game" : "blicket"; }

Task parse_task(const std::string& text) {
  if (text == "shell_game") return Task::ShellGame;
  if (text == "blicket") return Task::Blicket;
  throw ConfigError("unknown task '" + text + "' (expected shell_game or blicket)");
}

std::int64_t task_classes(Task task, std::int64_t grid) { return task == Task::ShellGame ? grid * grid : 3; }

void TransferConfig::validate() const {
  if (frames_per_example < 0) throw ConfigError("transfer: frames_per_example must be nonnegative");
  if (!(lr > 0.0)) throw ConfigError("transfer: lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("transfer: weight_decay must be nonnegative");
  if (batch_size < 1) throw ConfigError("transfer: batch_size must be positive");
  if (epochs < 0 || steps < 0 || eval_every < 0) throw ConfigError("transfer: epochs, steps and eval_every must be nonnegative");
  if (num_classes < 2) throw ConfigError("transfer: need at least two classes");
  if (task == Task::Blicket && num_classes != 3) throw ConfigError("transfer: blicket questions have 3 classes");
}

TaskHead::TaskHead(std::int64_t dim, std::int64_t classes, Rng& rng) : linear(dim, classes, rng) {}

ParamRefs finetune_parameters(IvclModel& model, TaskHead& head) {
  ParamRefs out;
  model.encoder().collect("encoder", out);
  model.temporal().collect("temporal", out);
  head.collect("head", out);
  return out;
}

namespace {

void check_labels(std::span<const std::int64_t> labels, std::int64_t classes) {
  for (auto l : labels)
    if (l < 0 || l >= classes)
      throw DataError("label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
}

double accuracy(const Tensor& logits, std::span<const std::int64_t> labels) {
  const auto pred = argmax_rows(logits);
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::vector<std::vector<Tensor>> as_videos(std::span<const Clip> clips) {
  return {clips.begin(), clips.end()};
}

}  // namespace

StepStats finetune_step(IvclModel& model, TaskHead& head, Optimizer& opt, std::span<const Clip> clips,
                        std::span<const std::int64_t> labels, const TransferConfig& cfg, Rng* gumbel_rng) {
  if (clips.size() != labels.size() || clips.empty()) throw ContractViolation("finetune_step: one label per clip");
  check_labels(labels, head.linear.weight.dim(1));
  const auto videos = as_videos(clips);
  EncodeOptions opts;
  opts.gumbel_rng = gumbel_rng;
  Tensor features;
  if (cfg.linear_probe) {
    NoGradGuard frozen;
    features = encode_videos_for_transfer(model, videos, opts);
  }
  GradTape tape;
  if (!cfg.linear_probe) features = encode_videos_for_transfer(model, videos, opts);
  Tensor logits = head.forward(features);
  Tensor loss = cross_entropy(logits, labels);
  StepStats stats{loss.item(), accuracy(logits, labels)};
  if (!std::isfinite(stats.loss)) throw NumericError("finetune: loss is " + std::to_string(stats.loss) + " at step " +
                                                     std::to_string(opt.steps() + 1));
  tape.backward(loss);
  ParamRefs params;
  if (cfg.linear_probe)
    head.collect("head", params);
  else
    params = finetune_parameters(model, head);
  std::vector<Tensor> grads;
  for (const auto& [name, p] : params) grads.push_back(tape.grad(*p));
  opt.step(params, grads);
  return stats;
}

Tensor predict(const IvclModel& model, const TaskHead& head, std::span<const Clip> clips) {
  NoGradGuard no_grad;
  return head.forward(encode_videos_for_transfer(model, as_videos(clips)));
}

Video assemble_blicket_input(const BlicketEpisode& episode) {
  if (episode.context.size() != 6 || episode.frames.size() != 7)
    throw DataError("blicket input needs 6 context frames and 1 query frame, got " +
                    std::to_string(episode.frames.size()) + " frames");
  return episode.frames;
}

Video assemble_blicket_input(const Episode& episode) {
  if (episode.frames.size() != 7)
    throw DataError("blicket input needs 7 frames, got " + std::to_string(episode.frames.size()));
  return episode.frames;
}

Clip assemble_multi_image_input(std::span<const Image> images, const ModelConfig& cfg, DType dtype) {
  if (images.empty()) throw DataError("multi-image input is empty");
  if (static_cast<std::int64_t>(images.size()) > cfg.max_frames)
    throw ConfigError(std::to_string(images.size()) + " images exceed the temporal table of " +
                      std::to_string(cfg.max_frames));
  Clip out;
  for (const auto& img : images) out.push_back(image_to_patches(img, cfg.patch_size, dtype));
  return out;
}

std::vector<std::int64_t> strided_frames(std::int64_t length, std::int64_t count) {
  if (count < 1 || count > length)
    throw DataError("cannot take " + std::to_string(count) + " frames from " + std::to_string(length));
  std::vector<std::int64_t> out(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) out[static_cast<std::size_t>(i)] = i * length / count;
  return out;
}

namespace {

std::int64_t frames_for(const TransferConfig& cfg, const Video& v) {
  return cfg.frames_per_example > 0 ? cfg.frames_per_example : static_cast<std::int64_t>(v.size());
}

struct Batch {
  std::vector<Clip> clips;
  std::vector<std::int64_t> labels;
};

Batch eval_batch(std::span<const LabelledVideo> videos, std::size_t begin, std::size_t end, const ModelConfig& mc,
                 const TransferConfig& cfg) {
  Batch b;
  for (std::size_t i = begin; i < end; ++i) {
    const auto& v = videos[i];
    const auto ids = strided_frames(static_cast<std::int64_t>(v.frames.size()), frames_for(cfg, v.frames));
    b.clips.push_back(clip_patches(v.frames, ids, mc.patch_size, default_dtype()));
    b.labels.push_back(v.label);
  }
  return b;
}

using Snapshot = std::vector<Tensor>;

Snapshot snapshot(const ParamRefs& params) {
  Snapshot s;
  for (const auto& [name, p] : params) s.push_back(p->clone());
  return s;
}

void restore(const ParamRefs& params, const Snapshot& s) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const bool grad = params[i].second->requires_grad();
    *params[i].second = s[i].clone();
    params[i].second->set_requires_grad(grad);
  }
}

}  // namespace

EvalResult evaluate(const IvclModel& model, const TaskHead& head, std::span<const LabelledVideo> videos,
                    const TransferConfig& cfg) {
  EvalResult r;
  if (videos.empty()) return r;
  const auto classes = head.linear.weight.dim(1);
  double loss_sum = 0.0, hits = 0.0;
  const auto bs = static_cast<std::size_t>(std::max<std::int64_t>(1, std::min<std::int64_t>(cfg.batch_size, 32)));
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < videos.size(); i += bs) {
    const auto end = std::min(videos.size(), i + bs);
    auto b = eval_batch(videos, i, end, model.config(), cfg);
    check_labels(b.labels, classes);
    Tensor logits = predict(model, head, b.clips);
    const double n = static_cast<double>(b.labels.size());
    loss_sum += cross_entropy(logits, b.labels).item() * n;
    hits += accuracy(logits, b.labels) * n;
  }
  r.count = static_cast<std::int64_t>(videos.size());
  r.loss = loss_sum / static_cast<double>(r.count);
  r.top1 = hits / static_cast<double>(r.count);
  return r;
}

FinetuneResult finetune(IvclModel& model, TaskHead& head, std::span<const LabelledVideo> train,
                        std::span<const LabelledVideo> val, std::span<const LabelledVideo> test,
                        const TransferConfig& cfg, std::ostream* csv) {
  cfg.validate();
  if (train.empty()) throw DataError("finetune: empty training set");
  const auto& mc = model.config();
  const auto n = static_cast<std::int64_t>(train.size());
  const auto batch = std::min(cfg.batch_size, n);
  const auto per_epoch = (n + batch - 1) / batch;
  const auto total_steps = cfg.steps > 0 ? cfg.steps : cfg.epochs * per_epoch;
  const auto eval_every = cfg.eval_every > 0 ? cfg.eval_every : per_epoch;

  Optimizer opt({OptimizerKind::AdamW, cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng rng(cfg.seed);
  Rng gumbel_rng(cfg.seed ^ 0x2545f491ull);
  const ParamRefs params = finetune_parameters(model, head);
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::int64_t cursor = n;

  if (csv != nullptr) *csv << "epoch,split,loss,top1\n";
  auto emit = [&](std::int64_t epoch, const char* split, double loss, double top1) {
    if (csv != nullptr) *csv << epoch << ',' << split << ',' << std::setprecision(6) << loss << ',' << top1 << "\n";
  };

  FinetuneResult result;
  result.best_val_top1 = -1.0;
  Snapshot best;
  double train_loss = 0.0, train_acc = 0.0;
  std::int64_t since_eval = 0;
  for (std::int64_t step = 0; step < total_steps; ++step) {
    Batch b;
    for (std::int64_t i = 0; i < batch; ++i) {
      if (cursor == n) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const auto& v = train[static_cast<std::size_t>(order[static_cast<std::size_t>(cursor++)])];
      const auto len = static_cast<std::int64_t>(v.frames.size());
      const auto k = frames_for(cfg, v.frames);
      const auto ids = k == len ? strided_frames(len, len) : sample_clip(len, k, rng);
      b.clips.push_back(clip_patches(v.frames, ids, mc.patch_size, default_dtype()));
      b.labels.push_back(v.label);
    }
    const auto stats = finetune_step(model, head, opt, b.clips, b.labels, cfg, &gumbel_rng);
    train_loss += stats.loss;
    train_acc += stats.accuracy;
    ++since_eval;
    if ((step + 1) % eval_every == 0 || step + 1 == total_steps) {
      const auto epoch = (step + 1 + eval_every - 1) / eval_every;
      emit(epoch, "train", train_loss / static_cast<double>(since_eval), train_acc / static_cast<double>(since_eval));
      train_loss = train_acc = 0.0;
      since_eval = 0;
      const auto v = val.empty() ? EvalResult{} : evaluate(model, head, val, cfg);
      if (!val.empty()) emit(epoch, "val", v.loss, v.top1);
      if (val.empty() || v.top1 > result.best_val_top1) {
        result.best_val_top1 = v.top1;
        result.best_epoch = epoch;
        best = snapshot(params);
      }
    }
  }
  if (!best.empty()) restore(params, best);
  result.test = evaluate(model, head, test, cfg);
  if (!test.empty()) emit(result.best_epoch, "test", result.test.loss, result.test.top1);
  return result;
}

}  // namespace ivcl
