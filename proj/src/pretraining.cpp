#include "ivcl/pretraining.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include "ivcl/tape.hpp"

namespace ivcl {

void PretrainConfig::validate() const {
  if (total_frames < 1) throw ConfigError("pretrain: total_frames must be positive");
  if (context_frames < 0 || context_frames >= total_frames)
    throw ConfigError("pretrain: need 0 <= context_frames < total_frames, got " + std::to_string(context_frames) +
                      " and " + std::to_string(total_frames));
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("pretrain: mask_ratio must lie in (0, 1)");
  if (batch_size < 1) throw ConfigError("pretrain: batch_size must be positive");
  if (epochs < 0 || steps < 0) throw ConfigError("pretrain: epochs and steps must be nonnegative");
  if (!(lr > 0.0)) throw ConfigError("pretrain: lr must be positive");
}

bool MaskPlan::is_context(std::int64_t t) const { return std::binary_search(context.begin(), context.end(), t); }

std::vector<std::int64_t> MaskPlan::query_frames() const {
  std::vector<std::int64_t> out;
  for (std::int64_t t = 0; t < frames(); ++t)
    if (!is_context(t)) out.push_back(t);
  return out;
}

std::vector<std::int64_t> MaskPlan::visible(std::int64_t t, std::int64_t total_patches) const {
  const auto& m = masked.at(static_cast<std::size_t>(t));
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(total_patches) - m.size());
  std::size_t j = 0;
  for (std::int64_t p = 0; p < total_patches; ++p) {
    if (j < m.size() && m[j] == p)
      ++j;
    else
      out.push_back(p);
  }
  return out;
}

std::int64_t mask_count(std::int64_t total_patches, double ratio) {
  const auto k = static_cast<std::int64_t>(std::llround(ratio * static_cast<double>(total_patches)));
  if (k <= 0 || k >= total_patches) {
    std::ostringstream msg;
    msg << "mask ratio " << ratio << " of " << total_patches << " patches hides " << k
        << "; at least one patch must be hidden and one visible";
    throw ConfigError(msg.str());
  }
  return k;
}

std::vector<std::int64_t> sample_clip(std::int64_t video_length, std::int64_t frames, Rng& rng) {
  if (frames < 1) throw ConfigError("sample_clip: need at least one frame");
  if (video_length < frames)
    throw DataError("video has " + std::to_string(video_length) + " frames, clip needs " + std::to_string(frames));
  std::vector<std::int64_t> all(static_cast<std::size_t>(video_length));
  std::iota(all.begin(), all.end(), 0);
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(frames));
  std::sample(all.begin(), all.end(), std::back_inserter(out), frames, rng);
  return out;
}

MaskPlan make_mask_plan(std::int64_t frames, std::int64_t context_frames, std::int64_t total_patches,
                        double mask_ratio, Rng& rng) {
  if (context_frames < 0 || context_frames >= frames)
    throw ConfigError("mask plan: need 0 <= context < frames");
  const auto k = mask_count(total_patches, mask_ratio);
  MaskPlan plan;
  if (context_frames > 0) plan.context = sample_clip(frames, context_frames, rng);
  std::vector<std::int64_t> ids(static_cast<std::size_t>(total_patches));
  std::iota(ids.begin(), ids.end(), 0);
  plan.masked.resize(static_cast<std::size_t>(frames));
  for (std::int64_t t = 0; t < frames; ++t) {
    if (plan.is_context(t)) continue;
    auto& m = plan.masked[static_cast<std::size_t>(t)];
    m.reserve(static_cast<std::size_t>(k));
    std::sample(ids.begin(), ids.end(), std::back_inserter(m), k, rng);
  }
  return plan;
}

Tensor reconstruction_loss(const Tensor& predicted, const Tensor& target, std::span<const MaskPlan> plans,
                           bool all_query_patches) {
  if (predicted.shape() != target.shape())
    throw ShapeError("reconstruction_loss: prediction " + to_string(predicted.shape()) + " vs target " +
                     to_string(target.shape()));
  std::int64_t query_frames = 0;
  for (const auto& p : plans) query_frames += static_cast<std::int64_t>(p.query_frames().size());
  if (query_frames == 0) throw ContractViolation("reconstruction_loss: no query frames");
  if (predicted.rank() != 2 || predicted.dim(0) % query_frames != 0)
    throw ShapeError("reconstruction_loss: " + std::to_string(predicted.rank() == 2 ? predicted.dim(0) : -1) +
                     " rows do not split into " + std::to_string(query_frames) + " query frames");
  if (all_query_patches) return mse(predicted, target);
  const auto total = predicted.dim(0) / query_frames;
  std::vector<std::int64_t> rows;
  std::int64_t frame = 0;
  for (const auto& p : plans)
    for (auto t : p.query_frames()) {
      for (auto id : p.masked[static_cast<std::size_t>(t)]) {
        if (id < 0 || id >= total) throw IndexError("reconstruction_loss: masked patch id out of range");
        rows.push_back(frame * total + id);
      }
      ++frame;
    }
  if (rows.empty()) throw ContractViolation("reconstruction_loss: nothing is masked");
  return mse(gather_rows(predicted, rows), gather_rows(target, rows));
}

Tensor reconstruction_loss(const Tensor& predicted, const Tensor& target, const MaskPlan& plan,
                           bool all_query_patches) {
  return reconstruction_loss(predicted, target, std::span<const MaskPlan>(&plan, 1), all_query_patches);
}

ReconstructionOutput masked_reconstruction(const IvclModel& model, std::span<const Clip> clips,
                                           std::span<const MaskPlan> plans, bool with_slots,
                                           bool all_query_patches, Rng* gumbel_rng) {
  const auto& cfg = model.config();
  if (clips.size() != plans.size() || clips.empty())
    throw ContractViolation("masked_reconstruction: need one plan per clip");
  if (!model.has_decoder()) throw ConfigError("masked_reconstruction: model has no decoder");
  const auto total = cfg.total_patches();
  const auto all_ids = all_patch_ids(total);

  std::vector<FrameInput> inputs;
  std::vector<Tensor> targets;
  for (std::size_t b = 0; b < clips.size(); ++b) {
    const auto& clip = clips[b];
    const auto& plan = plans[b];
    if (static_cast<std::int64_t>(clip.size()) != plan.frames())
      throw ContractViolation("masked_reconstruction: clip has " + std::to_string(clip.size()) +
                              " frames, plan " + std::to_string(plan.frames()));
    if (clip.size() > static_cast<std::size_t>(cfg.max_frames))
      throw ConfigError("masked_reconstruction: clip longer than max_frames");
    if (!with_slots && !plan.context.empty())
      throw ContractViolation("masked_reconstruction: context frames need slots");
    for (std::int64_t t = 0; t < plan.frames(); ++t) {
      const auto& frame = clip[static_cast<std::size_t>(t)];
      if (plan.is_context(t)) {
        inputs.push_back({frame, all_ids, false});
      } else {
        inputs.push_back({frame, plan.visible(t, total), true});
        targets.push_back(frame);
      }
    }
  }
  EncodeOptions opts;
  opts.with_slots = with_slots;
  opts.gumbel_rng = gumbel_rng;
  const EncodedBatch enc = model.encoder().encode(inputs, opts);

  // Rows of concat(slots, patches) that form each clip's temporal sequence.
  const std::int64_t slot_rows = enc.slots.defined() ? enc.slots.dim(0) : 0;
  const std::int64_t S = enc.num_slots;
  std::vector<std::int64_t> rows, time_ids;
  std::vector<Segment> segs;
  std::vector<FrameDecoder::FrameTokens> query_tokens;
  std::size_t f = 0;
  for (const auto& plan : plans) {
    const auto begin = static_cast<std::int64_t>(rows.size());
    for (std::int64_t t = 0; t < plan.frames(); ++t, ++f) {
      if (!plan.is_context(t)) continue;
      for (std::int64_t s = 0; s < S; ++s) {
        rows.push_back(static_cast<std::int64_t>(f) * S + s);
        time_ids.push_back(t);
      }
    }
    f -= static_cast<std::size_t>(plan.frames());
    for (std::int64_t t = 0; t < plan.frames(); ++t, ++f) {
      if (plan.is_context(t)) continue;
      const auto& span = enc.frames[f];
      query_tokens.push_back({static_cast<std::int64_t>(rows.size()), span.patch_ids});
      for (std::size_t i = 0; i < span.patch_ids.size(); ++i) {
        rows.push_back(slot_rows + span.patch_offset + static_cast<std::int64_t>(i));
        time_ids.push_back(t);
      }
    }
    segs.push_back({begin, static_cast<std::int64_t>(rows.size()) - begin});
  }
  Tensor pool = slot_rows > 0 ? concat_rows(std::vector<Tensor>{enc.slots, enc.patches}) : enc.patches;
  Tensor tokens = gather_rows(pool, rows);
  Tensor contextualized = model.temporal().forward(tokens, time_ids, segs);

  ReconstructionOutput out;
  out.temporal_tokens = static_cast<std::int64_t>(rows.size());
  out.predicted = model.decoder().decode(contextualized, query_tokens);
  out.target = targets.size() == 1 ? targets[0] : concat_rows(targets);
  out.target = out.target.to(out.predicted.dtype());
  out.loss = reconstruction_loss(out.predicted, out.target, plans, all_query_patches);
  return out;
}

namespace {

double optimize(IvclModel& model, Optimizer& opt, const std::function<Tensor()>& loss_fn) {
  GradTape tape;
  Tensor loss = loss_fn();
  const double value = loss.item();
  if (!std::isfinite(value)) {
    std::ostringstream msg;
    msg << "loss is " << value << " at step " << opt.steps() + 1;
    throw NumericError(msg.str());
  }
  tape.backward(loss);
  const ParamRefs params = model.parameters();
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (const auto& [name, p] : params) grads.push_back(tape.grad(*p));
  opt.step(params, grads);
  return value;
}

}  // namespace

double pretrain_step(IvclModel& model, Optimizer& opt, std::span<const Clip> clips, std::span<const MaskPlan> plans,
                     const PretrainConfig& cfg, Rng* gumbel_rng) {
  return optimize(model, opt, [&] {
    return masked_reconstruction(model, clips, plans, true, cfg.loss_on_all_query_patches, gumbel_rng).loss;
  });
}

double image_mae_step(IvclModel& model, Optimizer& opt, std::span<const Tensor> frames,
                      std::span<const MaskPlan> plans, const PretrainConfig& cfg) {
  std::vector<Clip> clips;
  for (const auto& f : frames) clips.push_back({f});
  for (const auto& p : plans)
    if (p.frames() != 1 || !p.context.empty()) throw ContractViolation("image_mae_step: plans must be single query frames");
  return optimize(model, opt, [&] {
    return masked_reconstruction(model, clips, plans, true, cfg.loss_on_all_query_patches).loss;
  });
}

double video_mae_step(IvclModel& model, Optimizer& opt, std::span<const Clip> clips,
                      std::span<const MaskPlan> plans, const PretrainConfig& cfg) {
  return optimize(model, opt, [&] {
    return masked_reconstruction(model, clips, plans, false, cfg.loss_on_all_query_patches).loss;
  });
}

const char* to_string(Objective objective) {
  switch (objective) {
    case Objective::Ivcl:
      return "ivcl";
    case Objective::ImageMae:
      return "image_mae";
    case Objective::VideoMae:
      return "video_mae";
  }
  return "?";
}

Objective parse_objective(const std::string& text) {
  if (text == "ivcl") return Objective::Ivcl;
  if (text == "image_mae") return Objective::ImageMae;
  if (text == "video_mae") return Objective::VideoMae;
  throw ConfigError("unknown objective '" + text + "' (expected ivcl, image_mae or video_mae)");
}

Clip clip_patches(const Video& video, std::span<const std::int64_t> frame_ids, std::int64_t patch, DType dtype) {
  Clip out;
  out.reserve(frame_ids.size());
  for (auto t : frame_ids) out.push_back(image_to_patches(video.at(static_cast<std::size_t>(t)), patch, dtype));
  return out;
}

PretrainResult pretrain(IvclModel& model, std::span<const Video> videos, const PretrainConfig& cfg,
                        Objective objective, std::ostream* log) {
  cfg.validate();
  if (videos.empty()) throw DataError("pretrain: no videos");
  const auto& mcfg = model.config();
  const auto n = static_cast<std::int64_t>(videos.size());
  const auto batch = std::min(cfg.batch_size, n);
  const auto per_epoch = (n + batch - 1) / batch;
  const auto total_steps = cfg.steps > 0 ? cfg.steps : cfg.epochs * per_epoch;
  const std::int64_t frames = objective == Objective::ImageMae ? 1 : cfg.total_frames;
  const std::int64_t context = objective == Objective::Ivcl ? cfg.context_frames : 0;

  Optimizer opt({OptimizerKind::Adam, cfg.lr});
  Rng rng(cfg.seed);
  Rng gumbel_rng(cfg.seed ^ 0x5bd1e995ull);
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::int64_t cursor = n;
  PretrainResult result;
  for (std::int64_t step = 0; step < total_steps; ++step) {
    std::vector<Clip> clips;
    std::vector<MaskPlan> plans;
    for (std::int64_t b = 0; b < batch; ++b) {
      if (cursor == n) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const auto& video = videos[static_cast<std::size_t>(order[static_cast<std::size_t>(cursor++)])];
      const auto ids = sample_clip(static_cast<std::int64_t>(video.size()), frames, rng);
      clips.push_back(clip_patches(video, ids, mcfg.patch_size, default_dtype()));
      plans.push_back(make_mask_plan(frames, context, mcfg.total_patches(), cfg.mask_ratio, rng));
    }
    double loss = 0.0;
    switch (objective) {
      case Objective::Ivcl:
        loss = pretrain_step(model, opt, clips, plans, cfg, &gumbel_rng);
        break;
      case Objective::ImageMae: {
        std::vector<Tensor> singles;
        for (auto& c : clips) singles.push_back(c[0]);
        loss = image_mae_step(model, opt, singles, plans, cfg);
        break;
      }
      case Objective::VideoMae:
        loss = video_mae_step(model, opt, clips, plans, cfg);
        break;
    }
    result.losses.push_back(loss);
    if (log != nullptr) *log << "step " << step + 1 << " loss " << std::setprecision(9) << loss << "\n";
  }
  return result;
}

std::vector<AblationPoint> ablation_grid(const AblationPoint& base, std::span<const double> mask_ratios,
                                         std::span<const std::int64_t> contexts,
                                         std::span<const std::int64_t> frames,
                                         std::span<const std::int64_t> slots) {
  std::vector<AblationPoint> out;
  for (double r : mask_ratios) out.push_back({r, base.context, base.frames, base.slots});
  for (auto c : contexts) out.push_back({base.mask_ratio, c, base.frames, base.slots});
  for (auto t : frames) out.push_back({base.mask_ratio, std::min(base.context, t - 1), t, base.slots});
  for (auto s : slots) out.push_back({base.mask_ratio, base.context, base.frames, s});
  for (const auto& p : out)
    if (p.context < 0 || p.context >= p.frames || p.slots < 1)
      throw ConfigError("ablation: context " + std::to_string(p.context) + " does not fit " +
                        std::to_string(p.frames) + " frames");
  return out;
}

void write_ablation_header(std::ostream& csv) { csv << "mask_ratio,context,frames,slots,metric\n"; }

void write_ablation_row(std::ostream& csv, const AblationRow& row) {
  csv << row.point.mask_ratio << ',' << row.point.context << ',' << row.point.frames << ',' << row.point.slots << ','
      << std::setprecision(6) << row.metric << "\n";
}

std::vector<AblationRow> run_ablation(std::span<const AblationPoint> points,
                                      const std::function<double(const AblationPoint&)>& evaluate, std::ostream* csv) {
  if (csv != nullptr) write_ablation_header(*csv);
  std::vector<AblationRow> rows;
  for (const auto& p : points) {
    rows.push_back({p, evaluate(p)});
    if (csv != nullptr) {
      write_ablation_row(*csv, rows.back());
      csv->flush();
    }
  }
  return rows;
}

}  // namespace ivcl
