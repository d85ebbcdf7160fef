#include "ivcl/model.hpp"

#include <cmath>
#include <numeric>

namespace ivcl {

const char* to_string(PoolMethod method) {
  switch (method) {
    case PoolMethod::Slice:
      return "slice";
    case PoolMethod::SoftAttention:
      return "soft";
    case PoolMethod::GumbelMax:
      return "gumbel";
  }
  return "?";
}

PoolMethod parse_pool_method(const std::string& text) {
  if (text == "slice") return PoolMethod::Slice;
  if (text == "soft") return PoolMethod::SoftAttention;
  if (text == "gumbel") return PoolMethod::GumbelMax;
  throw ConfigError("unknown pool method '" + text + "' (expected slice, soft or gumbel)");
}

void ModelConfig::validate() const {
  auto positive = [](std::int64_t v, const char* name) {
    if (v <= 0) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(image_size, "image_size");
  positive(patch_size, "patch_size");
  positive(channels, "channels");
  positive(encoder_layers, "encoder_layers");
  positive(hidden_dim, "hidden_dim");
  positive(num_slots, "num_slots");
  positive(temporal_layers, "temporal_layers");
  positive(decoder_layers, "decoder_layers");
  positive(max_frames, "max_frames");
  if (image_size % patch_size != 0)
    throw ConfigError("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                      std::to_string(patch_size));
  if (hidden_dim % 2 != 0) throw ConfigError("hidden_dim must be even for sinusoidal positions");
  if (pool_layer < 0 || pool_layer >= encoder_layers)
    throw ConfigError("pool_layer must lie in [0, encoder_layers)");
  if (gumbel_tau <= 0) throw ConfigError("gumbel_tau must be positive");
  encoder_block().validate();
  temporal_block().validate();
  decoder_block().validate();
}

EncodedFrame EncodedBatch::frame(std::size_t i) const {
  EncodedFrame out;
  if (slots.defined()) out.slots = slice_rows(slots, static_cast<std::int64_t>(i) * num_slots, num_slots);
  const auto& f = frames.at(i);
  if (f.patch_offset >= 0) {
    out.patches = slice_rows(patches, f.patch_offset, static_cast<std::int64_t>(f.patch_ids.size()));
    out.patch_ids = f.patch_ids;
  }
  return out;
}

std::vector<std::int64_t> all_patch_ids(std::int64_t total) {
  std::vector<std::int64_t> ids(static_cast<std::size_t>(total));
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

namespace {

std::vector<Segment> uniform_segments(std::int64_t count, std::int64_t length) {
  std::vector<Segment> segs;
  segs.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) segs.push_back({i * length, length});
  return segs;
}

Tensor constant_like(const Tensor& reference, Tensor value) { return value.to(reference.dtype()); }

Tensor gumbel_noise(std::int64_t rows, std::int64_t cols, Rng& rng, DType dtype) {
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<double> g(static_cast<std::size_t>(rows * cols));
  for (auto& v : g) {
    double u = uniform(rng);
    while (u <= 0.0) u = uniform(rng);
    v = -std::log(-std::log(u));
  }
  return Tensor({rows, cols}, std::move(g)).to(dtype);
}

}  // namespace

SlotPoolHead::SlotPoolHead(const ModelConfig& cfg, Rng& rng)
    : queries(truncated_normal({cfg.num_slots, cfg.hidden_dim}, 0.02, rng)),
      key(cfg.hidden_dim, cfg.hidden_dim, rng),
      value(cfg.hidden_dim, cfg.hidden_dim, rng) {}

void SlotPoolHead::collect(const std::string& prefix, ParamRefs& out) {
  out.emplace_back(prefix + ".queries", &queries);
  key.collect(prefix + ".key", out);
  value.collect(prefix + ".value", out);
}

ImageEncoder::ImageEncoder(const ModelConfig& cfg, Rng& rng)
    : cfg_(cfg),
      patch_embed_(cfg.patch_dim(), cfg.hidden_dim, rng, 0.02),
      slot_table_(truncated_normal({cfg.num_slots, cfg.hidden_dim}, 0.02, rng)),
      norm_(cfg.hidden_dim) {
  cfg.validate();
  for (std::int64_t l = 0; l < cfg.encoder_layers; ++l) blocks_.emplace_back(cfg.encoder_block(), rng);
  if (cfg.pool_method != PoolMethod::Slice) pool_head_.emplace(cfg, rng);
}

void ImageEncoder::collect(const std::string& prefix, ParamRefs& out) {
  patch_embed_.collect(prefix + ".patch_embed", out);
  out.emplace_back(prefix + ".slots", &slot_table_);
  for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect(prefix + ".layer" + std::to_string(l), out);
  norm_.collect(prefix + ".norm", out);
  if (pool_head_) pool_head_->collect(prefix + ".pool", out);
}

EncodedBatch ImageEncoder::encode(std::span<const FrameInput> frames, const EncodeOptions& options) const {
  if (frames.empty()) throw ContractViolation("encode: no frames");
  const std::int64_t total = cfg_.total_patches();
  const std::int64_t slots = options.with_slots ? cfg_.num_slots : 0;
  const auto frame_count = static_cast<std::int64_t>(frames.size());
  const DType dtype = patch_embed_.weight.dtype();

  std::vector<Tensor> visible_patches;
  std::vector<std::int64_t> position_ids;
  for (const auto& f : frames) {
    if (f.visible.empty()) throw ContractViolation("encode: a frame with no visible patches cannot be encoded");
    if (f.patches.rank() != 2 || f.patches.dim(0) != total || f.patches.dim(1) != cfg_.patch_dim())
      throw ShapeError("encode: frame patches " + to_string(f.patches.shape()) + " do not match config [" +
                       std::to_string(total) + "x" + std::to_string(cfg_.patch_dim()) + "]");
    for (std::size_t i = 0; i < f.visible.size(); ++i) {
      if (f.visible[i] < 0 || f.visible[i] >= total || (i > 0 && f.visible[i] <= f.visible[i - 1]))
        throw ContractViolation("encode: visible patch ids must be strictly increasing within [0, " +
                                std::to_string(total) + ")");
    }
    visible_patches.push_back(f.visible.size() == static_cast<std::size_t>(total)
                                  ? f.patches
                                  : gather_rows(f.patches, f.visible));
    position_ids.insert(position_ids.end(), f.visible.begin(), f.visible.end());
  }
  Tensor packed = visible_patches.size() == 1 ? visible_patches[0] : concat_rows(visible_patches);
  Tensor positions = gather_rows(sinusoidal_positions(total, cfg_.hidden_dim, dtype), position_ids);
  Tensor embedded = add(patch_embed_.forward(constant_like(patch_embed_.weight, packed)), positions);

  // Interleave [slots; patches] per frame.
  std::vector<Segment> segs;
  std::vector<std::int64_t> order;
  std::int64_t patch_row = 0;
  for (const auto& f : frames) {
    const auto u = static_cast<std::int64_t>(f.visible.size());
    segs.push_back({static_cast<std::int64_t>(order.size()), slots + u});
    for (std::int64_t s = 0; s < slots; ++s) order.push_back(s);
    for (std::int64_t j = 0; j < u; ++j) order.push_back(slots + patch_row + j);
    patch_row += u;
  }
  Tensor x = slots > 0 ? gather_rows(concat_rows(std::vector<Tensor>{slot_table_, embedded}), order) : embedded;

  std::vector<std::size_t> live(frames.size());
  std::iota(live.begin(), live.end(), 0);
  EncodedBatch out;
  out.num_slots = slots;
  out.frames.resize(frames.size());
  if (options.attention) options.attention->clear();
  if (options.layer_states) options.layer_states->clear();

  for (std::int64_t l = 0; l < cfg_.encoder_layers; ++l) {
    std::vector<Tensor> attn;
    x = blocks_[static_cast<std::size_t>(l)].forward(x, segs, options.attention ? &attn : nullptr);
    if (options.attention) options.attention->push_back(std::move(attn));
    if (options.layer_states) options.layer_states->push_back(x);
    if (slots > 0 && l == cfg_.pool_layer) {
      out.slots = pool(x, segs, options);
      std::vector<std::size_t> kept;
      for (std::size_t i = 0; i < live.size(); ++i)
        if (frames[live[i]].keep_patches) kept.push_back(i);
      if (kept.empty()) {
        x = Tensor{};
        live.clear();
        break;
      }
      if (kept.size() != live.size()) {
        std::vector<std::int64_t> rows;
        std::vector<Segment> new_segs;
        std::vector<std::size_t> new_live;
        for (auto i : kept) {
          new_segs.push_back({static_cast<std::int64_t>(rows.size()), segs[i].length});
          for (std::int64_t r = 0; r < segs[i].length; ++r) rows.push_back(segs[i].begin + r);
          new_live.push_back(live[i]);
        }
        x = gather_rows(x, rows);
        segs = std::move(new_segs);
        live = std::move(new_live);
      }
    }
  }
  if (slots > 0) out.slots = finish_slots(out.slots, frame_count);

  if (!live.empty()) {
    std::vector<std::int64_t> rows;
    for (std::size_t i = 0; i < live.size(); ++i) {
      auto& span = out.frames[live[i]];
      span.patch_offset = static_cast<std::int64_t>(rows.size());
      span.patch_ids = frames[live[i]].visible;
      for (std::int64_t r = slots; r < segs[i].length; ++r) rows.push_back(segs[i].begin + r);
    }
    out.patches = norm_.forward(gather_rows(x, rows));
  }
  return out;
}

Tensor ImageEncoder::pool(const Tensor& tokens, std::span<const Segment> frame_segments,
                          const EncodeOptions& options) const {
  const std::int64_t slots = cfg_.num_slots;
  const auto frame_count = static_cast<std::int64_t>(frame_segments.size());
  if (cfg_.pool_method == PoolMethod::Slice) {
    std::vector<std::int64_t> rows;
    for (const auto& s : frame_segments)
      for (std::int64_t i = 0; i < slots; ++i) rows.push_back(s.begin + i);
    return gather_rows(tokens, rows);
  }
  if (!pool_head_) throw ConfigError("pooling head missing for method " + std::string(to_string(cfg_.pool_method)));

  std::vector<std::int64_t> patch_rows;
  std::vector<Segment> patch_segs;
  for (const auto& s : frame_segments) {
    if (s.length <= slots) throw ContractViolation("pool: frame has no patch tokens");
    patch_segs.push_back({static_cast<std::int64_t>(patch_rows.size()), s.length - slots});
    for (std::int64_t i = slots; i < s.length; ++i) patch_rows.push_back(s.begin + i);
  }
  Tensor patches = gather_rows(tokens, patch_rows);
  Tensor keys = pool_head_->key.forward(patches);
  Tensor values = pool_head_->value.forward(patches);

  if (cfg_.pool_method == PoolMethod::SoftAttention) {
    std::vector<std::int64_t> query_rows;
    for (std::int64_t f = 0; f < frame_count; ++f)
      for (std::int64_t i = 0; i < slots; ++i) query_rows.push_back(i);
    Tensor queries = gather_rows(pool_head_->queries, query_rows);
    const auto query_segs = uniform_segments(frame_count, slots);
    return attention(queries, keys, values, 1, query_segs, patch_segs).out;
  }

  // Gumbel-max: hard one-hot selection of a patch token per slot, with the
  // straight-through gradient of the tempered softmax.
  GumbelSelection* sel = options.gumbel;
  const bool replay = sel != nullptr && !sel->hard.empty();
  if (replay && static_cast<std::int64_t>(sel->hard.size()) != frame_count)
    throw ContractViolation("pool: replayed Gumbel selection has the wrong frame count");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.hidden_dim));
  std::vector<Tensor> pooled;
  for (std::int64_t f = 0; f < frame_count; ++f) {
    const auto& seg = patch_segs[static_cast<std::size_t>(f)];
    Tensor k = slice_rows(keys, seg.begin, seg.length);
    Tensor v = slice_rows(values, seg.begin, seg.length);
    Tensor scores = scale(matmul(pool_head_->queries, transpose(k)), inv_sqrt_d);
    GumbelWeights w;
    if (replay) {
      const GumbelWeights frozen{Tensor{}, sel->hard[static_cast<std::size_t>(f)], sel->soft[static_cast<std::size_t>(f)]};
      w = gumbel_max_weights(scores, cfg_.gumbel_tau, nullptr, &frozen);
    } else {
      w = gumbel_max_weights(scores, cfg_.gumbel_tau, options.gumbel_rng);
      if (sel != nullptr) {
        sel->hard.push_back(w.hard);
        sel->soft.push_back(w.soft);
      }
    }
    pooled.push_back(matmul(w.weights, v));
  }
  return pooled.size() == 1 ? pooled[0] : concat_rows(pooled);
}

GumbelWeights gumbel_max_weights(const Tensor& scores, double tau, Rng* rng, const GumbelWeights* replay) {
  if (scores.rank() != 2) throw ShapeError("gumbel_max_weights: expected [S×n] scores, got " + to_string(scores.shape()));
  Tensor logits = scores;
  if (rng != nullptr && replay == nullptr) logits = add(logits, gumbel_noise(scores.dim(0), scores.dim(1), *rng, scores.dtype()));
  Tensor soft = softmax(scale(logits, 1.0 / tau), -1);
  GumbelWeights out;
  if (replay != nullptr) {
    out.hard = replay->hard;
    out.soft = replay->soft;
  } else {
    const auto picks = argmax_rows(soft);
    out.hard = one_hot(picks, scores.dim(1), soft.dtype());
    out.soft = soft.detach();
  }
  out.weights = add(out.hard, sub(soft, out.soft));
  return out;
}

Tensor ImageEncoder::finish_slots(Tensor slots, std::int64_t frame_count) const {
  const auto segs = uniform_segments(frame_count, cfg_.num_slots);
  for (std::int64_t l = cfg_.pool_layer + 1; l < cfg_.encoder_layers; ++l)
    slots = blocks_[static_cast<std::size_t>(l)].forward(slots, segs);
  return norm_.forward(slots);
}

Tensor ImageEncoder::pool_slots(std::span<const Tensor> layer_states, const EncodeOptions& options) const {
  if (static_cast<std::int64_t>(layer_states.size()) <= cfg_.pool_layer)
    throw ContractViolation("pool_slots: layer states stop before pool_layer " + std::to_string(cfg_.pool_layer));
  const Tensor& tokens = layer_states[static_cast<std::size_t>(cfg_.pool_layer)];
  const auto segs = single_segment(tokens.dim(0));
  return finish_slots(pool(tokens, segs, options), 1);
}

Tensor ImageEncoder::pool_weights(const Tensor& frame_tokens) const {
  if (!pool_head_) throw ConfigError("pool_weights: slice pooling has no attention weights");
  const std::int64_t slots = cfg_.num_slots;
  if (frame_tokens.dim(0) <= slots) throw ContractViolation("pool_weights: frame has no patch tokens");
  Tensor keys = pool_head_->key.forward(slice_rows(frame_tokens, slots, frame_tokens.dim(0) - slots));
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.hidden_dim));
  Tensor scores = scale(matmul(pool_head_->queries, transpose(keys)), inv_sqrt_d);
  if (cfg_.pool_method == PoolMethod::GumbelMax) scores = scale(scores, 1.0 / cfg_.gumbel_tau);
  return softmax(scores, -1);
}

TemporalTransformer::TemporalTransformer(const ModelConfig& cfg, Rng& rng)
    : cfg_(cfg), time_table_(truncated_normal({cfg.max_frames, cfg.hidden_dim}, 0.02, rng)), norm_(cfg.hidden_dim) {
  for (std::int64_t l = 0; l < cfg.temporal_layers; ++l) blocks_.emplace_back(cfg.temporal_block(), rng);
}

Tensor TemporalTransformer::forward(const Tensor& tokens, std::span<const std::int64_t> time_ids,
                                    std::span<const Segment> clips,
                                    std::vector<std::vector<Tensor>>* attention) const {
  if (static_cast<std::int64_t>(time_ids.size()) != tokens.dim(0))
    throw ShapeError("temporal: " + std::to_string(time_ids.size()) + " time ids for " +
                     std::to_string(tokens.dim(0)) + " tokens");
  for (auto t : time_ids)
    if (t < 0 || t >= cfg_.max_frames)
      throw ConfigError("temporal: frame index " + std::to_string(t) + " outside the " +
                        std::to_string(cfg_.max_frames) + "-entry temporal table");
  Tensor x = add(tokens, gather_rows(time_table_, time_ids));
  if (attention) attention->clear();
  for (const auto& block : blocks_) {
    std::vector<Tensor> attn;
    x = block.forward(x, clips, attention ? &attn : nullptr);
    if (attention) attention->push_back(std::move(attn));
  }
  return norm_.forward(x);
}

void TemporalTransformer::collect(const std::string& prefix, ParamRefs& out) {
  out.emplace_back(prefix + ".time", &time_table_);
  for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect(prefix + ".layer" + std::to_string(l), out);
  norm_.collect(prefix + ".norm", out);
}

FrameDecoder::FrameDecoder(const ModelConfig& cfg, Rng& rng)
    : cfg_(cfg),
      mask_token_(truncated_normal({1, cfg.hidden_dim}, 0.02, rng)),
      norm_(cfg.hidden_dim),
      head_(cfg.hidden_dim, cfg.patch_dim(), rng) {
  for (std::int64_t l = 0; l < cfg.decoder_layers; ++l) blocks_.emplace_back(cfg.decoder_block(), rng);
}

Tensor FrameDecoder::decode(const Tensor& contextualized, std::span<const FrameTokens> frames,
                            const Tensor* positions) const {
  const std::int64_t total = cfg_.total_patches();
  const std::int64_t mask_row = contextualized.dim(0);
  std::vector<std::int64_t> order;
  order.reserve(frames.size() * static_cast<std::size_t>(total));
  for (const auto& f : frames) {
    std::size_t j = 0;
    for (std::int64_t p = 0; p < total; ++p) {
      if (j < f.patch_ids.size() && f.patch_ids[j] == p) {
        order.push_back(f.offset + static_cast<std::int64_t>(j));
        ++j;
      } else {
        order.push_back(mask_row);
      }
    }
    if (j != f.patch_ids.size())
      throw ContractViolation("decode: patch ids must be strictly increasing within [0, " + std::to_string(total) + ")");
    if (f.offset < 0 || f.offset + static_cast<std::int64_t>(f.patch_ids.size()) > mask_row)
      throw ShapeError("decode: frame rows outside the contextualized matrix");
  }
  const auto frame_count = static_cast<std::int64_t>(frames.size());
  Tensor x = gather_rows(concat_rows(std::vector<Tensor>{contextualized, mask_token_}), order);
  Tensor table = positions != nullptr ? *positions : sinusoidal_positions(total, cfg_.hidden_dim, x.dtype());
  std::vector<std::int64_t> pos(order.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int64_t>(i) % total;
  x = add(x, gather_rows(table, pos));
  const auto segs = uniform_segments(frame_count, total);
  for (const auto& block : blocks_) x = block.forward(x, segs);
  return head_.forward(norm_.forward(x));
}

void FrameDecoder::collect(const std::string& prefix, ParamRefs& out) {
  out.emplace_back(prefix + ".mask_token", &mask_token_);
  for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect(prefix + ".layer" + std::to_string(l), out);
  norm_.collect(prefix + ".norm", out);
  head_.collect(prefix + ".head", out);
}

IvclModel::IvclModel(const ModelConfig& cfg, bool with_decoder) : cfg_(cfg) {
  cfg.validate();
  Rng rng(cfg.init_seed);
  encoder_ = ImageEncoder(cfg, rng);
  temporal_ = TemporalTransformer(cfg, rng);
  if (with_decoder) decoder_.emplace(cfg, rng);
}

FrameDecoder& IvclModel::decoder() {
  if (!decoder_) throw ContractViolation("model has no decoder (transfer model)");
  return *decoder_;
}

const FrameDecoder& IvclModel::decoder() const {
  if (!decoder_) throw ContractViolation("model has no decoder (transfer model)");
  return *decoder_;
}

ParamRefs IvclModel::parameters() {
  ParamRefs refs;
  encoder_.collect("encoder", refs);
  temporal_.collect("temporal", refs);
  if (decoder_) decoder_->collect("decoder", refs);
  return refs;
}

IvclModel IvclModel::cast(DType dtype) const {
  IvclModel copy = *this;
  for (auto& [name, t] : copy.parameters()) *t = t->dtype() == dtype ? t->clone() : t->to(dtype);
  return copy;
}

EncodedFrame encode_image(const IvclModel& model, const Tensor& frame_patches, std::span<const std::int64_t> visible,
                          const EncodeOptions& options) {
  FrameInput in{frame_patches, std::vector<std::int64_t>(visible.begin(), visible.end()), true};
  return model.encoder().encode(std::span<const FrameInput>(&in, 1), options).frame(0);
}

std::vector<Tensor> temporal_forward(const IvclModel& model, std::span<const ContextSlots> context,
                                     std::span<const QueryPatches> queries) {
  std::vector<Tensor> parts;
  std::vector<std::int64_t> time_ids;
  for (const auto& c : context) {
    parts.push_back(c.slots);
    time_ids.insert(time_ids.end(), static_cast<std::size_t>(c.slots.dim(0)), c.frame_index);
  }
  std::vector<std::int64_t> query_offsets;
  for (const auto& q : queries) {
    query_offsets.push_back(static_cast<std::int64_t>(time_ids.size()));
    parts.push_back(q.frame.patches);
    time_ids.insert(time_ids.end(), static_cast<std::size_t>(q.frame.patches.dim(0)), q.frame_index);
  }
  if (parts.empty()) throw ContractViolation("temporal_forward: no tokens");
  Tensor tokens = parts.size() == 1 ? parts[0] : concat_rows(parts);
  const auto segs = single_segment(tokens.dim(0));
  Tensor out = model.temporal().forward(tokens, time_ids, segs);
  std::vector<Tensor> result;
  for (std::size_t i = 0; i < queries.size(); ++i)
    result.push_back(slice_rows(out, query_offsets[i], queries[i].frame.patches.dim(0)));
  return result;
}

Tensor decode_frame(const IvclModel& model, const Tensor& contextualized, std::span<const std::int64_t> patch_ids) {
  FrameDecoder::FrameTokens frame{0, std::vector<std::int64_t>(patch_ids.begin(), patch_ids.end())};
  if (static_cast<std::int64_t>(patch_ids.size()) != contextualized.dim(0))
    throw ShapeError("decode_frame: " + std::to_string(patch_ids.size()) + " ids for " +
                     std::to_string(contextualized.dim(0)) + " tokens");
  return model.decoder().decode(contextualized, std::span<const FrameDecoder::FrameTokens>(&frame, 1));
}

Tensor encode_videos_for_transfer(const IvclModel& model, std::span<const std::vector<Tensor>> videos,
                                  const EncodeOptions& options, std::vector<std::vector<Tensor>>* temporal_attention) {
  const auto& cfg = model.config();
  const auto ids = all_patch_ids(cfg.total_patches());
  std::vector<FrameInput> frames;
  for (const auto& video : videos) {
    if (video.empty()) throw ContractViolation("transfer: empty video");
    for (const auto& f : video) frames.push_back({f, ids, false});
  }
  EncodedBatch enc = model.encoder().encode(frames, options);
  const std::int64_t slots = cfg.num_slots;
  std::vector<std::int64_t> time_ids;
  std::vector<Segment> clips;
  for (const auto& video : videos) {
    clips.push_back({static_cast<std::int64_t>(time_ids.size()), static_cast<std::int64_t>(video.size()) * slots});
    for (std::size_t t = 0; t < video.size(); ++t)
      time_ids.insert(time_ids.end(), static_cast<std::size_t>(slots), static_cast<std::int64_t>(t));
  }
  Tensor out = model.temporal().forward(enc.slots, time_ids, clips, temporal_attention);
  const auto rows = out.dim(0);
  const auto batch = static_cast<std::int64_t>(videos.size());
  std::vector<double> avg(static_cast<std::size_t>(batch * rows), 0.0);
  for (std::int64_t b = 0; b < batch; ++b) {
    const auto& c = clips[static_cast<std::size_t>(b)];
    for (std::int64_t r = 0; r < c.length; ++r)
      avg[static_cast<std::size_t>(b * rows + c.begin + r)] = 1.0 / static_cast<double>(c.length);
  }
  return matmul(Tensor({batch, rows}, std::move(avg)).to(out.dtype()), out);
}

Tensor encode_video_for_transfer(const IvclModel& model, std::span<const Tensor> frames, const EncodeOptions& options) {
  std::vector<std::vector<Tensor>> videos{std::vector<Tensor>(frames.begin(), frames.end())};
  return encode_videos_for_transfer(model, videos, options);
}

}  // namespace ivcl
