#include "ivcl/supervised.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "ivcl/tape.hpp"

namespace ivcl {

void DetectionVocab::validate() const {
  if (n_bins < 2) throw ConfigError("detection: need at least 2 coordinate bins");
  if (n_classes < 1) throw ConfigError("detection: need at least one class");
}

std::int64_t quantize_coordinate(double coord, std::int64_t n_bins) {
  if (!(coord >= 0.0 && coord <= 1.0)) throw DataError("box coordinate " + std::to_string(coord) + " outside [0, 1]");
  return static_cast<std::int64_t>(std::floor(coord * static_cast<double>(n_bins - 1) + 0.5));
}

std::array<std::int64_t, 5> box_to_tokens(const BoxAnnotation& box, const DetectionVocab& vocab) {
  if (box.ymin > box.ymax || box.xmin > box.xmax) throw DataError("box corners out of order");
  if (box.cls < 0 || box.cls >= vocab.n_classes) throw DataError("box class " + std::to_string(box.cls) + " unknown");
  return {quantize_coordinate(box.ymin, vocab.n_bins), quantize_coordinate(box.xmin, vocab.n_bins),
          quantize_coordinate(box.ymax, vocab.n_bins), quantize_coordinate(box.xmax, vocab.n_bins),
          vocab.class_token(box.cls)};
}

BoxAnnotation tokens_to_box(std::span<const std::int64_t> tokens, const DetectionVocab& vocab) {
  if (tokens.size() != 5) throw DataError("a box takes 5 tokens");
  for (int i = 0; i < 4; ++i)
    if (!vocab.is_coordinate(tokens[static_cast<std::size_t>(i)]))
      throw DataError("token " + std::to_string(tokens[static_cast<std::size_t>(i)]) + " is not a coordinate");
  if (!vocab.is_class(tokens[4])) throw DataError("token " + std::to_string(tokens[4]) + " is not a class");
  const double scale = 1.0 / static_cast<double>(vocab.n_bins - 1);
  return {static_cast<double>(tokens[0]) * scale, static_cast<double>(tokens[1]) * scale,
          static_cast<double>(tokens[2]) * scale, static_cast<double>(tokens[3]) * scale, tokens[4] - vocab.n_bins};
}

std::vector<std::int64_t> build_sequence(std::span<const BoxAnnotation> boxes, const DetectionVocab& vocab, Rng& rng) {
  std::vector<std::size_t> order(boxes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::int64_t> seq;
  seq.reserve(boxes.size() * 5 + 1);
  for (auto i : order) {
    const auto t = box_to_tokens(boxes[i], vocab);
    seq.insert(seq.end(), t.begin(), t.end());
  }
  seq.push_back(vocab.eos());
  return seq;
}

std::vector<BoxAnnotation> parse_sequence(std::span<const std::int64_t> tokens, const DetectionVocab& vocab) {
  if (tokens.empty() || tokens.back() != vocab.eos()) throw DataError("detection sequence does not end with EOS");
  if ((tokens.size() - 1) % 5 != 0) throw DataError("detection sequence length is not 5k + 1");
  std::vector<BoxAnnotation> out;
  for (std::size_t i = 0; i + 1 < tokens.size(); i += 5) out.push_back(tokens_to_box(tokens.subspan(i, 5), vocab));
  return out;
}

std::vector<BoxAnnotation> scene_boxes(const Scene& scene, std::int64_t height, std::int64_t width) {
  std::vector<BoxAnnotation> out;
  const double h = static_cast<double>(height), w = static_cast<double>(width);
  for (const auto& o : scene.objects) {
    const auto b = object_pixel_box(o, scene.grid, height, width);
    out.push_back({static_cast<double>(b.y0) / h, static_cast<double>(b.x0) / w, static_cast<double>(b.y1) / h,
                   static_cast<double>(b.x1) / w, static_cast<std::int64_t>(o.shape)});
  }
  return out;
}

std::int64_t count_objects(const Scene& scene) { return static_cast<std::int64_t>(scene.objects.size()); }

DetectionDecoder::DetectionDecoder(const ModelConfig& model, const DetectionConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg.vocab.validate();
  const BlockConfig block{model.hidden_dim, cfg.heads, model.mlp_dim, 0.0};
  block.validate();
  token_table_ = truncated_normal({cfg.vocab.size() + 1, model.hidden_dim}, 0.02, rng);
  for (std::int64_t l = 0; l < cfg.layers; ++l) blocks_.emplace_back(block, rng);
  norm_ = LayerNorm(model.hidden_dim);
  head_ = Linear(model.hidden_dim, cfg.vocab.size(), rng);
}

Tensor DetectionDecoder::forward(const Tensor& slots, std::int64_t num_slots,
                                 std::span<const std::vector<std::int64_t>> inputs) const {
  if (slots.dim(0) != num_slots * static_cast<std::int64_t>(inputs.size()))
    throw ShapeError("detection decoder: " + std::to_string(slots.dim(0)) + " slot rows for " +
                     std::to_string(inputs.size()) + " sequences of " + std::to_string(num_slots));
  std::vector<std::int64_t> ids, pos;
  std::vector<Segment> segs, memory;
  std::int64_t longest = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& seq = inputs[i];
    if (seq.empty()) throw ContractViolation("detection decoder: empty input sequence");
    segs.push_back({static_cast<std::int64_t>(ids.size()), static_cast<std::int64_t>(seq.size())});
    memory.push_back({static_cast<std::int64_t>(i) * num_slots, num_slots});
    for (std::size_t t = 0; t < seq.size(); ++t) {
      ids.push_back(seq[t]);
      pos.push_back(static_cast<std::int64_t>(t));
    }
    longest = std::max<std::int64_t>(longest, static_cast<std::int64_t>(seq.size()));
  }
  Tensor x = embedding_lookup(token_table_, ids);
  x = add(x, gather_rows(sinusoidal_positions(longest, x.dim(1), x.dtype()), pos));
  for (const auto& b : blocks_) x = b.forward(x, slots, segs, memory);
  return head_.forward(norm_.forward(x));
}

void DetectionDecoder::collect(const std::string& prefix, ParamRefs& out) {
  out.emplace_back(prefix + ".tokens", &token_table_);
  for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect(prefix + ".layer" + std::to_string(l), out);
  norm_.collect(prefix + ".norm", out);
  head_.collect(prefix + ".head", out);
}

DetectionBatch make_detection_batch(std::span<const std::vector<BoxAnnotation>> boxes, const DetectionDecoder& decoder,
                                    Rng& rng) {
  const auto& cfg = decoder.config();
  DetectionBatch batch;
  for (const auto& frame_boxes : boxes) {
    auto seq = build_sequence(frame_boxes, cfg.vocab, rng);
    if (static_cast<std::int64_t>(seq.size()) > cfg.max_length()) {
      seq.resize(static_cast<std::size_t>(cfg.max_length()));
      ++batch.truncated;
    }
    std::vector<std::int64_t> input{decoder.bos()};
    input.insert(input.end(), seq.begin(), seq.end() - 1);
    batch.inputs.push_back(std::move(input));
    batch.targets.push_back(std::move(seq));
  }
  return batch;
}

namespace {

Tensor encode_slots(const IvclModel& model, std::span<const Tensor> frames) {
  const auto ids = all_patch_ids(model.config().total_patches());
  std::vector<FrameInput> inputs;
  for (const auto& f : frames) inputs.push_back({f, ids, false});
  return model.encoder().encode(inputs).slots;
}

double step_params(ParamRefs params, GradTape& tape, const Tensor& loss, Optimizer& opt) {
  const double value = loss.item();
  if (!std::isfinite(value))
    throw NumericError("supervised pretraining: loss is " + std::to_string(value) + " at step " +
                       std::to_string(opt.steps() + 1));
  tape.backward(loss);
  std::vector<Tensor> grads;
  for (const auto& [name, p] : params) grads.push_back(tape.grad(*p));
  opt.step(params, grads);
  return value;
}

}  // namespace

SupervisedStats detection_loss(const IvclModel& model, const DetectionDecoder& decoder, std::span<const Tensor> frames,
                               const DetectionBatch& batch, Tensor* loss_out) {
  if (frames.size() != batch.inputs.size()) throw ContractViolation("detection: one box list per frame");
  Tensor slots = encode_slots(model, frames);
  Tensor logits = decoder.forward(slots, model.config().num_slots, batch.inputs);
  std::vector<std::int64_t> targets;
  for (const auto& t : batch.targets) targets.insert(targets.end(), t.begin(), t.end());
  Tensor loss = cross_entropy(logits, targets);
  const auto pred = argmax_rows(logits);
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) hits += pred[i] == targets[i];
  if (loss_out != nullptr) *loss_out = loss;
  return {loss.item(), static_cast<double>(hits) / static_cast<double>(targets.size()), batch.truncated};
}

SupervisedStats detection_pretrain_step(IvclModel& model, DetectionDecoder& decoder, Optimizer& opt,
                                        std::span<const Tensor> frames,
                                        std::span<const std::vector<BoxAnnotation>> boxes, Rng& rng) {
  const auto batch = make_detection_batch(boxes, decoder, rng);
  if (batch.truncated > 0)
    std::cerr << "warning: " << batch.truncated << " detection sequence(s) truncated to "
              << decoder.config().max_length() << " tokens\n";
  GradTape tape;
  Tensor loss;
  auto stats = detection_loss(model, decoder, frames, batch, &loss);
  ParamRefs params;
  model.encoder().collect("encoder", params);
  decoder.collect("detector", params);
  step_params(params, tape, loss, opt);
  return stats;
}

Tensor slot_cls_logits(const Tensor& slots, std::int64_t num_slots, const Linear& head) {
  if (num_slots < 1 || slots.dim(0) % num_slots != 0) throw ShapeError("slot_cls_logits: slot rows not a multiple of S");
  std::vector<std::int64_t> rows;
  for (std::int64_t f = 0; f < slots.dim(0) / num_slots; ++f) rows.push_back(f * num_slots);
  return head.forward(gather_rows(slots, rows));
}

SupervisedStats classification_pretrain_step(IvclModel& model, Linear& head, Optimizer& opt,
                                             std::span<const Tensor> frames, std::span<const std::int64_t> labels) {
  if (frames.size() != labels.size() || frames.empty()) throw ContractViolation("classification: one label per frame");
  const auto classes = head.weight.dim(1);
  for (auto l : labels)
    if (l < 0 || l >= classes) throw DataError("label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
  GradTape tape;
  Tensor logits = slot_cls_logits(encode_slots(model, frames), model.config().num_slots, head);
  Tensor loss = cross_entropy(logits, labels);
  const auto pred = argmax_rows(logits);
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i];
  ParamRefs params;
  model.encoder().collect("encoder", params);
  head.collect("classifier", params);
  SupervisedStats stats{0.0, static_cast<double>(hits) / static_cast<double>(labels.size()), 0};
  stats.loss = step_params(params, tape, loss, opt);
  return stats;
}

}  // namespace ivcl
