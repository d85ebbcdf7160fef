#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "ivcl/model.hpp"
#include "ivcl/optim.hpp"
#include "ivcl/toyworlds.hpp"

namespace ivcl {

/// Token ids: [0, n_bins) coordinates, then one id per class, then EOS.
struct DetectionVocab {
  std::int64_t n_bins = 128;
  std::int64_t n_classes = 3;

  std::int64_t size() const { return n_bins + n_classes + 1; }
  std::int64_t class_token(std::int64_t c) const { return n_bins + c; }
  std::int64_t eos() const { return n_bins + n_classes; }
  bool is_coordinate(std::int64_t t) const { return t >= 0 && t < n_bins; }
  bool is_class(std::int64_t t) const { return t >= n_bins && t < n_bins + n_classes; }
  void validate() const;
};

/// Normalized box; coordinates in [0, 1].
struct BoxAnnotation {
  double ymin = 0.0, xmin = 0.0, ymax = 0.0, xmax = 0.0;
  std::int64_t cls = 0;
};

/// Coordinate bin: round-half-up of coord · (n_bins − 1).
std::int64_t quantize_coordinate(double coord, std::int64_t n_bins);
std::array<std::int64_t, 5> box_to_tokens(const BoxAnnotation& box, const DetectionVocab& vocab);
BoxAnnotation tokens_to_box(std::span<const std::int64_t> tokens, const DetectionVocab& vocab);

/// Boxes in random order as 5-token groups, then EOS.
std::vector<std::int64_t> build_sequence(std::span<const BoxAnnotation> boxes, const DetectionVocab& vocab, Rng& rng);
/// Inverse of build_sequence; DataError on malformed input.
std::vector<BoxAnnotation> parse_sequence(std::span<const std::int64_t> tokens, const DetectionVocab& vocab);

/// Boxes of a scene's visible objects, class = shape.
std::vector<BoxAnnotation> scene_boxes(const Scene& scene, std::int64_t height, std::int64_t width);
/// Number of distinct objects drawn in a scene.
std::int64_t count_objects(const Scene& scene);

struct DetectionConfig {
  std::int64_t layers = 2;
  std::int64_t heads = 4;
  std::int64_t max_boxes = 8;
  DetectionVocab vocab;

  std::int64_t max_length() const { return 5 * max_boxes + 1; }
};

/// Causal transformer over box tokens, cross-attending to a frame's slots.
class DetectionDecoder {
 public:
  DetectionDecoder() = default;
  DetectionDecoder(const ModelConfig& model, const DetectionConfig& cfg, Rng& rng);

  /// Logits [Σ len × vocab] for each input sequence (BOS-prefixed tokens);
  /// sequence i attends to slot rows [i·S, (i+1)·S).
  Tensor forward(const Tensor& slots, std::int64_t num_slots, std::span<const std::vector<std::int64_t>> inputs) const;

  const DetectionConfig& config() const { return cfg_; }
  std::int64_t bos() const { return cfg_.vocab.size(); }
  void collect(const std::string& prefix, ParamRefs& out);

 private:
  DetectionConfig cfg_;
  Tensor token_table_;  // [vocab + 1 × d], last row is BOS
  std::vector<CrossDecoderBlock> blocks_;
  LayerNorm norm_;
  Linear head_;
};

struct DetectionBatch {
  std::vector<std::vector<std::int64_t>> inputs;   ///< BOS + targets[:-1]
  std::vector<std::vector<std::int64_t>> targets;  ///< box tokens + EOS
  std::int64_t truncated = 0;                      ///< sequences cut at max_length
};

/// Teacher-forcing pairs; overlong sequences are cut to max_length.
DetectionBatch make_detection_batch(std::span<const std::vector<BoxAnnotation>> boxes, const DetectionDecoder& decoder,
                                    Rng& rng);

struct SupervisedStats {
  double loss = 0.0;
  double accuracy = 0.0;  ///< next-token or class accuracy
  std::int64_t truncated = 0;
};

/// Next-token cross-entropy on fully visible frames; one optimizer step over
/// the encoder and the detection decoder. Warns on stderr when truncating.
SupervisedStats detection_pretrain_step(IvclModel& model, DetectionDecoder& decoder, Optimizer& opt,
                                        std::span<const Tensor> frames,
                                        std::span<const std::vector<BoxAnnotation>> boxes, Rng& rng);

/// Detection loss and accuracy without an update.
SupervisedStats detection_loss(const IvclModel& model, const DetectionDecoder& decoder, std::span<const Tensor> frames,
                               const DetectionBatch& batch, Tensor* loss_out = nullptr);

/// Slot 0 of every frame ([F·S × d] packed slots) through the classifier.
Tensor slot_cls_logits(const Tensor& slots, std::int64_t num_slots, const Linear& head);

/// Slot-0 classification (e.g. object counts) with one optimizer step over the
/// encoder and the classifier.
SupervisedStats classification_pretrain_step(IvclModel& model, Linear& head, Optimizer& opt,
                                             std::span<const Tensor> frames, std::span<const std::int64_t> labels);

}  // namespace ivcl
