#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ivcl/nn.hpp"

namespace ivcl {

enum class PoolMethod { Slice, SoftAttention, GumbelMax };

const char* to_string(PoolMethod method);
PoolMethod parse_pool_method(const std::string& text);

/// Architecture hyperparameters. One hidden width is shared by the image
/// encoder, temporal transformer and decoder.
struct ModelConfig {
  std::int64_t image_size = 64;
  std::int64_t patch_size = 16;
  std::int64_t channels = 3;
  std::int64_t encoder_layers = 4;
  std::int64_t hidden_dim = 128;
  std::int64_t encoder_heads = 4;
  std::int64_t mlp_dim = 512;
  std::int64_t num_slots = 1;
  /// Index of the encoder layer whose output is pooled into slots; later
  /// layers process the slots alone.
  std::int64_t pool_layer = 3;
  PoolMethod pool_method = PoolMethod::Slice;
  double gumbel_tau = 1.0;
  std::int64_t temporal_layers = 2;
  std::int64_t temporal_heads = 4;
  std::int64_t decoder_layers = 2;
  std::int64_t decoder_heads = 4;
  std::int64_t max_frames = 64;
  std::uint64_t init_seed = 0;

  void validate() const;
  std::int64_t patches_per_side() const { return image_size / patch_size; }
  std::int64_t total_patches() const { return patches_per_side() * patches_per_side(); }
  std::int64_t patch_dim() const { return patch_size * patch_size * channels; }
  BlockConfig encoder_block() const { return {hidden_dim, encoder_heads, mlp_dim, 0.0}; }
  BlockConfig temporal_block() const { return {hidden_dim, temporal_heads, mlp_dim, 0.0}; }
  BlockConfig decoder_block() const { return {hidden_dim, decoder_heads, mlp_dim, 0.0}; }
};

/// One frame handed to the image encoder.
struct FrameInput {
  Tensor patches;                     ///< [total_patches × patch_dim], every patch of the frame
  std::vector<std::int64_t> visible;  ///< strictly increasing ids of the patches fed to the encoder
  bool keep_patches = true;           ///< whether the patch tokens are needed downstream
};

struct EncodedFrame {
  Tensor slots;    ///< [S×d]
  Tensor patches;  ///< [u×d]
  std::vector<std::int64_t> patch_ids;
};

/// Packed encoder output for a batch of frames.
struct EncodedBatch {
  Tensor slots;    ///< [F·S × d] (undefined without slots)
  Tensor patches;  ///< [Σu × d] over frames with keep_patches
  std::int64_t num_slots = 0;
  struct FrameSpan {
    std::int64_t patch_offset = -1;  ///< row into `patches`, -1 if not kept
    std::vector<std::int64_t> patch_ids;
  };
  std::vector<FrameSpan> frames;

  EncodedFrame frame(std::size_t i) const;
};

/// Hard selections made by Gumbel-max pooling. When passed back in, the
/// forward pass reuses them (and the soft weights they were taken against),
/// so the straight-through surrogate can be probed by finite differences.
struct GumbelSelection {
  std::vector<Tensor> hard;
  std::vector<Tensor> soft;
};

struct EncodeOptions {
  bool with_slots = true;
  Rng* gumbel_rng = nullptr;             ///< null: no Gumbel noise (plain argmax)
  GumbelSelection* gumbel = nullptr;     ///< capture (empty) or replay (filled)
  std::vector<std::vector<Tensor>>* attention = nullptr;  ///< [layer][frame] head attention, full-token layers only
  std::vector<Tensor>* layer_states = nullptr;            ///< packed token output of each full-token layer
};

struct GumbelWeights {
  Tensor weights;  ///< forward value equals `hard`; gradient flows through `soft`
  Tensor hard;     ///< one-hot [S×n]
  Tensor soft;     ///< softmax((scores + g) / tau), detached
};

/// Straight-through Gumbel-max selection over the last axis of [S×n] scores.
/// Without `rng` no noise is added. `replay` substitutes a previously taken
/// (hard, soft) pair for the fresh selection.
GumbelWeights gumbel_max_weights(const Tensor& scores, double tau, Rng* rng, const GumbelWeights* replay = nullptr);

/// Learned single-head attention used by the SoftAttention and GumbelMax pooling methods.
struct SlotPoolHead {
  Tensor queries;  // [S×d]
  Linear key, value;

  SlotPoolHead() = default;
  SlotPoolHead(const ModelConfig& cfg, Rng& rng);
  void collect(const std::string& prefix, ParamRefs& out);
};

class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const ModelConfig& cfg, Rng& rng);

  EncodedBatch encode(std::span<const FrameInput> frames, const EncodeOptions& options = {}) const;

  /// Pools slots from per-layer token states of a single frame
  /// (layer_states[l] = [S+u × d] output of layer l) and finishes them through
  /// the remaining layers and the output norm.
  Tensor pool_slots(std::span<const Tensor> layer_states, const EncodeOptions& options = {}) const;

  /// [S×u] attention of the pooling queries over one frame's patch tokens
  /// (tokens = [S+u × d] state at pool_layer); SoftAttention and GumbelMax
  /// only, noise-free.
  Tensor pool_weights(const Tensor& frame_tokens) const;

  void collect(const std::string& prefix, ParamRefs& out);

  const ModelConfig& config() const { return cfg_; }
  Tensor& slot_table() { return slot_table_; }
  const Tensor& slot_table() const { return slot_table_; }
  std::vector<TransformerBlock>& blocks() { return blocks_; }

 private:
  Tensor pool(const Tensor& tokens, std::span<const Segment> frame_segments, const EncodeOptions& options) const;
  Tensor finish_slots(Tensor slots, std::int64_t frame_count) const;

  ModelConfig cfg_;
  Linear patch_embed_;
  Tensor slot_table_;  // [S×d]
  std::vector<TransformerBlock> blocks_;
  LayerNorm norm_;
  std::optional<SlotPoolHead> pool_head_;
};

class TemporalTransformer {
 public:
  TemporalTransformer() = default;
  TemporalTransformer(const ModelConfig& cfg, Rng& rng);

  /// Joint self-attention over packed tokens; `time_ids[i]` is the source
  /// frame index of token i; each segment is one independent clip.
  Tensor forward(const Tensor& tokens, std::span<const std::int64_t> time_ids, std::span<const Segment> clips,
                 std::vector<std::vector<Tensor>>* attention = nullptr) const;

  void collect(const std::string& prefix, ParamRefs& out);
  Tensor& time_table() { return time_table_; }

 private:
  ModelConfig cfg_;
  Tensor time_table_;  // [max_frames × d]
  std::vector<TransformerBlock> blocks_;
  LayerNorm norm_;
};

/// MAE-style decoder: a shared mask token fills hidden positions, sinusoidal
/// spatial positions are added, and a linear head regresses patch pixels.
class FrameDecoder {
 public:
  struct FrameTokens {
    std::int64_t offset = 0;               ///< first row in the contextualized matrix
    std::vector<std::int64_t> patch_ids;   ///< ids of those rows, strictly increasing
  };

  FrameDecoder() = default;
  FrameDecoder(const ModelConfig& cfg, Rng& rng);

  /// Returns [F·total_patches × patch_dim], frame-major, patches in id order.
  /// `positions` replaces the sinusoidal [total_patches × d] table when given.
  Tensor decode(const Tensor& contextualized, std::span<const FrameTokens> frames,
                const Tensor* positions = nullptr) const;

  void collect(const std::string& prefix, ParamRefs& out);
  Tensor& mask_token() { return mask_token_; }

 private:
  ModelConfig cfg_;
  Tensor mask_token_;  // [1×d]
  std::vector<TransformerBlock> blocks_;
  LayerNorm norm_;
  Linear head_;
};

/// Image encoder + temporal transformer (+ decoder while pretraining).
class IvclModel {
 public:
  IvclModel() = default;
  explicit IvclModel(const ModelConfig& cfg, bool with_decoder = true);

  const ModelConfig& config() const { return cfg_; }
  ImageEncoder& encoder() { return encoder_; }
  const ImageEncoder& encoder() const { return encoder_; }
  TemporalTransformer& temporal() { return temporal_; }
  const TemporalTransformer& temporal() const { return temporal_; }
  bool has_decoder() const { return decoder_.has_value(); }
  FrameDecoder& decoder();
  const FrameDecoder& decoder() const;
  void drop_decoder() { decoder_.reset(); }

  ParamRefs parameters();
  /// Deep copy with every parameter converted to `dtype`.
  IvclModel cast(DType dtype) const;

 private:
  ModelConfig cfg_;
  ImageEncoder encoder_;
  TemporalTransformer temporal_;
  std::optional<FrameDecoder> decoder_;
};

/// Single-frame convenience over ImageEncoder::encode.
EncodedFrame encode_image(const IvclModel& model, const Tensor& frame_patches, std::span<const std::int64_t> visible,
                          const EncodeOptions& options = {});

/// Per-frame slots (S×d) with frame indices, plus query frames' patch tokens;
/// returns the contextualized patch tokens of each query frame.
struct ContextSlots {
  std::int64_t frame_index = 0;
  Tensor slots;
};
struct QueryPatches {
  std::int64_t frame_index = 0;
  EncodedFrame frame;
};
std::vector<Tensor> temporal_forward(const IvclModel& model, std::span<const ContextSlots> context,
                                     std::span<const QueryPatches> queries);

/// Reconstructs all patches of one frame from its contextualized visible tokens.
Tensor decode_frame(const IvclModel& model, const Tensor& contextualized, std::span<const std::int64_t> patch_ids);

/// Transfer path: every frame fully visible, slots only into the temporal
/// transformer, mean over its outputs. Returns [B×d] for a batch of videos,
/// where videos[b] lists [total_patches × patch_dim] frames and time ids
/// default to 0..T-1.
Tensor encode_videos_for_transfer(const IvclModel& model, std::span<const std::vector<Tensor>> videos,
                                  const EncodeOptions& options = {},
                                  std::vector<std::vector<Tensor>>* temporal_attention = nullptr);
Tensor encode_video_for_transfer(const IvclModel& model, std::span<const Tensor> frames,
                                 const EncodeOptions& options = {});

std::vector<std::int64_t> all_patch_ids(std::int64_t total);

}  // namespace ivcl
