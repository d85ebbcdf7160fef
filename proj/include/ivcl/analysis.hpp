#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "ivcl/model.hpp"
#include "ivcl/toyworlds.hpp"

namespace ivcl {

struct RolloutConfig {
  double residual = 0.5;         ///< weight of the identity added to every layer
  double stochastic_tol = 1e-4;  ///< allowed |row sum − 1| of the inputs
};

/// [n×n] mean over heads of a [h×n×n] attention tensor; passes [n×n] through.
Tensor head_average(const Tensor& attention);

/// Â_L ··· Â_1 with Â = (1−r)·A + r·I, rows renormalized. F64 result.
/// Throws ContractViolation on non-square, mismatched or non-row-stochastic input.
Tensor attention_rollout(std::span<const Tensor> per_layer, const RolloutConfig& cfg = {});

/// Weights over the patch grid, row-major, summing to 1.
struct RolloutMap {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<double> weights;

  double at(std::int64_t r, std::int64_t c) const { return weights[static_cast<std::size_t>(r * cols + c)]; }
};

/// Row `slot` of a rollout over [S slots, then patches], restricted to the
/// patch columns and renormalized. A row with no patch mass gives the uniform map.
RolloutMap slot_heatmap(const Tensor& rollout, std::int64_t slot, std::int64_t num_slots, std::int64_t grid_rows,
                        std::int64_t grid_cols);

/// Rollout over the encoder's full-token layers for one fully visible frame.
Tensor encoder_rollout(const IvclModel& model, const Image& frame, const RolloutConfig& cfg = {});

/// Heat scaled by the map maximum, blended in red over the grayscale frame.
Image blend_heatmap(const RolloutMap& map, const Image& frame, double alpha = 0.6);
/// Writes blend_heatmap as binary PPM (P6, maxval 255). IoError if unwritable.
void export_heatmap(const RolloutMap& map, const Image& frame, const std::filesystem::path& path, double alpha = 0.6);
void write_ppm(const Image& image, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

/// Mass of the map inside a pixel rectangle divided by the rectangle's share
/// of the image (1 = uniform). Patches count by their overlap with the rectangle.
double region_mass_ratio(const RolloutMap& map, const CellRect& region, std::int64_t height, std::int64_t width);

/// Snitch cell of every frame, or nullopt while it is covered.
std::vector<std::optional<std::array<std::int64_t, 2>>> snitch_visibility(const ShellGameEpisode& episode);

/// Proxy for object-centric slots: among frames where the snitch is visible,
/// the fraction whose best slot puts at least `ratio` × uniform mass on its cell.
struct AlignmentReport {
  std::int64_t frames = 0;
  std::int64_t aligned = 0;
  double mean_ratio = 0.0;
  double fraction() const { return frames == 0 ? 0.0 : static_cast<double>(aligned) / static_cast<double>(frames); }
};
AlignmentReport snitch_alignment(const IvclModel& model, std::span<const ShellGameEpisode> episodes,
                                 double ratio = 2.0, const RolloutConfig& cfg = {});

}  // namespace ivcl
