#include "ivcl/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "ivcl/tape.hpp"

namespace ivcl {

Tensor head_average(const Tensor& attention) {
  if (attention.shape().size() == 2) return attention.to(DType::F64);
  if (attention.shape().size() != 3 || attention.dim(1) != attention.dim(2))
    throw ShapeError("head_average: expected [h x n x n], got " + to_string(attention.shape()));
  const auto h = attention.dim(0), nn = attention.dim(1) * attention.dim(2);
  std::vector<double> out(static_cast<std::size_t>(nn), 0.0);
  for (std::int64_t k = 0; k < h; ++k)
    for (std::int64_t i = 0; i < nn; ++i) out[static_cast<std::size_t>(i)] += attention.value(k * nn + i);
  for (auto& v : out) v /= static_cast<double>(h);
  return Tensor({attention.dim(1), attention.dim(2)}, std::move(out));
}

Tensor attention_rollout(std::span<const Tensor> per_layer, const RolloutConfig& cfg) {
  if (per_layer.empty()) throw ContractViolation("attention_rollout: no layers");
  if (!(cfg.residual >= 0.0 && cfg.residual <= 1.0)) throw ConfigError("attention_rollout: residual outside [0, 1]");
  const auto n = per_layer[0].shape().size() == 2 ? per_layer[0].dim(0) : -1;
  const auto sz = static_cast<std::size_t>(n);
  std::vector<double> result, layer(sz * sz), next(sz * sz);
  for (std::size_t l = 0; l < per_layer.size(); ++l) {
    const Tensor& a = per_layer[l];
    if (a.shape() != Shape{n, n})
      throw ContractViolation("attention_rollout: layer " + std::to_string(l) + " is " + to_string(a.shape()) +
                              ", expected square " + std::to_string(n));
    for (std::size_t i = 0; i < sz; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < sz; ++j) {
        const double v = a.value(static_cast<std::int64_t>(i * sz + j));
        if (!(v >= 0.0)) throw ContractViolation("attention_rollout: negative or NaN weight in layer " + std::to_string(l));
        sum += v;
      }
      if (std::abs(sum - 1.0) > cfg.stochastic_tol)
        throw ContractViolation("attention_rollout: layer " + std::to_string(l) + " row " + std::to_string(i) +
                                " sums to " + std::to_string(sum));
      double norm = 0.0;
      for (std::size_t j = 0; j < sz; ++j) {
        const double v = (1.0 - cfg.residual) * a.value(static_cast<std::int64_t>(i * sz + j)) +
                         (i == j ? cfg.residual : 0.0);
        layer[i * sz + j] = v;
        norm += v;
      }
      for (std::size_t j = 0; j < sz; ++j) layer[i * sz + j] /= norm;
    }
    if (l == 0) {
      result = layer;
      continue;
    }
    // result ← Â_l · result
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t i = 0; i < sz; ++i)
      for (std::size_t k = 0; k < sz; ++k) {
        const double w = layer[i * sz + k];
        if (w == 0.0) continue;
        for (std::size_t j = 0; j < sz; ++j) next[i * sz + j] += w * result[k * sz + j];
      }
    result.swap(next);
  }
  return Tensor({n, n}, std::move(result));
}

RolloutMap slot_heatmap(const Tensor& rollout, std::int64_t slot, std::int64_t num_slots, std::int64_t grid_rows,
                        std::int64_t grid_cols) {
  const auto patches = grid_rows * grid_cols;
  if (rollout.shape() != Shape{num_slots + patches, num_slots + patches})
    throw ShapeError("slot_heatmap: rollout " + to_string(rollout.shape()) + " does not fit " +
                     std::to_string(num_slots) + " slots and a " + std::to_string(grid_rows) + "x" +
                     std::to_string(grid_cols) + " grid");
  if (slot < 0 || slot >= num_slots) throw IndexError("slot_heatmap: slot " + std::to_string(slot) + " out of range");
  RolloutMap map{grid_rows, grid_cols, std::vector<double>(static_cast<std::size_t>(patches))};
  const auto n = num_slots + patches;
  double total = 0.0;
  for (std::int64_t p = 0; p < patches; ++p) {
    map.weights[static_cast<std::size_t>(p)] = rollout.value(slot * n + num_slots + p);
    total += map.weights[static_cast<std::size_t>(p)];
  }
  for (auto& w : map.weights) w = total > 0.0 ? w / total : 1.0 / static_cast<double>(patches);
  return map;
}

Tensor encoder_rollout(const IvclModel& model, const Image& frame, const RolloutConfig& cfg) {
  const auto& mc = model.config();
  NoGradGuard no_grad;
  std::vector<FrameInput> input{{image_to_patches(frame, mc.patch_size), all_patch_ids(mc.total_patches()), false}};
  std::vector<std::vector<Tensor>> attention;
  EncodeOptions options;
  options.attention = &attention;
  model.encoder().encode(input, options);
  std::vector<Tensor> layers;
  for (const auto& per_frame : attention) layers.push_back(head_average(per_frame.at(0)));
  return attention_rollout(layers, cfg);
}

Image blend_heatmap(const RolloutMap& map, const Image& frame, double alpha) {
  if (frame.height % map.rows != 0 || frame.width % map.cols != 0)
    throw ShapeError("blend_heatmap: " + std::to_string(map.rows) + "x" + std::to_string(map.cols) +
                     " map does not tile a " + std::to_string(frame.height) + "x" + std::to_string(frame.width) + " frame");
  const double peak = *std::max_element(map.weights.begin(), map.weights.end());
  const auto ph = frame.height / map.rows, pw = frame.width / map.cols;
  Image out{frame.height, frame.width, std::vector<std::uint8_t>(frame.rgb.size())};
  for (std::int64_t y = 0; y < frame.height; ++y)
    for (std::int64_t x = 0; x < frame.width; ++x) {
      const double gray = 0.299 * frame.at(y, x, 0) + 0.587 * frame.at(y, x, 1) + 0.114 * frame.at(y, x, 2);
      const double heat = peak > 0.0 ? alpha * map.at(y / ph, x / pw) / peak : 0.0;
      const std::array<double, 3> tint{255.0, 0.0, 0.0};
      for (int c = 0; c < 3; ++c) {
        const double v = (1.0 - heat) * gray + heat * tint[static_cast<std::size_t>(c)];
        out.rgb[static_cast<std::size_t>((y * frame.width + x) * 3 + c)] =
            static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  return out;
}

void write_ppm(const Image& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
  if (!out) throw IoError("write to " + path.string() + " failed");
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  Image img;
  int maxval = 0;
  in >> magic >> img.width >> img.height >> maxval;
  if (magic != "P6" || maxval != 255 || img.width <= 0 || img.height <= 0)
    throw DataError(path.string() + ": not a binary 8-bit PPM");
  in.get();
  img.rgb.resize(static_cast<std::size_t>(img.width * img.height * 3));
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.rgb.size())) throw DataError(path.string() + ": truncated");
  return img;
}

void export_heatmap(const RolloutMap& map, const Image& frame, const std::filesystem::path& path, double alpha) {
  write_ppm(blend_heatmap(map, frame, alpha), path);
}

double region_mass_ratio(const RolloutMap& map, const CellRect& region, std::int64_t height, std::int64_t width) {
  const auto ph = height / map.rows, pw = width / map.cols;
  double mass = 0.0;
  for (std::int64_t r = 0; r < map.rows; ++r)
    for (std::int64_t c = 0; c < map.cols; ++c) {
      const auto oy = std::max<std::int64_t>(0, std::min(region.y1, (r + 1) * ph) - std::max(region.y0, r * ph));
      const auto ox = std::max<std::int64_t>(0, std::min(region.x1, (c + 1) * pw) - std::max(region.x0, c * pw));
      mass += map.at(r, c) * static_cast<double>(oy * ox) / static_cast<double>(ph * pw);
    }
  const double share = static_cast<double>((region.y1 - region.y0) * (region.x1 - region.x0)) /
                       static_cast<double>(height * width);
  return mass / share;
}

std::vector<std::optional<std::array<std::int64_t, 2>>> snitch_visibility(const ShellGameEpisode& episode) {
  ShellGameState state(episode.config.grid, episode.objects, episode.initial_cells);
  std::int64_t snitch = -1;
  for (std::size_t i = 0; i < episode.objects.size(); ++i)
    if (episode.objects[i].snitch) snitch = static_cast<std::int64_t>(i);
  if (snitch < 0) throw DataError("shell game episode has no snitch");
  std::vector<std::optional<std::array<std::int64_t, 2>>> out;
  for (std::size_t t = 0; t < episode.frames.size(); ++t) {
    if (t > 0) state.apply(episode.events[t - 1]);
    if (state.covered(snitch))
      out.emplace_back(std::nullopt);
    else
      out.emplace_back(state.cell(snitch));
  }
  return out;
}

AlignmentReport snitch_alignment(const IvclModel& model, std::span<const ShellGameEpisode> episodes, double ratio,
                                 const RolloutConfig& cfg) {
  const auto& mc = model.config();
  const auto grid = mc.image_size / mc.patch_size;
  AlignmentReport report;
  double ratio_sum = 0.0;
  for (const auto& ep : episodes) {
    const auto visible = snitch_visibility(ep);
    for (std::size_t t = 0; t < visible.size(); ++t) {
      if (!visible[t]) continue;
      const auto& frame = ep.frames[t];
      const Tensor rollout = encoder_rollout(model, frame, cfg);
      const auto cell = cell_rect(ep.config.grid, (*visible[t])[0], (*visible[t])[1], frame.height, frame.width);
      double best = 0.0;
      for (std::int64_t s = 0; s < mc.num_slots; ++s)
        best = std::max(best, region_mass_ratio(slot_heatmap(rollout, s, mc.num_slots, grid, grid), cell, frame.height,
                                                frame.width));
      ++report.frames;
      report.aligned += best >= ratio;
      ratio_sum += best;
    }
  }
  report.mean_ratio = report.frames == 0 ? 0.0 : ratio_sum / static_cast<double>(report.frames);
  return report;
}

}  // namespace ivcl
