#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ivcl/nn.hpp"
#include "ivcl/tensor.hpp"

namespace ivcl {

struct Image {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  std::uint8_t at(std::int64_t y, std::int64_t x, int channel) const {
    return rgb[static_cast<std::size_t>((y * width + x) * 3 + channel)];
  }
};

/// [H×W×3] image in [0,1] cut into (H/P)(W/P) patches of P·P·3 values.
Tensor image_to_patches(const Image& image, std::int64_t patch, DType dtype = DType::F32);

enum class Shape2D : std::uint8_t { Cube, Sphere, Cone };
enum class Material : std::uint8_t { Rubber, Metal };
enum class PlatformState : std::uint8_t { None, Lit, Dim, Hidden };

const char* to_string(Shape2D shape);
Shape2D parse_shape(const std::string& text);

struct SceneObject {
  Shape2D shape = Shape2D::Cube;
  int size = 1;  ///< tier 0 (small) .. 2 (large)
  std::array<std::uint8_t, 3> color{255, 255, 255};
  Material material = Material::Rubber;
  std::int64_t row = 0;
  std::int64_t col = 0;
};

/// A flat 2-D scene on a grid of cells. The platform, when present, spans the
/// bottom row of cells.
struct Scene {
  std::int64_t grid = 4;
  std::vector<SceneObject> objects;
  PlatformState platform = PlatformState::None;
};

/// Flat-shaded rasterization: every cell maps to a pixel rectangle; objects
/// are filled primitives centred in their cell, drawn smallest first.
Image render_frame(const Scene& scene, std::int64_t height, std::int64_t width);

/// Pixel rectangle [y0, y1) × [x0, x1) of a grid cell.
struct CellRect {
  std::int64_t y0, y1, x0, x1;
};
CellRect cell_rect(std::int64_t grid, std::int64_t row, std::int64_t col, std::int64_t height, std::int64_t width);

/// Tight pixel bounds [y0, y1) × [x0, x1) of the pixels render_frame fills for `object`.
CellRect object_pixel_box(const SceneObject& object, std::int64_t grid, std::int64_t height, std::int64_t width);

// ---------------------------------------------------------------------------
// Shell game

struct ShellGameConfig {
  std::int64_t grid = 4;
  std::int64_t num_objects = 5;
  std::int64_t num_frames = 24;
  double cover_rate = 0.3;
  double idle_rate = 0.2;
  std::int64_t image_size = 64;

  void validate() const;
};

struct ShellObject {
  Shape2D shape = Shape2D::Cube;
  int size = 1;
  int color = 0;  ///< palette index; 0 is the snitch's gold
  bool snitch = false;
};

enum class ShellEventKind : std::uint8_t { Idle, Move, Cover, Uncover };

struct ShellEvent {
  ShellEventKind kind = ShellEventKind::Idle;
  std::int64_t object = -1;  ///< mover / coverer / uncovering cone
  std::int64_t target = -1;  ///< covered object (Cover)
  std::int64_t row = -1;     ///< destination (Move, Uncover)
  std::int64_t col = -1;
};

/// Symbolic state. Every object stores its own cell; covered objects always
/// sit in their top-most coverer's cell.
class ShellGameState {
 public:
  ShellGameState(std::int64_t grid, std::vector<ShellObject> objects, std::vector<std::array<std::int64_t, 2>> cells);

  /// Applies one event; throws DataError if it breaks the game rules.
  void apply(const ShellEvent& event);
  bool covered(std::int64_t id) const { return covered_by_[static_cast<std::size_t>(id)] >= 0; }
  std::int64_t covered_by(std::int64_t id) const { return covered_by_[static_cast<std::size_t>(id)]; }
  std::int64_t covering(std::int64_t id) const;
  std::int64_t top_coverer(std::int64_t id) const;
  std::array<std::int64_t, 2> cell(std::int64_t id) const { return cells_[static_cast<std::size_t>(id)]; }
  std::int64_t snitch_cell() const;
  /// True if `cell` holds no uncovered object.
  bool free(std::int64_t row, std::int64_t col) const;
  /// Checks the covering forest and co-location invariants.
  void check_invariants() const;
  Scene scene() const;

  std::int64_t grid() const { return grid_; }
  const std::vector<ShellObject>& objects() const { return objects_; }

 private:
  void move_subtree(std::int64_t id, std::int64_t row, std::int64_t col);

  std::int64_t grid_;
  std::vector<ShellObject> objects_;
  std::vector<std::array<std::int64_t, 2>> cells_;
  std::vector<std::int64_t> covered_by_;
};

struct ShellGameEpisode {
  ShellGameConfig config;
  std::vector<ShellObject> objects;
  std::vector<std::array<std::int64_t, 2>> initial_cells;
  std::vector<ShellEvent> events;  ///< events[t] happens between frame t and t+1
  std::vector<Image> frames;
  std::vector<Scene> scenes;  ///< symbolic content of each frame
  std::int64_t label = 0;
  std::string trace;
};

ShellGameEpisode gen_shell_game(std::uint64_t seed, const ShellGameConfig& cfg);
/// Replays a trace text and returns the final snitch cell; checks the
/// covering invariants after every event.
std::int64_t shell_game_label_from_trace(const std::string& trace);
std::string shell_game_trace(const ShellGameEpisode& episode);
/// Cell of the snitch per frame and whether it is visible there.
std::vector<std::pair<std::int64_t, bool>> shell_game_snitch_track(const ShellGameEpisode& episode);

// ---------------------------------------------------------------------------
// Blicket

enum class QuestionType : std::uint8_t { Direct = 0, Indirect = 1, ScreenedOff = 2, BackwardBlocking = 3 };
enum class BlicketLabel : std::uint8_t { Activated = 0, Inactive = 1, Undetermined = 2 };

const char* to_string(QuestionType type);
const char* to_string(BlicketLabel label);

struct Attributes {
  int shape = 0;     ///< 0..2
  int color = 0;     ///< 0..2
  int material = 0;  ///< 0..1

  bool operator==(const Attributes&) const = default;
};

struct CompositionalSplit {
  std::vector<Attributes> train;
  std::vector<Attributes> test;
};

/// Partitions shapes × colors × materials, holding out floor(fraction · total)
/// combinations, such that every attribute value appears on both sides.
CompositionalSplit build_compositional_split(int shapes, int colors, int materials, double held_out_fraction,
                                             std::uint64_t seed);

enum class BlicketSplit : std::uint8_t { Iid, CompTrain, CompTest };

struct BlicketConfig {
  std::int64_t num_objects = 4;
  std::int64_t max_per_frame = 3;
  /// Relative weights of direct, indirect, screened-off, backward-blocking.
  std::array<double, 4> question_mix{1.0, 1.0, 1.0, 1.0};
  BlicketSplit split = BlicketSplit::Iid;
  /// Required number of lit context frames; -1 leaves it free.
  std::int64_t lit_count = -1;
  std::int64_t image_size = 64;
  std::uint64_t split_seed = 7;

  void validate() const;
};

struct ContextFrame {
  std::vector<std::int64_t> objects;  ///< sorted ids
  bool lit = false;
};

struct BlicketEpisode {
  std::vector<Attributes> objects;
  std::vector<bool> blicket;
  std::vector<std::int64_t> cells;  ///< cell index of each object (rows above the platform)
  std::vector<ContextFrame> context;
  std::vector<std::int64_t> query;
  QuestionType question_type = QuestionType::Direct;
  BlicketLabel label = BlicketLabel::Undetermined;
  std::vector<Image> frames;  ///< 6 context frames, then the query frame
  std::vector<Scene> scenes;
  std::string trace;
};

BlicketEpisode gen_blicket(std::uint64_t seed, const BlicketConfig& cfg);

/// Enumerates all 2^n blicket assignments consistent with the context frames.
/// Throws DataError when none is consistent.
BlicketLabel label_oracle(std::int64_t num_objects, const std::vector<ContextFrame>& context,
                          const std::vector<std::int64_t>& query);
/// Re-derives the label from a trace text.
BlicketLabel blicket_label_from_trace(const std::string& trace);

// ---------------------------------------------------------------------------
// Dataset files

inline constexpr std::uint8_t kShellGameQuestion = 255;

struct Episode {
  std::uint16_t label = 0;
  std::uint8_t question_type = kShellGameQuestion;
  std::vector<Image> frames;
  std::string trace;
};

struct Dataset {
  std::string config;  ///< key=value lines
  std::vector<Episode> episodes;
};

Episode to_episode(const ShellGameEpisode& e);
Episode to_episode(const BlicketEpisode& e);

/// Seed of episode `index` in a run with `seed`, independent of generation order.
std::uint64_t episode_seed(std::uint64_t seed, std::uint64_t index);

void write_dataset(const std::string& path, const Dataset& dataset);
Dataset read_dataset(const std::string& path);
std::vector<std::uint8_t> serialize_dataset(const Dataset& dataset);
Dataset parse_dataset(const std::vector<std::uint8_t>& bytes);

}  // namespace ivcl
