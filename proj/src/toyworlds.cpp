#include "ivcl/toyworlds.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

namespace ivcl {

namespace {

using Rgb = std::array<std::uint8_t, 3>;

constexpr Rgb kBackground{72, 72, 72};
constexpr Rgb kPlatformLit{255, 110, 190};
constexpr Rgb kPlatformDim{96, 40, 70};
constexpr Rgb kPlatformHidden{140, 140, 140};

// Shell-game palette; entry 0 is reserved for the snitch.
constexpr std::array<Rgb, 7> kShellPalette{{{255, 200, 0},
                                            {210, 40, 40},
                                            {40, 180, 60},
                                            {50, 90, 230},
                                            {40, 210, 210},
                                            {200, 60, 210},
                                            {235, 235, 235}}};
constexpr std::array<Rgb, 3> kBlicketColors{{{220, 50, 50}, {50, 190, 70}, {60, 100, 240}}};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

template <class T>
const T& pick(Rng& rng, const std::vector<T>& items) {
  return items[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(items.size()) - 1))];
}

void fill_pixel(Image& img, std::int64_t y, std::int64_t x, const Rgb& c) {
  auto* p = img.rgb.data() + (y * img.width + x) * 3;
  p[0] = c[0];
  p[1] = c[1];
  p[2] = c[2];
}

bool inside_shape(Shape2D shape, double dy, double dx, double half) {
  switch (shape) {
    case Shape2D::Cube:
      return std::abs(dy) <= half && std::abs(dx) <= half;
    case Shape2D::Sphere:
      return dy * dy + dx * dx <= half * half;
    case Shape2D::Cone: {
      if (dy < -half || dy > half) return false;
      const double t = (dy + half) / (2.0 * half);
      return std::abs(dx) <= t * half;
    }
  }
  return false;
}

// Calls fn(y, x, highlight) for every pixel of the object's primitive.
template <class Fn>
void for_object_pixels(const SceneObject& obj, const CellRect& r, Fn&& fn) {
  static constexpr std::array<double, 3> kHalf{0.22, 0.32, 0.45};
  const double cell = static_cast<double>(std::min(r.y1 - r.y0, r.x1 - r.x0));
  const double half = std::max(1.0, std::round(cell * kHalf[static_cast<std::size_t>(std::clamp(obj.size, 0, 2))]));
  const double cy = 0.5 * static_cast<double>(r.y0 + r.y1), cx = 0.5 * static_cast<double>(r.x0 + r.x1);
  for (std::int64_t y = r.y0; y < r.y1; ++y)
    for (std::int64_t x = r.x0; x < r.x1; ++x) {
      const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
      if (!inside_shape(obj.shape, dy, dx, half)) continue;
      fn(y, x, obj.material == Material::Metal && dy * dy + dx * dx <= half * half / 9.0);
    }
}

void draw_object(Image& img, const SceneObject& obj, const CellRect& r) {
  Rgb shine = obj.color;
  for (auto& v : shine) v = static_cast<std::uint8_t>(v + (255 - v) / 2);
  for_object_pixels(obj, r, [&](std::int64_t y, std::int64_t x, bool highlight) {
    fill_pixel(img, y, x, highlight ? shine : obj.color);
  });
}

std::vector<std::string> split_words(const std::string& line) {
  std::istringstream in(line);
  return {std::istream_iterator<std::string>(in), std::istream_iterator<std::string>()};
}

std::int64_t to_int(const std::string& s) {
  try {
    std::size_t used = 0;
    const auto v = std::stoll(s, &used);
    if (used != s.size()) throw DataError("trace: bad integer '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw DataError("trace: bad integer '" + s + "'");
  }
}

}  // namespace

Tensor image_to_patches(const Image& image, std::int64_t patch, DType dtype) {
  if (patch <= 0 || image.height % patch != 0 || image.width % patch != 0)
    throw ConfigError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                      " not divisible by patch size " + std::to_string(patch));
  const auto gw = image.width / patch, gh = image.height / patch, pd = patch * patch * 3;
  std::vector<float> out(static_cast<std::size_t>(gh * gw * pd));
  for (std::int64_t py = 0; py < gh; ++py)
    for (std::int64_t px = 0; px < gw; ++px) {
      float* dst = out.data() + (py * gw + px) * pd;
      for (std::int64_t y = 0; y < patch; ++y) {
        const std::uint8_t* src = image.rgb.data() + ((py * patch + y) * image.width + px * patch) * 3;
        for (std::int64_t j = 0; j < patch * 3; ++j) dst[y * patch * 3 + j] = static_cast<float>(src[j]) / 255.0f;
      }
    }
  return Tensor({gh * gw, pd}, std::move(out)).to(dtype);
}

const char* to_string(Shape2D shape) {
  switch (shape) {
    case Shape2D::Cube:
      return "cube";
    case Shape2D::Sphere:
      return "sphere";
    case Shape2D::Cone:
      return "cone";
  }
  return "?";
}

Shape2D parse_shape(const std::string& text) {
  if (text == "cube") return Shape2D::Cube;
  if (text == "sphere") return Shape2D::Sphere;
  if (text == "cone") return Shape2D::Cone;
  throw DataError("unknown shape '" + text + "'");
}

CellRect cell_rect(std::int64_t grid, std::int64_t row, std::int64_t col, std::int64_t height, std::int64_t width) {
  return {row * height / grid, (row + 1) * height / grid, col * width / grid, (col + 1) * width / grid};
}

CellRect object_pixel_box(const SceneObject& object, std::int64_t grid, std::int64_t height, std::int64_t width) {
  CellRect box{height, 0, width, 0};
  for_object_pixels(object, cell_rect(grid, object.row, object.col, height, width),
                    [&](std::int64_t y, std::int64_t x, bool) {
                      box.y0 = std::min(box.y0, y);
                      box.y1 = std::max(box.y1, y + 1);
                      box.x0 = std::min(box.x0, x);
                      box.x1 = std::max(box.x1, x + 1);
                    });
  return box;
}

Image render_frame(const Scene& scene, std::int64_t height, std::int64_t width) {
  if (height < scene.grid || width < scene.grid) throw ConfigError("render: image smaller than the grid");
  Image img{height, width, std::vector<std::uint8_t>(static_cast<std::size_t>(height * width * 3))};
  for (std::int64_t y = 0; y < height; ++y)
    for (std::int64_t x = 0; x < width; ++x) fill_pixel(img, y, x, kBackground);
  if (scene.platform != PlatformState::None) {
    const Rgb c = scene.platform == PlatformState::Lit   ? kPlatformLit
                  : scene.platform == PlatformState::Dim ? kPlatformDim
                                                         : kPlatformHidden;
    const auto top = cell_rect(scene.grid, scene.grid - 1, 0, height, width).y0;
    for (std::int64_t y = top; y < height; ++y)
      for (std::int64_t x = 0; x < width; ++x) fill_pixel(img, y, x, c);
  }
  std::vector<const SceneObject*> order;
  for (const auto& o : scene.objects) {
    if (o.row < 0 || o.row >= scene.grid || o.col < 0 || o.col >= scene.grid)
      throw ContractViolation("render: object outside the grid");
    order.push_back(&o);
  }
  std::stable_sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->size < b->size; });
  for (const auto* o : order) draw_object(img, *o, cell_rect(scene.grid, o->row, o->col, height, width));
  return img;
}

// ---------------------------------------------------------------------------
// Shell game

void ShellGameConfig::validate() const {
  if (grid < 2) throw ConfigError("shell game: grid must be at least 2");
  if (num_objects < 2) throw ConfigError("shell game: need at least 2 objects");
  if (num_objects >= grid * grid) throw ConfigError("shell game: too many objects for the grid");
  if (num_frames < 1) throw ConfigError("shell game: need at least one frame");
  if (cover_rate < 0 || idle_rate < 0 || cover_rate * 1.5 + idle_rate > 1.0)
    throw ConfigError("shell game: event rates must satisfy idle + 1.5 cover <= 1");
  if (image_size < grid) throw ConfigError("shell game: image smaller than grid");
}

ShellGameState::ShellGameState(std::int64_t grid, std::vector<ShellObject> objects,
                               std::vector<std::array<std::int64_t, 2>> cells)
    : grid_(grid), objects_(std::move(objects)), cells_(std::move(cells)), covered_by_(objects_.size(), -1) {
  if (cells_.size() != objects_.size()) throw DataError("shell game: one cell per object required");
  if (std::count_if(objects_.begin(), objects_.end(), [](const auto& o) { return o.snitch; }) != 1)
    throw DataError("shell game: exactly one snitch required");
  check_invariants();
}

std::int64_t ShellGameState::covering(std::int64_t id) const {
  for (std::size_t i = 0; i < covered_by_.size(); ++i)
    if (covered_by_[i] == id) return static_cast<std::int64_t>(i);
  return -1;
}

std::int64_t ShellGameState::top_coverer(std::int64_t id) const {
  std::int64_t cur = id;
  for (std::size_t steps = 0; covered_by_[static_cast<std::size_t>(cur)] >= 0; ++steps) {
    if (steps > objects_.size()) throw DataError("shell game: covering cycle");
    cur = covered_by_[static_cast<std::size_t>(cur)];
  }
  return cur;
}

std::int64_t ShellGameState::snitch_cell() const {
  for (std::size_t i = 0; i < objects_.size(); ++i)
    if (objects_[i].snitch) return cells_[i][0] * grid_ + cells_[i][1];
  throw DataError("shell game: no snitch");
}

bool ShellGameState::free(std::int64_t row, std::int64_t col) const {
  for (std::size_t i = 0; i < objects_.size(); ++i)
    if (covered_by_[i] < 0 && cells_[i][0] == row && cells_[i][1] == col) return false;
  return true;
}

void ShellGameState::move_subtree(std::int64_t id, std::int64_t row, std::int64_t col) {
  for (std::size_t i = 0; i < objects_.size(); ++i)
    if (top_coverer(static_cast<std::int64_t>(i)) == id) cells_[i] = {row, col};
}

void ShellGameState::apply(const ShellEvent& e) {
  const auto n = static_cast<std::int64_t>(objects_.size());
  auto check_id = [&](std::int64_t id) {
    if (id < 0 || id >= n) throw DataError("shell game: object id " + std::to_string(id) + " out of range");
  };
  auto check_cell = [&](std::int64_t r, std::int64_t c) {
    if (r < 0 || r >= grid_ || c < 0 || c >= grid_) throw DataError("shell game: cell outside the grid");
    if (!free(r, c)) throw DataError("shell game: destination cell is occupied");
  };
  switch (e.kind) {
    case ShellEventKind::Idle:
      break;
    case ShellEventKind::Move:
      check_id(e.object);
      if (covered(e.object)) throw DataError("shell game: a covered object cannot move on its own");
      check_cell(e.row, e.col);
      move_subtree(e.object, e.row, e.col);
      break;
    case ShellEventKind::Cover: {
      check_id(e.object);
      check_id(e.target);
      const auto& c = objects_[static_cast<std::size_t>(e.object)];
      const auto& t = objects_[static_cast<std::size_t>(e.target)];
      if (e.object == e.target || c.shape != Shape2D::Cone || covered(e.object) || covering(e.object) >= 0 ||
          covered(e.target) || t.size >= c.size)
        throw DataError("shell game: illegal cover of " + std::to_string(e.target) + " by " + std::to_string(e.object));
      const auto dest = cells_[static_cast<std::size_t>(e.target)];
      move_subtree(e.object, dest[0], dest[1]);
      covered_by_[static_cast<std::size_t>(e.target)] = e.object;
      break;
    }
    case ShellEventKind::Uncover: {
      check_id(e.object);
      const auto child = covering(e.object);
      if (child < 0 || covered(e.object)) throw DataError("shell game: illegal uncover by " + std::to_string(e.object));
      covered_by_[static_cast<std::size_t>(child)] = -1;
      check_cell(e.row, e.col);
      move_subtree(e.object, e.row, e.col);
      break;
    }
  }
  check_invariants();
}

void ShellGameState::check_invariants() const {
  const auto n = objects_.size();
  std::vector<int> children(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto by = covered_by_[i];
    if (by < 0) continue;
    if (by >= static_cast<std::int64_t>(n) || by == static_cast<std::int64_t>(i))
      throw DataError("shell game: invalid coverer");
    const auto& c = objects_[static_cast<std::size_t>(by)];
    if (c.shape != Shape2D::Cone || c.size <= objects_[i].size) throw DataError("shell game: illegal covering pair");
    if (++children[static_cast<std::size_t>(by)] > 1) throw DataError("shell game: an object covers two others");
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto top = top_coverer(static_cast<std::int64_t>(i));
    if (cells_[i] != cells_[static_cast<std::size_t>(top)])
      throw DataError("shell game: covered object " + std::to_string(i) + " not at its coverer's cell");
    if (covered_by_[i] < 0) {
      const auto& c = cells_[i];
      if (c[0] < 0 || c[0] >= grid_ || c[1] < 0 || c[1] >= grid_) throw DataError("shell game: object off the grid");
      for (std::size_t j = i + 1; j < n; ++j)
        if (covered_by_[j] < 0 && cells_[j] == c) throw DataError("shell game: two visible objects share a cell");
    }
  }
}

Scene ShellGameState::scene() const {
  Scene s;
  s.grid = grid_;
  for (std::size_t i = 0; i < objects_.size(); ++i) {
    if (covered_by_[i] >= 0) continue;
    const auto& o = objects_[i];
    s.objects.push_back({o.shape, o.size, kShellPalette[static_cast<std::size_t>(o.color)], Material::Rubber,
                         cells_[i][0], cells_[i][1]});
  }
  return s;
}

namespace {

std::vector<std::array<std::int64_t, 2>> free_cells(const ShellGameState& s) {
  std::vector<std::array<std::int64_t, 2>> out;
  for (std::int64_t r = 0; r < s.grid(); ++r)
    for (std::int64_t c = 0; c < s.grid(); ++c)
      if (s.free(r, c)) out.push_back({r, c});
  return out;
}

std::vector<ShellEvent> cover_options(const ShellGameState& s, bool snitch_stack_only) {
  std::vector<ShellEvent> out;
  const auto n = static_cast<std::int64_t>(s.objects().size());
  std::int64_t snitch = 0;
  for (std::int64_t i = 0; i < n; ++i)
    if (s.objects()[static_cast<std::size_t>(i)].snitch) snitch = i;
  const auto stack_top = s.top_coverer(snitch);
  for (std::int64_t c = 0; c < n; ++c) {
    const auto& co = s.objects()[static_cast<std::size_t>(c)];
    if (co.shape != Shape2D::Cone || s.covered(c) || s.covering(c) >= 0) continue;
    for (std::int64_t t = 0; t < n; ++t) {
      if (t == c || s.covered(t) || s.objects()[static_cast<std::size_t>(t)].size >= co.size) continue;
      if (snitch_stack_only && t != stack_top) continue;
      out.push_back({ShellEventKind::Cover, c, t, -1, -1});
    }
  }
  return out;
}

ShellEvent sample_move(const ShellGameState& s, Rng& rng) {
  std::vector<std::int64_t> movers;
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(s.objects().size()); ++i)
    if (!s.covered(i)) movers.push_back(i);
  const auto id = pick(rng, movers);
  const auto dest = pick(rng, free_cells(s));
  return {ShellEventKind::Move, id, -1, dest[0], dest[1]};
}

ShellEvent sample_event(const ShellGameState& s, const ShellGameConfig& cfg, Rng& rng) {
  const double u = uniform01(rng);
  if (u < cfg.idle_rate) return {};
  if (u < cfg.idle_rate + cfg.cover_rate) {
    auto options = cover_options(s, uniform01(rng) < 0.5);
    if (options.empty()) options = cover_options(s, false);
    if (!options.empty()) return pick(rng, options);
  } else if (u < cfg.idle_rate + 1.5 * cfg.cover_rate) {
    std::vector<std::int64_t> cones;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(s.objects().size()); ++i)
      if (!s.covered(i) && s.covering(i) >= 0) cones.push_back(i);
    if (!cones.empty()) {
      const auto id = pick(rng, cones);
      const auto dest = pick(rng, free_cells(s));
      return {ShellEventKind::Uncover, id, -1, dest[0], dest[1]};
    }
  }
  return sample_move(s, rng);
}

}  // namespace

std::string shell_game_trace(const ShellGameEpisode& e) {
  std::ostringstream out;
  out << "shell_game grid " << e.config.grid << " frames " << e.config.num_frames << "\n";
  for (std::size_t i = 0; i < e.objects.size(); ++i) {
    const auto& o = e.objects[i];
    out << "object " << i << ' ' << to_string(o.shape) << ' ' << o.size << ' ' << o.color << ' ' << (o.snitch ? 1 : 0)
        << ' ' << e.initial_cells[i][0] << ' ' << e.initial_cells[i][1] << "\n";
  }
  for (std::size_t t = 0; t < e.events.size(); ++t) {
    const auto& ev = e.events[t];
    out << "event " << t + 1 << ' ';
    switch (ev.kind) {
      case ShellEventKind::Idle:
        out << "idle";
        break;
      case ShellEventKind::Move:
        out << "move " << ev.object << ' ' << ev.row << ' ' << ev.col;
        break;
      case ShellEventKind::Cover:
        out << "cover " << ev.object << ' ' << ev.target;
        break;
      case ShellEventKind::Uncover:
        out << "uncover " << ev.object << ' ' << ev.row << ' ' << ev.col;
        break;
    }
    out << "\n";
  }
  out << "label " << e.label << "\n";
  return out.str();
}

ShellGameEpisode gen_shell_game(std::uint64_t seed, const ShellGameConfig& cfg) {
  cfg.validate();
  Rng rng(seed);
  ShellGameEpisode ep;
  ep.config = cfg;
  ep.objects.push_back({Shape2D::Sphere, 0, 0, true});
  bool has_cone = false;
  for (std::int64_t i = 1; i < cfg.num_objects; ++i) {
    ShellObject o;
    o.shape = static_cast<Shape2D>(uniform_int(rng, 0, 2));
    o.size = static_cast<int>(uniform_int(rng, 0, 2));
    o.color = static_cast<int>(uniform_int(rng, 1, static_cast<std::int64_t>(kShellPalette.size()) - 1));
    has_cone = has_cone || (o.shape == Shape2D::Cone && o.size >= 1);
    ep.objects.push_back(o);
  }
  if (!has_cone) ep.objects[1] = {Shape2D::Cone, 2, ep.objects[1].color, false};

  std::vector<std::int64_t> cells(static_cast<std::size_t>(cfg.grid * cfg.grid));
  std::iota(cells.begin(), cells.end(), 0);
  std::shuffle(cells.begin(), cells.end(), rng);
  for (std::int64_t i = 0; i < cfg.num_objects; ++i)
    ep.initial_cells.push_back({cells[static_cast<std::size_t>(i)] / cfg.grid, cells[static_cast<std::size_t>(i)] % cfg.grid});

  ShellGameState state(cfg.grid, ep.objects, ep.initial_cells);
  ep.scenes.push_back(state.scene());
  for (std::int64_t t = 1; t < cfg.num_frames; ++t) {
    const auto ev = sample_event(state, cfg, rng);
    state.apply(ev);
    ep.events.push_back(ev);
    ep.scenes.push_back(state.scene());
  }
  for (const auto& s : ep.scenes) ep.frames.push_back(render_frame(s, cfg.image_size, cfg.image_size));
  ep.label = state.snitch_cell();
  ep.trace = shell_game_trace(ep);
  return ep;
}

std::int64_t shell_game_label_from_trace(const std::string& trace) {
  std::istringstream in(trace);
  std::string line;
  std::int64_t grid = -1;
  std::vector<ShellObject> objects;
  std::vector<std::array<std::int64_t, 2>> cells;
  std::optional<ShellGameState> state;
  while (std::getline(in, line)) {
    const auto w = split_words(line);
    if (w.empty()) continue;
    if (w[0] == "shell_game") {
      if (w.size() < 3 || w[1] != "grid") throw DataError("trace: bad header");
      grid = to_int(w[2]);
    } else if (w[0] == "object") {
      if (w.size() != 8 || state) throw DataError("trace: bad object line '" + line + "'");
      objects.push_back({parse_shape(w[2]), static_cast<int>(to_int(w[3])), static_cast<int>(to_int(w[4])), to_int(w[5]) != 0});
      cells.push_back({to_int(w[6]), to_int(w[7])});
    } else if (w[0] == "event") {
      if (!state) {
        if (grid < 2) throw DataError("trace: missing header");
        state.emplace(grid, objects, cells);
      }
      if (w.size() < 3) throw DataError("trace: bad event line");
      ShellEvent ev;
      if (w[2] == "idle") {
        ev.kind = ShellEventKind::Idle;
      } else if (w[2] == "move" && w.size() == 6) {
        ev = {ShellEventKind::Move, to_int(w[3]), -1, to_int(w[4]), to_int(w[5])};
      } else if (w[2] == "cover" && w.size() == 5) {
        ev = {ShellEventKind::Cover, to_int(w[3]), to_int(w[4]), -1, -1};
      } else if (w[2] == "uncover" && w.size() == 6) {
        ev = {ShellEventKind::Uncover, to_int(w[3]), -1, to_int(w[4]), to_int(w[5])};
      } else {
        throw DataError("trace: bad event line '" + line + "'");
      }
      state->apply(ev);
    } else if (w[0] != "label") {
      throw DataError("trace: unknown line '" + line + "'");
    }
  }
  if (!state) {
    if (grid < 2) throw DataError("trace: missing header");
    state.emplace(grid, objects, cells);
  }
  return state->snitch_cell();
}

std::vector<std::pair<std::int64_t, bool>> shell_game_snitch_track(const ShellGameEpisode& e) {
  ShellGameState state(e.config.grid, e.objects, e.initial_cells);
  std::int64_t snitch = 0;
  for (std::size_t i = 0; i < e.objects.size(); ++i)
    if (e.objects[i].snitch) snitch = static_cast<std::int64_t>(i);
  std::vector<std::pair<std::int64_t, bool>> out{{state.snitch_cell(), !state.covered(snitch)}};
  for (const auto& ev : e.events) {
    state.apply(ev);
    out.emplace_back(state.snitch_cell(), !state.covered(snitch));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Blicket

const char* to_string(QuestionType type) {
  switch (type) {
    case QuestionType::Direct:
      return "direct";
    case QuestionType::Indirect:
      return "indirect";
    case QuestionType::ScreenedOff:
      return "screened_off";
    case QuestionType::BackwardBlocking:
      return "backward_blocking";
  }
  return "?";
}

const char* to_string(BlicketLabel label) {
  switch (label) {
    case BlicketLabel::Activated:
      return "activated";
    case BlicketLabel::Inactive:
      return "inactive";
    case BlicketLabel::Undetermined:
      return "undetermined";
  }
  return "?";
}

CompositionalSplit build_compositional_split(int shapes, int colors, int materials, double held_out_fraction,
                                             std::uint64_t seed) {
  if (shapes <= 0 || colors <= 0 || materials <= 0) throw ConfigError("split: attribute counts must be positive");
  std::vector<Attributes> all;
  for (int s = 0; s < shapes; ++s)
    for (int c = 0; c < colors; ++c)
      for (int m = 0; m < materials; ++m) all.push_back({s, c, m});
  const auto held = static_cast<std::size_t>(std::floor(held_out_fraction * static_cast<double>(all.size())));
  const auto widest = static_cast<std::size_t>(std::max({shapes, colors, materials}));
  if (held < widest || all.size() - held < widest)
    throw ConfigError("split: cannot hold out " + std::to_string(held) + " of " + std::to_string(all.size()) +
                      " combinations while covering every attribute value on both sides");
  auto covers = [&](const std::vector<Attributes>& v) {
    std::vector<bool> s(static_cast<std::size_t>(shapes)), c(static_cast<std::size_t>(colors)),
        m(static_cast<std::size_t>(materials));
    for (const auto& a : v) {
      s[static_cast<std::size_t>(a.shape)] = true;
      c[static_cast<std::size_t>(a.color)] = true;
      m[static_cast<std::size_t>(a.material)] = true;
    }
    auto all_true = [](const std::vector<bool>& b) { return std::all_of(b.begin(), b.end(), [](bool x) { return x; }); };
    return all_true(s) && all_true(c) && all_true(m);
  };
  Rng rng(seed);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    auto order = all;
    std::shuffle(order.begin(), order.end(), rng);
    CompositionalSplit split{{order.begin() + static_cast<std::ptrdiff_t>(held), order.end()},
                             {order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held)}};
    if (covers(split.train) && covers(split.test)) return split;
  }
  throw ConfigError("split: no covering partition found");
}

void BlicketConfig::validate() const {
  if (num_objects < 2 || num_objects > 9) throw ConfigError("blicket: num_objects must lie in [2, 9]");
  if (max_per_frame < 2) throw ConfigError("blicket: max_per_frame must be at least 2");
  if (lit_count > 6) throw ConfigError("blicket: lit_count cannot exceed the 6 context frames");
  double total = 0.0;
  for (double w : question_mix) {
    if (w < 0) throw ConfigError("blicket: question weights must be nonnegative");
    total += w;
  }
  if (total <= 0) throw ConfigError("blicket: question weights sum to zero");
  if (image_size < 4) throw ConfigError("blicket: image too small");
}

BlicketLabel label_oracle(std::int64_t num_objects, const std::vector<ContextFrame>& context,
                          const std::vector<std::int64_t>& query) {
  if (num_objects < 0 || num_objects > 16) throw ContractViolation("label_oracle: at most 16 objects");
  auto lights = [](std::uint32_t mask, const std::vector<std::int64_t>& objs) {
    for (auto o : objs)
      if (mask >> o & 1u) return true;
    return false;
  };
  for (const auto& f : context)
    for (auto o : f.objects)
      if (o < 0 || o >= num_objects) throw DataError("label_oracle: object id out of range");
  for (auto o : query)
    if (o < 0 || o >= num_objects) throw DataError("label_oracle: object id out of range");
  bool any = false, all_on = true, all_off = true;
  for (std::uint32_t mask = 0; mask < (1u << num_objects); ++mask) {
    bool consistent = true;
    for (const auto& f : context)
      if (lights(mask, f.objects) != f.lit) {
        consistent = false;
        break;
      }
    if (!consistent) continue;
    any = true;
    if (lights(mask, query))
      all_off = false;
    else
      all_on = false;
  }
  if (!any) throw DataError("label_oracle: no blicket assignment explains the context frames");
  if (all_on) return BlicketLabel::Activated;
  if (all_off) return BlicketLabel::Inactive;
  return BlicketLabel::Undetermined;
}

namespace {

std::vector<std::int64_t> random_subset(Rng& rng, const std::vector<std::int64_t>& pool, std::int64_t max_size) {
  auto items = pool;
  std::shuffle(items.begin(), items.end(), rng);
  const auto k = uniform_int(rng, 1, std::min<std::int64_t>(max_size, static_cast<std::int64_t>(items.size())));
  items.resize(static_cast<std::size_t>(k));
  std::sort(items.begin(), items.end());
  return items;
}

bool lit_by(const std::vector<bool>& blicket, const std::vector<std::int64_t>& objs) {
  return std::any_of(objs.begin(), objs.end(), [&](auto o) { return blicket[static_cast<std::size_t>(o)]; });
}

bool appears_in(const std::vector<ContextFrame>& ctx, const std::vector<std::int64_t>& objs) {
  return std::any_of(ctx.begin(), ctx.end(), [&](const auto& f) { return f.objects == objs; });
}

std::vector<std::vector<std::int64_t>> all_subsets(std::int64_t n, std::int64_t max_size) {
  std::vector<std::vector<std::int64_t>> out;
  for (std::uint32_t mask = 1; mask < (1u << n); ++mask) {
    if (std::popcount(mask) > max_size) continue;
    std::vector<std::int64_t> s;
    for (std::int64_t i = 0; i < n; ++i)
      if (mask >> i & 1u) s.push_back(i);
    out.push_back(std::move(s));
  }
  return out;
}

// Builds contexts and a query for the requested question type; false if the
// sampled assignment cannot host it.
bool construct(QuestionType type, const BlicketConfig& cfg, const std::vector<bool>& blicket, Rng& rng,
               std::vector<ContextFrame>& ctx, std::vector<std::int64_t>& query) {
  const auto n = cfg.num_objects;
  std::vector<std::int64_t> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  ctx.clear();
  auto add_frame = [&](std::vector<std::int64_t> objs) { ctx.push_back({objs, lit_by(blicket, objs)}); };

  if (type == QuestionType::Direct || type == QuestionType::Indirect) {
    for (int i = 0; i < 6; ++i) add_frame(random_subset(rng, ids, cfg.max_per_frame));
    if (type == QuestionType::Direct) {
      const bool want_lit = uniform01(rng) < 0.5;
      std::vector<std::int64_t> choices;
      for (std::int64_t i = 0; i < 6; ++i)
        if (ctx[static_cast<std::size_t>(i)].lit == want_lit) choices.push_back(i);
      if (choices.empty()) return false;
      query = ctx[static_cast<std::size_t>(pick(rng, choices))].objects;
      return true;
    }
    const auto want = uniform01(rng) < 0.8 ? BlicketLabel::Inactive : BlicketLabel::Activated;
    std::vector<std::vector<std::int64_t>> options;
    for (auto& s : all_subsets(n, cfg.max_per_frame))
      if (!appears_in(ctx, s) && label_oracle(n, ctx, s) == want) options.push_back(s);
    if (options.empty()) return false;
    query = pick(rng, options);
    return true;
  }

  // Screened-off / backward-blocking: blicket A proven alone, B seen only beside A.
  std::vector<std::int64_t> blickets, others;
  for (std::int64_t i = 0; i < n; ++i) (blicket[static_cast<std::size_t>(i)] ? blickets : others).push_back(i);
  if (blickets.empty()) return false;
  const auto a = pick(rng, blickets);
  std::vector<std::int64_t> rest;
  for (auto i : ids)
    if (i != a) rest.push_back(i);
  const auto b = pick(rng, rest);
  std::vector<std::int64_t> without_b;
  for (auto i : ids)
    if (i != b) without_b.push_back(i);
  const std::vector<std::int64_t> alone{a};
  std::vector<std::int64_t> pair{std::min(a, b), std::max(a, b)};
  std::int64_t p = uniform_int(rng, 0, 5), q = uniform_int(rng, 0, 4);
  if (q >= p) ++q;
  const bool blocking = type == QuestionType::BackwardBlocking;
  if ((p < q) == blocking) std::swap(p, q);  // screened-off: A alone first; blocking: pair first
  ctx.resize(6);
  for (std::int64_t i = 0; i < 6; ++i) {
    std::vector<std::int64_t> objs = i == p ? alone : i == q ? pair : random_subset(rng, without_b, cfg.max_per_frame);
    ctx[static_cast<std::size_t>(i)] = {objs, lit_by(blicket, objs)};
  }
  if (blocking) {
    query = {b};
    return true;
  }
  // Query: A with company, a combination never shown.
  std::vector<std::vector<std::int64_t>> options;
  for (auto& s : all_subsets(n, cfg.max_per_frame))
    if (s.size() >= 2 && std::find(s.begin(), s.end(), a) != s.end() && !appears_in(ctx, s)) options.push_back(s);
  if (options.empty()) return false;
  query = pick(rng, options);
  return true;
}

std::string blicket_trace(const BlicketEpisode& e, BlicketSplit split) {
  static const char* kSplit[] = {"iid", "comp_train", "comp_test"};
  std::ostringstream out;
  out << "blicket objects " << e.objects.size() << " split " << kSplit[static_cast<int>(split)] << "\n";
  for (std::size_t i = 0; i < e.objects.size(); ++i) {
    const auto& o = e.objects[i];
    out << "object " << i << ' ' << o.shape << ' ' << o.color << ' ' << o.material << ' ' << (e.blicket[i] ? 1 : 0) << ' '
        << e.cells[i] << "\n";
  }
  for (std::size_t k = 0; k < e.context.size(); ++k) {
    out << "context " << k << " lit " << (e.context[k].lit ? 1 : 0) << " objects";
    for (auto o : e.context[k].objects) out << ' ' << o;
    out << "\n";
  }
  out << "query objects";
  for (auto o : e.query) out << ' ' << o;
  out << "\ntype " << to_string(e.question_type) << "\nlabel " << to_string(e.label) << "\n";
  return out.str();
}

Scene blicket_scene(const BlicketEpisode& e, const std::vector<std::int64_t>& objs, PlatformState platform) {
  Scene s;
  s.grid = 4;
  s.platform = platform;
  for (auto id : objs) {
    const auto& a = e.objects[static_cast<std::size_t>(id)];
    const auto cell = e.cells[static_cast<std::size_t>(id)];
    s.objects.push_back({static_cast<Shape2D>(a.shape), 1, kBlicketColors[static_cast<std::size_t>(a.color)],
                         static_cast<Material>(a.material), cell / s.grid, cell % s.grid});
  }
  return s;
}

}  // namespace

BlicketEpisode gen_blicket(std::uint64_t seed, const BlicketConfig& cfg) {
  cfg.validate();
  Rng rng(seed);
  std::vector<Attributes> pool;
  if (cfg.split == BlicketSplit::Iid) {
    for (int s = 0; s < 3; ++s)
      for (int c = 0; c < 3; ++c)
        for (int m = 0; m < 2; ++m) pool.push_back({s, c, m});
  } else {
    auto split = build_compositional_split(3, 3, 2, 0.25, cfg.split_seed);
    pool = cfg.split == BlicketSplit::CompTrain ? split.train : split.test;
  }
  if (static_cast<std::int64_t>(pool.size()) < cfg.num_objects)
    throw ConfigError("blicket: split has only " + std::to_string(pool.size()) + " attribute combinations for " +
                      std::to_string(cfg.num_objects) + " objects");

  std::discrete_distribution<int> mix(cfg.question_mix.begin(), cfg.question_mix.end());
  const auto type = static_cast<QuestionType>(mix(rng));
  const auto n = cfg.num_objects;
  for (int attempt = 0; attempt < 100; ++attempt) {
    BlicketEpisode ep;
    ep.question_type = type;
    std::shuffle(pool.begin(), pool.end(), rng);
    ep.objects.assign(pool.begin(), pool.begin() + n);
    std::vector<std::int64_t> cells(12);
    std::iota(cells.begin(), cells.end(), 0);
    std::shuffle(cells.begin(), cells.end(), rng);
    ep.cells.assign(cells.begin(), cells.begin() + n);
    ep.blicket.resize(static_cast<std::size_t>(n));
    for (auto&& b : ep.blicket) b = uniform01(rng) < 0.5;
    const auto blickets = std::count(ep.blicket.begin(), ep.blicket.end(), true);
    if (blickets == 0 || blickets == n) continue;
    if (!construct(type, cfg, ep.blicket, rng, ep.context, ep.query)) continue;
    const auto lit = std::count_if(ep.context.begin(), ep.context.end(), [](const auto& f) { return f.lit; });
    if (cfg.lit_count >= 0 && lit != cfg.lit_count) continue;
    ep.label = label_oracle(n, ep.context, ep.query);
    if (type == QuestionType::BackwardBlocking && ep.label != BlicketLabel::Undetermined) continue;
    if (type == QuestionType::ScreenedOff && ep.label != BlicketLabel::Activated) continue;
    for (const auto& f : ep.context)
      ep.scenes.push_back(blicket_scene(ep, f.objects, f.lit ? PlatformState::Lit : PlatformState::Dim));
    ep.scenes.push_back(blicket_scene(ep, ep.query, PlatformState::Hidden));
    for (const auto& s : ep.scenes) ep.frames.push_back(render_frame(s, cfg.image_size, cfg.image_size));
    ep.trace = blicket_trace(ep, cfg.split);
    return ep;
  }
  throw DataError(std::string("blicket: could not construct a ") + to_string(type) +
                  " question in 100 attempts (seed " + std::to_string(seed) + ")");
}

BlicketLabel blicket_label_from_trace(const std::string& trace) {
  std::istringstream in(trace);
  std::string line;
  std::int64_t n = -1;
  std::vector<ContextFrame> ctx;
  std::vector<std::int64_t> query;
  bool have_query = false;
  while (std::getline(in, line)) {
    const auto w = split_words(line);
    if (w.empty()) continue;
    if (w[0] == "blicket") {
      if (w.size() < 3) throw DataError("trace: bad header");
      n = to_int(w[2]);
    } else if (w[0] == "context") {
      if (w.size() < 5 || w[2] != "lit" || w[4] != "objects") throw DataError("trace: bad context line");
      ContextFrame f{{}, to_int(w[3]) != 0};
      for (std::size_t i = 5; i < w.size(); ++i) f.objects.push_back(to_int(w[i]));
      ctx.push_back(std::move(f));
    } else if (w[0] == "query") {
      for (std::size_t i = 2; i < w.size(); ++i) query.push_back(to_int(w[i]));
      have_query = true;
    } else if (w[0] != "object" && w[0] != "type" && w[0] != "label") {
      throw DataError("trace: unknown line '" + line + "'");
    }
  }
  if (n < 0 || !have_query) throw DataError("trace: incomplete blicket trace");
  return label_oracle(n, ctx, query);
}

// ---------------------------------------------------------------------------
// Dataset files

Episode to_episode(const ShellGameEpisode& e) {
  return {static_cast<std::uint16_t>(e.label), kShellGameQuestion, e.frames, e.trace};
}

Episode to_episode(const BlicketEpisode& e) {
  return {static_cast<std::uint16_t>(e.label), static_cast<std::uint8_t>(e.question_type), e.frames, e.trace};
}

std::uint64_t episode_seed(std::uint64_t seed, std::uint64_t index) { return splitmix64(seed ^ splitmix64(index)); }

namespace {

constexpr std::uint32_t kDatasetVersion = 1;

template <class T>
void put(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(value) >> (8 * i)));
}

void put_text(std::vector<std::uint8_t>& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}
  template <class T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  std::string text() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  void raw(std::uint8_t* dst, std::size_t n) {
    need(n);
    std::copy_n(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), n, dst);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError("dataset: truncated file");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_dataset(const Dataset& dataset) {
  std::vector<std::uint8_t> out{'I', 'V', 'T', 'W'};
  put<std::uint32_t>(out, kDatasetVersion);
  put_text(out, dataset.config);
  put<std::uint64_t>(out, dataset.episodes.size());
  for (const auto& e : dataset.episodes) {
    if (e.frames.empty()) throw DataError("dataset: episode without frames");
    const auto h = e.frames[0].height, w = e.frames[0].width;
    if (e.frames.size() > 0xFFFF || h > 0xFFFF || w > 0xFFFF) throw DataError("dataset: episode too large");
    put<std::uint16_t>(out, e.label);
    put<std::uint8_t>(out, e.question_type);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(e.frames.size()));
    put<std::uint16_t>(out, static_cast<std::uint16_t>(h));
    put<std::uint16_t>(out, static_cast<std::uint16_t>(w));
    for (const auto& f : e.frames) {
      if (f.height != h || f.width != w) throw DataError("dataset: frames of one episode differ in size");
      out.insert(out.end(), f.rgb.begin(), f.rgb.end());
    }
    put_text(out, e.trace);
  }
  return out;
}

Dataset parse_dataset(const std::vector<std::uint8_t>& bytes) {
  Reader in(bytes);
  char magic[4];
  for (auto& c : magic) c = static_cast<char>(in.get<std::uint8_t>());
  if (std::string(magic, 4) != "IVTW") throw DataError("dataset: bad magic");
  const auto version = in.get<std::uint32_t>();
  if (version != kDatasetVersion) throw DataError("dataset: unsupported version " + std::to_string(version));
  Dataset d;
  d.config = in.text();
  const auto count = in.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    Episode e;
    e.label = in.get<std::uint16_t>();
    e.question_type = in.get<std::uint8_t>();
    const auto frames = in.get<std::uint16_t>();
    const std::int64_t h = in.get<std::uint16_t>(), w = in.get<std::uint16_t>();
    for (std::uint16_t f = 0; f < frames; ++f) {
      Image img{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w * 3))};
      in.raw(img.rgb.data(), img.rgb.size());
      e.frames.push_back(std::move(img));
    }
    e.trace = in.text();
    d.episodes.push_back(std::move(e));
  }
  if (!in.done()) throw DataError("dataset: trailing bytes");
  return d;
}

void write_dataset(const std::string& path, const Dataset& dataset) {
  const auto bytes = serialize_dataset(dataset);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_dataset(bytes);
}

}  // namespace ivcl
