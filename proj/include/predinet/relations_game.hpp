#pragma once

// Procedural Relations Game scenes: polyomino and striped-square objects on a
// 3x3 grid, rendered to 36x36 RGB images and labelled by explicit predicates.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "predinet/errors.hpp"
#include "predinet/random.hpp"
#include "predinet/tensor.hpp"

namespace predinet::rg {

inline constexpr std::size_t kImageSize = 36;
inline constexpr std::size_t kChannels = 3;
inline constexpr std::size_t kGridSize = 3;
inline constexpr std::size_t kCellPixels = 12;
inline constexpr std::size_t kUnitPixels = 2;
inline constexpr std::size_t kStripeSquarePixels = 8;
inline constexpr std::size_t kStripeHeight = 2;
inline constexpr std::size_t kColoursPerSet = 25;
inline constexpr std::size_t kImageFloats = kImageSize * kImageSize * kChannels;

// CNN receptive-field grid used by content and position masks.
inline constexpr std::size_t kPatchGrid = 5;
inline constexpr std::size_t kPatchStride = 6;

struct Offset {
  int row = 0;
  int col = 0;
  friend auto operator<=>(const Offset&, const Offset&) = default;
};

using CellSet = std::vector<Offset>;

enum class Family : std::uint8_t { pentomino, hexomino, square };

struct PolyominoShape {
  std::string name;
  Family family = Family::pentomino;
  CellSet cells;  // canonical orientation
};

/// Translates to the origin and sorts.
inline CellSet normalize(CellSet cells) {
  int r0 = cells.front().row, c0 = cells.front().col;
  for (const auto& c : cells) {
    r0 = std::min(r0, c.row);
    c0 = std::min(c0, c.col);
  }
  for (auto& c : cells) {
    c.row -= r0;
    c.col -= c0;
  }
  std::sort(cells.begin(), cells.end());
  return cells;
}

/// One of the 8 symmetries of the square: rotations by k*90 degrees,
/// optionally preceded by a reflection (t >= 4).
inline CellSet dihedral_transform(const CellSet& cells, int t) {
  CellSet out = cells;
  if (t >= 4)
    for (auto& c : out) c.col = -c.col;
  for (int k = 0; k < t % 4; ++k)
    for (auto& c : out) c = {c.col, -c.row};
  return normalize(out);
}

/// Distinct orientations in transform order 0..7.
inline std::vector<CellSet> dihedral_orbit(const CellSet& cells) {
  std::vector<CellSet> orbit;
  for (int t = 0; t < 8; ++t) {
    auto c = dihedral_transform(cells, t);
    if (std::find(orbit.begin(), orbit.end(), c) == orbit.end()) orbit.push_back(std::move(c));
  }
  return orbit;
}

/// Lexicographically smallest orientation.
inline CellSet canonical(const CellSet& cells) {
  auto orbit = dihedral_orbit(cells);
  return *std::min_element(orbit.begin(), orbit.end());
}

inline bool is_four_connected(const CellSet& cells) {
  if (cells.empty()) return false;
  std::vector<bool> seen(cells.size(), false);
  std::vector<std::size_t> stack{0};
  seen[0] = true;
  std::size_t reached = 1;
  while (!stack.empty()) {
    auto i = stack.back();
    stack.pop_back();
    for (std::size_t j = 0; j < cells.size(); ++j) {
      if (seen[j]) continue;
      if (std::abs(cells[i].row - cells[j].row) + std::abs(cells[i].col - cells[j].col) == 1) {
        seen[j] = true;
        ++reached;
        stack.push_back(j);
      }
    }
  }
  return reached == cells.size();
}

// F L T U V W Z X: orbit sizes 8+8+4+4+4+4+4+1 = 37.
inline std::vector<PolyominoShape> training_pentominoes() {
  auto make = [](std::string name, CellSet cells) {
    return PolyominoShape{std::move(name), Family::pentomino, canonical(cells)};
  };
  return {
      make("F", {{0, 1}, {0, 2}, {1, 0}, {1, 1}, {2, 1}}),
      make("L", {{0, 0}, {1, 0}, {2, 0}, {3, 0}, {3, 1}}),
      make("T", {{0, 0}, {0, 1}, {0, 2}, {1, 1}, {2, 1}}),
      make("U", {{0, 0}, {0, 2}, {1, 0}, {1, 1}, {1, 2}}),
      make("V", {{0, 0}, {1, 0}, {2, 0}, {2, 1}, {2, 2}}),
      make("W", {{0, 0}, {1, 0}, {1, 1}, {2, 1}, {2, 2}}),
      make("Z", {{0, 0}, {0, 1}, {1, 1}, {2, 1}, {2, 2}}),
      make("X", {{0, 1}, {1, 0}, {1, 1}, {1, 2}, {2, 1}}),
  };
}

// One orbit-2, three orbit-4 and four orbit-8 hexominoes: 2+12+32 = 46.
// All fit in a 3x3 or 2x3 unit box.
inline std::vector<PolyominoShape> holdout_hexominoes() {
  auto make = [](std::string name, CellSet cells) {
    return PolyominoShape{std::move(name), Family::hexomino, canonical(cells)};
  };
  return {
      make("rect", {{0, 0}, {0, 1}, {0, 2}, {1, 0}, {1, 1}, {1, 2}}),
      make("stair", {{0, 0}, {0, 1}, {0, 2}, {1, 0}, {1, 1}, {2, 0}}),
      make("kite", {{0, 0}, {0, 1}, {1, 0}, {1, 1}, {1, 2}, {2, 1}}),
      make("cross", {{0, 1}, {1, 0}, {1, 1}, {1, 2}, {1, 3}, {2, 1}}),
      make("hook", {{0, 0}, {0, 1}, {0, 2}, {1, 1}, {2, 0}, {2, 1}}),
      make("cup", {{0, 0}, {0, 1}, {0, 2}, {1, 0}, {1, 2}, {2, 0}}),
      make("bolt", {{0, 0}, {0, 1}, {1, 0}, {1, 1}, {1, 2}, {2, 2}}),
      make("flag", {{0, 0}, {0, 1}, {0, 2}, {1, 0}, {1, 1}, {2, 1}}),
  };
}

struct Rgb {
  float r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
  friend auto operator<=>(const Rgb&, const Rgb&) = default;
};

inline Rgb hsv_to_rgb(double h, double s, double v) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int sector = static_cast<int>(hh);
  const double f = hh - sector;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r, g, b;
  switch (sector) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

/// 50 colours from a two-layer HSV grid. Indices 0..24 are training colours
/// (hue i/25, bright and saturated); 25..49 are held-out colours (hue offset
/// by half a step, paler). The two halves never share a hue.
inline std::vector<Rgb> palette() {
  std::vector<Rgb> colours;
  for (std::size_t i = 0; i < kColoursPerSet; ++i) colours.push_back(hsv_to_rgb(i / 25.0, 0.9, 1.0));
  for (std::size_t i = 0; i < kColoursPerSet; ++i) colours.push_back(hsv_to_rgb((i + 0.5) / 25.0, 0.55, 0.85));
  return colours;
}

enum class ObjectSetId : std::uint8_t { train_pentominoes = 0, holdout_hexominoes = 1, holdout_stripes = 2 };

inline std::string to_string(ObjectSetId id) {
  switch (id) {
    case ObjectSetId::train_pentominoes: return "train";
    case ObjectSetId::holdout_hexominoes: return "hexominoes";
    case ObjectSetId::holdout_stripes: return "stripes";
  }
  return "?";
}

inline ObjectSetId parse_object_set(const std::string& s) {
  if (s == "train" || s == "pentominoes" || s == "train_pentominoes") return ObjectSetId::train_pentominoes;
  if (s == "hexominoes" || s == "holdout_hexominoes") return ObjectSetId::holdout_hexominoes;
  if (s == "stripes" || s == "holdout_stripes") return ObjectSetId::holdout_stripes;
  throw ConfigError("unknown object set '" + s + "' (expected train, hexominoes or stripes)");
}

struct OrientedShape {
  std::size_t shape = 0;        // index into ObjectSet::shapes
  std::size_t orientation = 0;  // index within the shape's dihedral orbit
  CellSet cells;                // unit cells, normalised
};

/// Two-colour horizontal stripes for the striped-square set.
struct StripeColours {
  Rgb first;
  Rgb second;
};

struct ObjectSet {
  ObjectSetId id = ObjectSetId::train_pentominoes;
  std::vector<PolyominoShape> shapes;
  std::vector<OrientedShape> oriented_shapes;
  std::vector<Rgb> colours;                   // uniform sets
  std::vector<StripeColours> stripe_colours;  // stripes set

  bool striped() const noexcept { return id == ObjectSetId::holdout_stripes; }
  std::size_t num_shapes() const noexcept { return oriented_shapes.size(); }
  std::size_t num_colours() const noexcept { return striped() ? stripe_colours.size() : colours.size(); }
};

inline ObjectSet enumerate_object_set(ObjectSetId id) {
  ObjectSet set;
  set.id = id;
  const auto pal = palette();
  const std::vector<Rgb> held_out(pal.begin() + kColoursPerSet, pal.end());
  if (id == ObjectSetId::holdout_stripes) {
    set.shapes = {{"square", Family::square, {}}};
    set.oriented_shapes = {{0, 0, {}}};
    // Pair each held-out colour with one 7 hues away.
    for (std::size_t i = 0; i < kColoursPerSet; ++i) {
      set.stripe_colours.push_back({held_out[i], held_out[(i + 7) % kColoursPerSet]});
    }
    return set;
  }
  if (id == ObjectSetId::train_pentominoes) {
    set.shapes = training_pentominoes();
    set.colours.assign(pal.begin(), pal.begin() + kColoursPerSet);
  } else {
    set.shapes = holdout_hexominoes();
    set.colours = held_out;
  }
  for (std::size_t s = 0; s < set.shapes.size(); ++s) {
    auto orbit = dihedral_orbit(set.shapes[s].cells);
    for (std::size_t o = 0; o < orbit.size(); ++o) set.oriented_shapes.push_back({s, o, orbit[o]});
  }
  return set;
}

/// Shared immutable instance of each object set.
inline const ObjectSet& object_set(ObjectSetId id) {
  static const std::array<ObjectSet, 3> sets{enumerate_object_set(ObjectSetId::train_pentominoes),
                                             enumerate_object_set(ObjectSetId::holdout_hexominoes),
                                             enumerate_object_set(ObjectSetId::holdout_stripes)};
  return sets.at(static_cast<std::size_t>(id));
}

// ---------------------------------------------------------------------------
// Scenes

/// An object: oriented shape and colour indices plus its grid cell.
struct ObjectSpec {
  std::uint8_t shape = 0;
  std::uint8_t colour = 0;
  std::uint8_t row = 0;
  std::uint8_t col = 0;

  friend bool operator==(const ObjectSpec&, const ObjectSpec&) = default;
};

/// Identity under (shape, orientation, colour), ignoring position.
inline bool same_object(const ObjectSpec& a, const ObjectSpec& b) { return a.shape == b.shape && a.colour == b.colour; }

/// Pixel rectangle [row0, row0+h) x [col0, col0+w) occupied by an object's
/// bounding box.
struct PixelBox {
  std::size_t row0 = 0, col0 = 0, height = 0, width = 0;
};

inline PixelBox object_box(const ObjectSpec& obj, const ObjectSet& set) {
  std::size_t h, w;
  if (set.striped()) {
    h = w = kStripeSquarePixels;
  } else {
    const auto& cells = set.oriented_shapes.at(obj.shape).cells;
    int rows = 0, cols = 0;
    for (const auto& c : cells) {
      rows = std::max(rows, c.row + 1);
      cols = std::max(cols, c.col + 1);
    }
    h = static_cast<std::size_t>(rows) * kUnitPixels;
    w = static_cast<std::size_t>(cols) * kUnitPixels;
  }
  return {obj.row * kCellPixels + (kCellPixels - h) / 2, obj.col * kCellPixels + (kCellPixels - w) / 2, h, w};
}

inline void validate_objects(const std::vector<ObjectSpec>& objects, const ObjectSet& set) {
  std::array<bool, kGridSize * kGridSize> used{};
  for (const auto& o : objects) {
    if (o.row >= kGridSize || o.col >= kGridSize) throw GenerationError("object outside the 3x3 grid");
    if (o.shape >= set.num_shapes() || o.colour >= set.num_colours()) {
      throw GenerationError("object shape/colour index outside object set " + to_string(set.id));
    }
    auto& slot = used[o.row * kGridSize + o.col];
    if (slot) {
      throw GenerationError("two objects in grid cell (" + std::to_string(o.row) + "," + std::to_string(o.col) + ")");
    }
    slot = true;
  }
}

/// 36x36x3 image in [0,1] on a black background. Polyomino units are 2x2
/// pixels; striped squares are 8x8 with alternating 2-pixel stripes. Each
/// object is centred in its 12x12 grid cell.
inline Tensor<float> render_scene(const std::vector<ObjectSpec>& objects, const ObjectSet& set) {
  validate_objects(objects, set);
  Tensor<float> img({kImageSize, kImageSize, kChannels});
  auto put = [&](std::size_t r, std::size_t c, const Rgb& rgb) {
    float* px = img.data().data() + (r * kImageSize + c) * kChannels;
    px[0] = rgb.r;
    px[1] = rgb.g;
    px[2] = rgb.b;
  };
  for (const auto& o : objects) {
    const auto box = object_box(o, set);
    if (set.striped()) {
      const auto& sc = set.stripe_colours[o.colour];
      for (std::size_t r = 0; r < box.height; ++r)
        for (std::size_t c = 0; c < box.width; ++c)
          put(box.row0 + r, box.col0 + c, (r / kStripeHeight) % 2 == 0 ? sc.first : sc.second);
      continue;
    }
    const auto& rgb = set.colours[o.colour];
    for (const auto& cell : set.oriented_shapes[o.shape].cells)
      for (std::size_t dr = 0; dr < kUnitPixels; ++dr)
        for (std::size_t dc = 0; dc < kUnitPixels; ++dc)
          put(box.row0 + cell.row * kUnitPixels + dr, box.col0 + cell.col * kUnitPixels + dc, rgb);
  }
  return img;
}

// ---------------------------------------------------------------------------
// Tasks

enum class TaskKind : std::uint8_t { same, between, occurs, xoccurs, colour_shape, row_pattern, column_pattern, match_rows };

/// Equality pattern of three objects; the five set partitions of 3 elements.
enum class Pattern : std::uint8_t { AAA, AAB, ABA, ABB, ABC };

inline constexpr std::array<Pattern, 5> kAllPatterns{Pattern::AAA, Pattern::AAB, Pattern::ABA, Pattern::ABB, Pattern::ABC};

inline std::string to_string(Pattern p) {
  static const char* names[] = {"AAA", "AAB", "ABA", "ABB", "ABC"};
  return names[static_cast<int>(p)];
}

inline Pattern parse_pattern(const std::string& s) {
  for (auto p : kAllPatterns)
    if (to_string(p) == s) return p;
  throw ConfigError("unknown pattern '" + s + "' (expected AAA, AAB, ABA, ABB or ABC)");
}

struct TaskSpec {
  TaskKind kind = TaskKind::same;
  Pattern pattern = Pattern::AAA;  // row_pattern / column_pattern only

  std::size_t label_arity() const noexcept { return kind == TaskKind::colour_shape ? 4 : 2; }

  /// Stable numeric id used in dataset shards: 0-4 for the single tasks,
  /// 5-9 row patterns, 10-14 column patterns, 15 match_rows.
  std::uint32_t id() const noexcept {
    switch (kind) {
      case TaskKind::row_pattern: return 5 + static_cast<std::uint32_t>(pattern);
      case TaskKind::column_pattern: return 10 + static_cast<std::uint32_t>(pattern);
      case TaskKind::match_rows: return 15;
      default: return static_cast<std::uint32_t>(kind);
    }
  }

  static TaskSpec from_id(std::uint32_t id) {
    if (id <= 4) return {static_cast<TaskKind>(id)};
    if (id <= 9) return {TaskKind::row_pattern, static_cast<Pattern>(id - 5)};
    if (id <= 14) return {TaskKind::column_pattern, static_cast<Pattern>(id - 10)};
    if (id == 15) return {TaskKind::match_rows};
    throw DataError("unknown task id " + std::to_string(id));
  }

  friend bool operator==(const TaskSpec& a, const TaskSpec& b) { return a.id() == b.id(); }
};

inline std::string to_string(const TaskSpec& t) {
  switch (t.kind) {
    case TaskKind::same: return "same";
    case TaskKind::between: return "between";
    case TaskKind::occurs: return "occurs";
    case TaskKind::xoccurs: return "xoccurs";
    case TaskKind::colour_shape: return "colour_shape";
    case TaskKind::row_pattern: return "row_pattern:" + to_string(t.pattern);
    case TaskKind::column_pattern: return "column_pattern:" + to_string(t.pattern);
    case TaskKind::match_rows: return "match_rows";
  }
  return "?";
}

/// Accepts the names produced by to_string().
inline TaskSpec parse_task(const std::string& s) {
  const auto colon = s.find(':');
  const std::string head = s.substr(0, colon);
  if (colon != std::string::npos) {
    const Pattern p = parse_pattern(s.substr(colon + 1));
    if (head == "row_pattern") return {TaskKind::row_pattern, p};
    if (head == "column_pattern") return {TaskKind::column_pattern, p};
    throw ConfigError("unknown task '" + s + "'");
  }
  if (s == "same") return {TaskKind::same};
  if (s == "between") return {TaskKind::between};
  if (s == "occurs") return {TaskKind::occurs};
  if (s == "xoccurs") return {TaskKind::xoccurs};
  if (s == "colour_shape") return {TaskKind::colour_shape};
  if (s == "match_rows") return {TaskKind::match_rows};
  throw ConfigError("unknown task '" + s + "'");
}

/// Equality pattern of three objects in order.
inline Pattern pattern_of(const std::array<ObjectSpec, 3>& row) {
  const bool ab = same_object(row[0], row[1]);
  const bool ac = same_object(row[0], row[2]);
  const bool bc = same_object(row[1], row[2]);
  if (ab && ac) return Pattern::AAA;
  if (ab) return Pattern::AAB;
  if (ac) return Pattern::ABA;
  if (bc) return Pattern::ABB;
  return Pattern::ABC;
}

/// The 8 lines of the 3x3 grid: rows, columns and both diagonals, as
/// (row, col) triples with the middle cell in position 1.
inline const std::array<std::array<std::pair<int, int>, 3>, 8>& grid_lines() {
  static const std::array<std::array<std::pair<int, int>, 3>, 8> lines{{
      {{{0, 0}, {0, 1}, {0, 2}}},
      {{{1, 0}, {1, 1}, {1, 2}}},
      {{{2, 0}, {2, 1}, {2, 2}}},
      {{{0, 0}, {1, 0}, {2, 0}}},
      {{{0, 1}, {1, 1}, {2, 1}}},
      {{{0, 2}, {1, 2}, {2, 2}}},
      {{{0, 0}, {1, 1}, {2, 2}}},
      {{{0, 2}, {1, 1}, {2, 0}}},
  }};
  return lines;
}

namespace detail {

inline std::optional<ObjectSpec> at_cell(const std::vector<ObjectSpec>& objs, int r, int c) {
  for (const auto& o : objs)
    if (o.row == r && o.col == c) return o;
  return std::nullopt;
}

inline std::optional<std::array<ObjectSpec, 3>> full_line(const std::vector<ObjectSpec>& objs, bool row, int index) {
  std::array<ObjectSpec, 3> out;
  for (int i = 0; i < 3; ++i) {
    auto o = row ? at_cell(objs, index, i) : at_cell(objs, i, index);
    if (!o) return std::nullopt;
    out[i] = *o;
  }
  return out;
}

}  // namespace detail

/// Ground-truth label of a scene for a task, computed from the objects only.
/// Binary tasks return 1 for True. colour_shape returns 0 same shape and
/// colour, 1 same shape / different colour, 2 same colour / different
/// shape, 3 both different.
inline std::size_t evaluate_label(const TaskSpec& task, const std::vector<ObjectSpec>& objs) {
  using detail::at_cell;
  using detail::full_line;
  switch (task.kind) {
    case TaskKind::same:
      for (std::size_t i = 0; i < objs.size(); ++i)
        for (std::size_t j = i + 1; j < objs.size(); ++j)
          if (same_object(objs[i], objs[j])) return 1;
      return 0;
    case TaskKind::between:
      for (const auto& line : grid_lines()) {
        auto a = at_cell(objs, line[0].first, line[0].second);
        auto m = at_cell(objs, line[1].first, line[1].second);
        auto b = at_cell(objs, line[2].first, line[2].second);
        if (a && m && b && same_object(*a, *b)) return 1;
      }
      return 0;
    case TaskKind::occurs:
    case TaskKind::xoccurs: {
      auto top = at_cell(objs, 0, 1);
      auto bottom = full_line(objs, true, 2);
      if (!top || !bottom) return 0;
      for (int p = 0; p < 3; ++p) {
        if (!same_object((*bottom)[p], *top)) continue;
        if (task.kind == TaskKind::occurs) return 1;
        const auto& x = (*bottom)[(p + 1) % 3];
        const auto& y = (*bottom)[(p + 2) % 3];
        if (!same_object(x, y)) return 1;
      }
      return 0;
    }
    case TaskKind::colour_shape: {
      if (objs.size() != 2) throw DataError("colour_shape scenes hold exactly two objects");
      const bool shape = objs[0].shape == objs[1].shape;
      const bool colour = objs[0].colour == objs[1].colour;
      if (shape && colour) return 0;
      if (shape) return 1;
      if (colour) return 2;
      return 3;
    }
    case TaskKind::row_pattern:
    case TaskKind::column_pattern: {
      const bool rows = task.kind == TaskKind::row_pattern;
      for (int i = 0; i < 3; ++i) {
        auto line = full_line(objs, rows, i);
        if (line && pattern_of(*line) == task.pattern) return 1;
      }
      return 0;
    }
    case TaskKind::match_rows: {
      auto top = full_line(objs, true, 0);
      auto bottom = full_line(objs, true, 2);
      return top && bottom && pattern_of(*top) == pattern_of(*bottom) ? 1 : 0;
    }
  }
  return 0;
}

/// How a distractor differs from a reference object.
enum class Confounder : std::uint8_t { same_colour, same_shape, both_differ };

/// Confounders realisable in a set (the stripes set has a single shape).
inline std::vector<Confounder> applicable_confounders(const ObjectSet& set) {
  std::vector<Confounder> out;
  if (set.num_shapes() > 1) out.push_back(Confounder::same_colour);
  if (set.num_colours() > 1) out.push_back(Confounder::same_shape);
  if (set.num_shapes() > 1 && set.num_colours() > 1) out.push_back(Confounder::both_differ);
  return out;
}

inline constexpr std::int8_t kPositiveStratum = -1;
// Extra negative stratum for xoccurs: the top object occurs but the other
// two bottom objects are identical.
inline constexpr std::int8_t kDuplicatePairStratum = 3;

struct LabeledExample {
  Tensor<float> image;
  std::size_t label = 0;
  std::size_t label_arity = 2;
  std::vector<ObjectSpec> objects;
  TaskSpec task;
  ObjectSetId object_set = ObjectSetId::train_pentominoes;
  std::int8_t stratum = kPositiveStratum;  // negatives: Confounder or kDuplicatePairStratum

  std::vector<float> one_hot() const {
    std::vector<float> v(label_arity, 0.0f);
    v.at(label) = 1.0f;
    return v;
  }
};

namespace detail {

struct Sampler {
  const ObjectSet& set;
  Rng& rng;

  ObjectSpec random_object() {
    ObjectSpec o;
    o.shape = static_cast<std::uint8_t>(uniform_index(rng, set.num_shapes()));
    o.colour = static_cast<std::uint8_t>(uniform_index(rng, set.num_colours()));
    return o;
  }

  std::uint8_t other(std::size_t n, std::uint8_t not_this) {
    auto v = uniform_index(rng, n - 1);
    return static_cast<std::uint8_t>(v >= not_this ? v + 1 : v);
  }

  ObjectSpec confound(const ObjectSpec& ref, Confounder c) {
    ObjectSpec o = ref;
    if (c != Confounder::same_shape) o.shape = other(set.num_shapes(), ref.shape);
    if (c != Confounder::same_colour) o.colour = other(set.num_colours(), ref.colour);
    return o;
  }

  Confounder random_confounder() {
    const auto cs = applicable_confounders(set);
    return cs[uniform_index(rng, cs.size())];
  }

  /// An object differing from every object in `avoid`; the confounder is
  /// taken relative to avoid[0].
  ObjectSpec distinct(const std::vector<ObjectSpec>& avoid) {
    for (;;) {
      ObjectSpec o = confound(avoid.front(), random_confounder());
      bool ok = true;
      for (const auto& a : avoid) ok = ok && !same_object(o, a);
      if (ok) return o;
    }
  }

  /// Three objects whose equality pattern is `p`.
  std::array<ObjectSpec, 3> line_with_pattern(Pattern p) {
    const ObjectSpec a = random_object();
    const ObjectSpec b = distinct({a});
    const ObjectSpec c = distinct({a, b});
    switch (p) {
      case Pattern::AAA: return {a, a, a};
      case Pattern::AAB: return {a, a, b};
      case Pattern::ABA: return {a, b, a};
      case Pattern::ABB: return {a, b, b};
      case Pattern::ABC: return {a, b, c};
    }
    return {a, b, c};
  }

  Pattern other_pattern(Pattern p) {
    return kAllPatterns[other(kAllPatterns.size(), static_cast<std::uint8_t>(p))];
  }
};

inline void place(ObjectSpec& o, std::size_t row, std::size_t col) {
  o.row = static_cast<std::uint8_t>(row);
  o.col = static_cast<std::uint8_t>(col);
}

}  // namespace detail

/// Draws one example. Positive and negative examples are equally likely;
/// negatives are spread uniformly over the applicable confounder strata.
/// The label always comes from evaluate_label().
inline LabeledExample sample_example(const TaskSpec& task, const ObjectSet& set, Rng& rng) {
  detail::Sampler s{set, rng};
  LabeledExample ex;
  ex.task = task;
  ex.object_set = set.id;
  ex.label_arity = task.label_arity();
  std::size_t intended = 0;
  auto& objs = ex.objects;

  switch (task.kind) {
    case TaskKind::same: {
      const bool positive = coin(rng);
      ObjectSpec a = s.random_object(), b = a;
      if (!positive) {
        const auto c = s.random_confounder();
        b = s.confound(a, c);
        ex.stratum = static_cast<std::int8_t>(c);
      }
      auto cells = sample_without_replacement(rng, kGridSize * kGridSize, 2);
      detail::place(a, cells[0] / 3, cells[0] % 3);
      detail::place(b, cells[1] / 3, cells[1] % 3);
      objs = {a, b};
      intended = positive ? 1 : 0;
      break;
    }
    case TaskKind::between: {
      const bool positive = coin(rng);
      const auto& line = grid_lines()[uniform_index(rng, 8)];
      ObjectSpec a = s.random_object(), b = a;
      if (!positive) {
        const auto c = s.random_confounder();
        b = s.confound(a, c);
        ex.stratum = static_cast<std::int8_t>(c);
      }
      ObjectSpec m = positive ? s.distinct({a}) : s.distinct({a, b});
      if (coin(rng)) std::swap(a, b);
      detail::place(a, line[0].first, line[0].second);
      detail::place(m, line[1].first, line[1].second);
      detail::place(b, line[2].first, line[2].second);
      objs = {a, m, b};
      intended = positive ? 1 : 0;
      break;
    }
    case TaskKind::occurs:
    case TaskKind::xoccurs: {
      const bool positive = coin(rng);
      ObjectSpec top = s.random_object();
      std::array<ObjectSpec, 3> bottom;
      const std::size_t hit = uniform_index(rng, 3);
      const bool exclusive = task.kind == TaskKind::xoccurs;
      std::size_t strata = applicable_confounders(set).size() + (exclusive ? 1 : 0);
      std::size_t stratum = positive ? 0 : uniform_index(rng, strata);
      if (positive) {
        bottom[hit] = top;
        bottom[(hit + 1) % 3] = s.distinct({top});
        bottom[(hit + 2) % 3] = exclusive ? s.distinct({top, bottom[(hit + 1) % 3]}) : s.distinct({top});
      } else if (exclusive && stratum == strata - 1) {
        bottom[hit] = top;
        bottom[(hit + 1) % 3] = s.distinct({top});
        bottom[(hit + 2) % 3] = bottom[(hit + 1) % 3];
        ex.stratum = kDuplicatePairStratum;
      } else {
        const auto c = applicable_confounders(set)[stratum];
        bottom[hit] = s.confound(top, c);
        bottom[(hit + 1) % 3] = s.distinct({top});
        bottom[(hit + 2) % 3] = s.distinct({top});
        ex.stratum = static_cast<std::int8_t>(c);
      }
      detail::place(top, 0, 1);
      objs = {top};
      for (std::size_t i = 0; i < 3; ++i) {
        detail::place(bottom[i], 2, i);
        objs.push_back(bottom[i]);
      }
      intended = positive ? 1 : 0;
      break;
    }
    case TaskKind::colour_shape: {
      const auto cs = applicable_confounders(set);
      // label 0: identical; otherwise one of the applicable confounders
      const std::size_t choice = uniform_index(rng, cs.size() + 1);
      ObjectSpec a = s.random_object(), b = a;
      if (choice == 0) {
        intended = 0;
      } else {
        const auto c = cs[choice - 1];
        b = s.confound(a, c);
        intended = c == Confounder::same_shape ? 1 : c == Confounder::same_colour ? 2 : 3;
        ex.stratum = static_cast<std::int8_t>(c);
      }
      auto cells = sample_without_replacement(rng, kGridSize * kGridSize, 2);
      detail::place(a, cells[0] / 3, cells[0] % 3);
      detail::place(b, cells[1] / 3, cells[1] % 3);
      objs = {a, b};
      break;
    }
    case TaskKind::row_pattern:
    case TaskKind::column_pattern: {
      const bool positive = coin(rng);
      const Pattern p = positive ? task.pattern : s.other_pattern(task.pattern);
      auto line = s.line_with_pattern(p);
      const std::size_t index = uniform_index(rng, 3);
      for (std::size_t i = 0; i < 3; ++i) {
        if (task.kind == TaskKind::row_pattern) detail::place(line[i], index, i);
        else detail::place(line[i], i, index);
        objs.push_back(line[i]);
      }
      if (!positive) ex.stratum = static_cast<std::int8_t>(p);
      intended = positive ? 1 : 0;
      break;
    }
    case TaskKind::match_rows: {
      const bool positive = coin(rng);
      const Pattern p = kAllPatterns[uniform_index(rng, kAllPatterns.size())];
      const Pattern q = positive ? p : s.other_pattern(p);
      auto top = s.line_with_pattern(p);
      auto bottom = s.line_with_pattern(q);
      for (std::size_t i = 0; i < 3; ++i) {
        detail::place(top[i], 0, i);
        detail::place(bottom[i], 2, i);
      }
      objs.assign(top.begin(), top.end());
      objs.insert(objs.end(), bottom.begin(), bottom.end());
      intended = positive ? 1 : 0;
      break;
    }
  }

  ex.label = evaluate_label(task, objs);
  if (ex.label != intended) {
    throw GenerationError("sampler produced a " + to_string(task) + " scene whose label disagrees with its construction");
  }
  ex.image = render_scene(objs, set);
  return ex;
}

// ---------------------------------------------------------------------------
// Masks aligned with the 5x5 CNN patch grid

/// Per-patch object coverage quantised to {0, 0.5, 1}. Coverage is measured
/// over the 6x6 block at the centre of each 12x12 receptive field (the
/// pixels closer to that patch centre than to any other), counting pixels
/// inside an object's bounding box.
struct ContentMask {
  std::array<float, kPatchGrid * kPatchGrid> grid{};
  std::array<float, kPatchGrid * kPatchGrid> coverage{};
};

inline ContentMask make_content_mask(const std::vector<ObjectSpec>& objects, const ObjectSet& set) {
  std::array<bool, kImageSize * kImageSize> occupied{};
  for (const auto& o : objects) {
    const auto box = object_box(o, set);
    for (std::size_t r = 0; r < box.height; ++r)
      for (std::size_t c = 0; c < box.width; ++c) occupied[(box.row0 + r) * kImageSize + box.col0 + c] = true;
  }
  ContentMask mask;
  constexpr std::size_t block = kPatchStride;
  constexpr std::size_t margin = (kCellPixels - kPatchStride) / 2;
  for (std::size_t pr = 0; pr < kPatchGrid; ++pr)
    for (std::size_t pc = 0; pc < kPatchGrid; ++pc) {
      std::size_t hits = 0;
      for (std::size_t r = 0; r < block; ++r)
        for (std::size_t c = 0; c < block; ++c)
          hits += occupied[(pr * kPatchStride + margin + r) * kImageSize + pc * kPatchStride + margin + c] ? 1 : 0;
      const float cov = static_cast<float>(hits) / static_cast<float>(block * block);
      mask.coverage[pr * kPatchGrid + pc] = cov;
      mask.grid[pr * kPatchGrid + pc] = cov > 0.9f ? 1.0f : (hits == 0 ? 0.0f : 0.5f);
    }
  return mask;
}

inline ContentMask make_content_mask(const LabeledExample& ex) {
  return make_content_mask(ex.objects, object_set(ex.object_set));
}

/// Unique location index per patch, row-major 0..24.
inline std::array<float, kPatchGrid * kPatchGrid> make_position_mask() {
  std::array<float, kPatchGrid * kPatchGrid> m{};
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<float>(i);
  return m;
}

}  // namespace predinet::rg
