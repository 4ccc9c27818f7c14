#include "wheelleg/terrain.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "wheelleg/rng.hpp"

namespace wheelleg {
namespace {

std::size_t cell_count(double length, double cell_size) {
  return static_cast<std::size_t>(std::llround(length / cell_size)) + 1;
}

Heightfield make_field(double length, double cell_size, TerrainKind kind) {
  Heightfield h;
  h.cell_size = cell_size;
  h.kind = kind;
  h.heights.assign(cell_count(length, cell_size), 0.0);
  return h;
}

void check_params(const TerrainParams& p) {
  if (!(p.cell_size > 0.0)) throw ArgumentError("terrain cell_size must be > 0");
  if (!(p.length > p.start_pad)) throw ArgumentError("terrain length must exceed start_pad");
  if (p.kinds.empty()) throw ArgumentError("terrain kinds must not be empty");
}

// Correlated noise: uniform knots every `spacing` metres, linearly blended.
std::vector<double> correlated_noise(std::size_t n, double cell_size, double amplitude, double spacing,
                                     Rng& rng) {
  const double cells_per_knot = spacing / cell_size;
  const auto knots = static_cast<std::size_t>(std::ceil(static_cast<double>(n) / cells_per_knot)) + 2;
  std::vector<double> k(knots);
  for (auto& v : k) v = rng.uniform(-amplitude, amplitude);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double s = static_cast<double>(i) / cells_per_knot;
    const auto j = static_cast<std::size_t>(s);
    const double t = s - static_cast<double>(j);
    out[i] = (1.0 - t) * k[j] + t * k[j + 1];
  }
  return out;
}

constexpr double kRoughKnotSpacing = 0.25;

}  // namespace

std::string to_string(TerrainKind k) {
  switch (k) {
    case TerrainKind::kFlat: return "flat";
    case TerrainKind::kSlopeUp: return "slope-up";
    case TerrainKind::kSlopeDown: return "slope-down";
    case TerrainKind::kStairsUp: return "stairs-up";
    case TerrainKind::kStairsDown: return "stairs-down";
    case TerrainKind::kRough: return "rough";
  }
  return "flat";
}

TerrainKind terrain_kind_from_string(const std::string& s) {
  for (TerrainKind k : all_terrain_kinds()) {
    if (to_string(k) == s) return k;
  }
  throw ArgumentError("unknown terrain kind '" + s + "'");
}

std::vector<TerrainKind> all_terrain_kinds() {
  return {TerrainKind::kFlat,     TerrainKind::kSlopeUp,    TerrainKind::kSlopeDown,
          TerrainKind::kStairsUp, TerrainKind::kStairsDown, TerrainKind::kRough};
}

double slope_grade_for_level(int level) { return std::min(0.05 * level, 0.4); }

double stair_rise_for_level(int level) { return std::max(0.05 + 0.015 * (level - 1), 0.02); }

double rough_amplitude_for_level(int level) { return 0.01 * level; }

Heightfield flat(double length, double height, double cell_size) {
  if (!(cell_size > 0.0) || !(length >= 0.0)) throw ArgumentError("flat terrain needs cell_size > 0, length >= 0");
  Heightfield h = make_field(length, cell_size, TerrainKind::kFlat);
  std::fill(h.heights.begin(), h.heights.end(), height);
  return h;
}

Heightfield stairs(double rise, double run, int n_steps, StairDirection direction, double cell_size,
                   double pad) {
  if (!(rise > 0.0)) throw ArgumentError("stair rise must be > 0");
  if (n_steps < 1) throw ArgumentError("stairs need at least one step");
  if (!(cell_size > 0.0)) throw ArgumentError("cell_size must be > 0");
  if (!(run > cell_size)) {
    throw ArgumentError("stair run " + std::to_string(run) + " m must exceed the cell size " +
                        std::to_string(cell_size) + " m");
  }
  const auto run_cells = static_cast<std::size_t>(std::llround(run / cell_size));
  const auto pad_cells = static_cast<std::size_t>(std::llround(pad / cell_size));
  const std::size_t n = 2 * pad_cells + static_cast<std::size_t>(n_steps) * run_cells + 1;

  Heightfield h;
  h.cell_size = cell_size;
  h.kind = direction == StairDirection::kUp ? TerrainKind::kStairsUp : TerrainKind::kStairsDown;
  h.heights.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t step = 0;
    if (i > pad_cells) step = std::min<std::size_t>((i - pad_cells - 1) / run_cells + 1, n_steps);
    h.heights[i] = static_cast<double>(step) * rise;
  }
  if (direction == StairDirection::kDown) std::reverse(h.heights.begin(), h.heights.end());
  return h;
}

Heightfield slope(double grade, bool up, const TerrainParams& p) {
  check_params(p);
  Heightfield h = make_field(p.length, p.cell_size, up ? TerrainKind::kSlopeUp : TerrainKind::kSlopeDown);
  const double sign = up ? 1.0 : -1.0;
  for (std::size_t i = 0; i < h.heights.size(); ++i) {
    const double x = h.x_at(i);
    h.heights[i] = sign * grade * std::max(0.0, x - p.start_pad);
  }
  return h;
}

Heightfield rough(double amplitude, std::uint64_t seed, const TerrainParams& p) {
  check_params(p);
  Heightfield h = make_field(p.length, p.cell_size, TerrainKind::kRough);
  Rng rng(seed, 0x726f756768ULL);
  const auto noise = correlated_noise(h.heights.size(), p.cell_size, amplitude, kRoughKnotSpacing, rng);
  for (std::size_t i = 0; i < h.heights.size(); ++i) {
    // Ramp the noise in over 0.5 m after the start pad.
    const double w = std::clamp((h.x_at(i) - p.start_pad) / 0.5, 0.0, 1.0);
    h.heights[i] = w * noise[i];
  }
  return h;
}

Heightfield grass(std::uint64_t seed, const TerrainParams& p) {
  Heightfield h = rough(0.02, seed, p);
  Rng rng(seed, 0x6772617373ULL);
  const double pit_depth = 0.03;
  const auto pit_cells = static_cast<std::size_t>(std::llround(0.1 / p.cell_size));
  for (double x = p.start_pad + 0.5; x < p.length - 0.2; x += rng.uniform(0.4, 1.0)) {
    const auto start = static_cast<std::size_t>(std::llround(x / p.cell_size));
    for (std::size_t i = start; i < std::min(start + pit_cells, h.heights.size()); ++i) h.heights[i] -= pit_depth;
  }
  h.friction = 0.5;
  return h;
}

TerrainSet generate_set(std::uint64_t seed, int levels, int variations, const TerrainParams& p) {
  if (levels < 1) throw ArgumentError("terrain set needs levels >= 1");
  if (variations < 1) throw ArgumentError("terrain set needs variations >= 1");
  check_params(p);

  TerrainSet set;
  set.levels = levels;
  set.variations_per_level = variations;
  set.terrains.reserve(static_cast<std::size_t>(levels * variations));
  Rng rng(seed, 0x7465727261696eULL);
  const std::size_t pad_cells = static_cast<std::size_t>(std::llround(p.start_pad / p.cell_size));

  for (int level = 0; level < levels; ++level) {
    for (int v = 0; v < variations; ++v) {
      const TerrainKind kind = p.kinds[static_cast<std::size_t>(v) % p.kinds.size()];
      const std::uint64_t sub_seed = rng.next_u64();
      Heightfield h;
      switch (kind) {
        case TerrainKind::kFlat:
          h = flat(p.length, 0.0, p.cell_size);
          break;
        case TerrainKind::kSlopeUp:
        case TerrainKind::kSlopeDown: {
          Rng local(sub_seed);
          const double grade = slope_grade_for_level(level) * local.uniform(0.9, 1.0);
          h = slope(grade, kind == TerrainKind::kSlopeUp, p);
          break;
        }
        case TerrainKind::kStairsUp:
        case TerrainKind::kStairsDown: {
          Rng local(sub_seed);
          const double run = local.uniform(0.25, 0.40);
          const double rise = stair_rise_for_level(level);
          const int n_steps = std::max(1, static_cast<int>((p.length - 2.0 * p.start_pad) / run));
          h = stairs(rise, run, n_steps, kind == TerrainKind::kStairsUp ? StairDirection::kUp : StairDirection::kDown,
                     p.cell_size, p.start_pad);
          // Trim or extend to the common length so every terrain has the same span.
          h.heights.resize(cell_count(p.length, p.cell_size), h.heights.back());
          break;
        }
        case TerrainKind::kRough:
          h = rough(rough_amplitude_for_level(level), sub_seed, p);
          break;
      }
      // Spawn pad is always level with the first cell.
      for (std::size_t i = 0; i < std::min(pad_cells, h.heights.size()); ++i) h.heights[i] = h.heights[0];
      h.kind = kind;
      h.difficulty_level = level;
      set.terrains.push_back(std::move(h));
    }
  }
  return set;
}

double height_at(const Heightfield& h, double x) {
  const std::size_t n = h.heights.size();
  const double s = (x - h.origin_x) / h.cell_size;
  if (!(s > 0.0)) return h.heights.front();
  if (s >= static_cast<double>(n - 1)) return h.heights.back();
  const auto i = static_cast<std::size_t>(s);
  const double t = s - static_cast<double>(i);
  if (t == 0.0) return h.heights[i];
  return (1.0 - t) * h.heights[i] + t * h.heights[i + 1];
}

double slope_at(const Heightfield& h, double x) {
  const std::size_t n = h.heights.size();
  const double s = (x - h.origin_x) / h.cell_size;
  if (!(s >= 0.0) || s >= static_cast<double>(n - 1)) return 0.0;
  const auto i = static_cast<std::size_t>(s);
  return (h.heights[i + 1] - h.heights[i]) / h.cell_size;
}

Vec2 normal_at(const Heightfield& h, double x) {
  const double s = slope_at(h, x);
  return Vec2{-s, 1.0} / std::sqrt(1.0 + s * s);
}

SurfacePoint closest_surface_point(const Heightfield& h, const Vec2& p, double radius) {
  SurfacePoint best{Vec2{p.x(), height_at(h, p.x())}, std::numeric_limits<double>::infinity()};
  auto consider = [&](const Vec2& a, const Vec2& b) {
    const Vec2 ab = b - a;
    const double len2 = ab.squaredNorm();
    const double t = len2 > 0.0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
    const Vec2 c = a + t * ab;
    const double d = (p - c).norm();
    if (d < best.distance) best = {c, d};
  };

  const std::size_t n = h.heights.size();
  const double x_first = h.x_at(0);
  const double x_last = h.x_at(n - 1);
  const double lo = p.x() - radius;
  const double hi = p.x() + radius;

  if (lo < x_first) consider(Vec2{lo - 1.0, h.heights.front()}, Vec2{x_first, h.heights.front()});
  if (hi > x_last) consider(Vec2{x_last, h.heights.back()}, Vec2{hi + 1.0, h.heights.back()});
  const double s_lo = std::floor((lo - h.origin_x) / h.cell_size);
  const double s_hi = std::ceil((hi - h.origin_x) / h.cell_size);
  const auto i_lo = static_cast<std::ptrdiff_t>(std::max(0.0, s_lo));
  const auto i_hi = static_cast<std::ptrdiff_t>(std::min(static_cast<double>(n - 1), s_hi));
  for (std::ptrdiff_t i = i_lo; i < i_hi; ++i) {
    const auto u = static_cast<std::size_t>(i);
    consider(Vec2{h.x_at(u), h.heights[u]}, Vec2{h.x_at(u + 1), h.heights[u + 1]});
  }
  return best;
}

void write_csv(const Heightfield& h, std::ostream& out) {
  out << "x,height\n";
  for (std::size_t i = 0; i < h.heights.size(); ++i) out << h.x_at(i) << ',' << h.heights[i] << '\n';
}

Heightfield named_terrain(const std::string& name, std::uint64_t seed) {
  TerrainParams p;
  p.length = 12.0;
  if (name == "flat") return flat(p.length, 0.0, p.cell_size);
  if (name == "slope-up") return slope(0.2, true, p);
  if (name == "slope-down") return slope(0.2, false, p);
  if (name == "stairs-up" || name == "stairs-down") {
    const auto dir = name == "stairs-up" ? StairDirection::kUp : StairDirection::kDown;
    Heightfield h = stairs(0.13, 0.30, 5, dir, p.cell_size, p.start_pad);
    h.heights.resize(cell_count(p.length, p.cell_size), h.heights.back());
    return h;
  }
  if (name == "rough") return rough(0.03, seed, p);
  if (name == "grass") return grass(seed, p);
  throw ArgumentError("unknown terrain '" + name +
                      "' (expected flat, slope-up, slope-down, stairs-up, stairs-down, rough, grass)");
}

}  // namespace wheelleg
