#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "wheelleg/types.hpp"

namespace wheelleg {

enum class TerrainKind { kFlat, kSlopeUp, kSlopeDown, kStairsUp, kStairsDown, kRough };

std::string to_string(TerrainKind k);
TerrainKind terrain_kind_from_string(const std::string& s);
std::vector<TerrainKind> all_terrain_kinds();

/// 1-D heightfield. Cell i is centred at origin_x + i * cell_size and the
/// surface is the polyline through the cell centres, extended flat past both
/// ends.
struct Heightfield {
  double cell_size = 0.05;
  std::vector<double> heights;
  double origin_x = 0.0;
  TerrainKind kind = TerrainKind::kFlat;
  int difficulty_level = 0;
  /// Ground friction replacing the randomized value (used for grass).
  std::optional<double> friction;

  [[nodiscard]] double length() const {
    return heights.empty() ? 0.0 : cell_size * static_cast<double>(heights.size() - 1);
  }
  [[nodiscard]] double x_at(std::size_t i) const { return origin_x + cell_size * static_cast<double>(i); }
  bool operator==(const Heightfield&) const = default;
};

struct TerrainSet {
  std::vector<Heightfield> terrains;
  int levels = 0;
  int variations_per_level = 0;

  [[nodiscard]] const Heightfield& at(int level, int variation) const {
    return terrains[static_cast<std::size_t>(level * variations_per_level + variation)];
  }
  bool operator==(const TerrainSet&) const = default;
};

struct TerrainParams {
  double cell_size = 0.05;
  double length = 10.0;
  /// Flat run-up before the terrain feature starts; robots spawn on it.
  double start_pad = 2.0;
  std::vector<TerrainKind> kinds = all_terrain_kinds();
};

/// Difficulty schedule per level.
double slope_grade_for_level(int level);
double stair_rise_for_level(int level);
double rough_amplitude_for_level(int level);

Heightfield flat(double length = 10.0, double height = 0.0, double cell_size = 0.05);

enum class StairDirection { kUp, kDown };

/// Staircase with `pad` metres of flat ground before and after the steps.
/// The down staircase is the up staircase reversed.
Heightfield stairs(double rise, double run, int n_steps, StairDirection direction,
                   double cell_size = 0.05, double pad = 2.0);

Heightfield slope(double grade, bool up, const TerrainParams& p = {});
Heightfield rough(double amplitude, std::uint64_t seed, const TerrainParams& p = {});
/// Rough ground with shallow pits and reduced friction.
Heightfield grass(std::uint64_t seed, const TerrainParams& p = {});

/// Deterministic in all arguments. levels * variations terrains ordered by
/// level; variation v of every level uses kinds[v % kinds.size()].
TerrainSet generate_set(std::uint64_t seed, int levels, int variations, const TerrainParams& p = {});

/// Piecewise-linear interpolation between cell centres, clamped at the edges.
double height_at(const Heightfield& h, double x);

/// Slope dh/dx of the segment containing x (0 outside the field).
double slope_at(const Heightfield& h, double x);

/// Unit upward surface normal at x.
Vec2 normal_at(const Heightfield& h, double x);

struct SurfacePoint {
  Vec2 point;
  double distance = 0.0;
};

/// Closest point of the surface polyline to `p`, searching segments that
/// overlap [p.x - radius, p.x + radius].
SurfacePoint closest_surface_point(const Heightfield& h, const Vec2& p, double radius);

/// Writes "x,height" rows with a header.
void write_csv(const Heightfield& h, std::ostream& out);

/// Named evaluation terrains: flat, slope-up, slope-down, stairs-up,
/// stairs-down (0.13 m rise), rough, grass.
Heightfield named_terrain(const std::string& name, std::uint64_t seed = 0);

}  // namespace wheelleg
