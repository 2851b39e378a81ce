#pragma once

// Survey-area geodesy: a square area anchored at its north-east corner is cut
// into grid_n x grid_n patch cells. Row index grows southward and column index
// grows westward from the anchor. The earth is a sphere of radius
// kEarthRadiusM with a local equirectangular approximation at the anchor
// latitude, so all cells are exactly uniform in degree space.

#include <cstddef>
#include <optional>
#include <vector>

namespace deepterra::geo {

inline constexpr double kEarthRadiusM = 6'371'000.0;

class GeoPoint {
 public:
  // Throws Domain on non-finite input or |lat| > 90; lon is normalized into [-180, 180).
  GeoPoint(double lat, double lon);

  double lat() const { return lat_; }
  double lon() const { return lon_; }

  friend bool operator==(const GeoPoint&, const GeoPoint&) = default;

 private:
  double lat_;
  double lon_;
};

double normalize_lon(double lon);

struct MetersPerDegree {
  double lat;
  double lon;
};

MetersPerDegree meters_per_degree(double lat_deg);

struct AreaSpec {
  GeoPoint ne_corner{0.0, 0.0};
  double side_m = 1000.0;
  std::size_t grid_n = 36;
  std::size_t patch_px = 200;

  void validate() const;
  double cell_m() const { return side_m / static_cast<double>(grid_n); }
};

struct GeoBounds {
  double north;
  double south;
  double east;
  double west;

  friend bool operator==(const GeoBounds&, const GeoBounds&) = default;
};

struct GeoPatchMeta {
  std::size_t row;
  std::size_t col;
  GeoPoint center;
  GeoBounds bounds;

  friend bool operator==(const GeoPatchMeta&, const GeoPatchMeta&) = default;
};

struct CellIndex {
  std::size_t row;
  std::size_t col;

  friend bool operator==(const CellIndex&, const CellIndex&) = default;
};

class GeoPatchGrid {
 public:
  explicit GeoPatchGrid(const AreaSpec& area);

  const AreaSpec& area() const { return area_; }
  std::size_t size() const { return cells_.size(); }
  std::size_t side() const { return area_.grid_n; }

  const GeoPatchMeta& cell(std::size_t row, std::size_t col) const;
  const std::vector<GeoPatchMeta>& cells() const { return cells_; }

  // Degree extent of one cell.
  double cell_dlat() const { return dlat_; }
  double cell_dlon() const { return dlon_; }

  // Edge coordinates shared by neighbouring cells. north_edge(r) == south_edge(r - 1).
  double north_edge(std::size_t row) const;
  double east_edge(std::size_t col) const;

  friend bool operator==(const GeoPatchGrid&, const GeoPatchGrid&) = default;

 private:
  AreaSpec area_;
  double dlat_;
  double dlon_;
  std::vector<GeoPatchMeta> cells_;
};

inline bool operator==(const AreaSpec& a, const AreaSpec& b)
{
  return a.ne_corner == b.ne_corner && a.side_m == b.side_m && a.grid_n == b.grid_n &&
         a.patch_px == b.patch_px;
}

GeoPatchGrid build_grid(const AreaSpec& area);

// Cells are half-open: each cell owns its north and east edges, so a point on
// a shared interior edge belongs to the cell south (or west) of it and the NE
// anchor itself belongs to cell (0, 0). Returns nullopt outside the area.
std::optional<CellIndex> locate(const GeoPatchGrid& grid, const GeoPoint& p);

}  // namespace deepterra::geo
