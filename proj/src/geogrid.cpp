#include "deepterra/geogrid.hpp"

#include "deepterra/error.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace deepterra::geo {

double normalize_lon(double lon)
{
  if (lon >= -180.0 && lon < 180.0) return lon;
  double r = std::fmod(lon + 180.0, 360.0);
  if (r < 0) r += 360.0;
  return r - 180.0;
}

GeoPoint::GeoPoint(double lat, double lon)
{
  require(std::isfinite(lat) && std::isfinite(lon), ErrorKind::Domain, "coordinate must be finite");
  require(lat >= -90.0 && lat <= 90.0, ErrorKind::Domain,
          "latitude out of range: " + std::to_string(lat));
  lat_ = lat;
  lon_ = normalize_lon(lon);
}

MetersPerDegree meters_per_degree(double lat_deg)
{
  require(std::isfinite(lat_deg) && std::abs(lat_deg) <= 90.0, ErrorKind::Domain,
          "latitude out of range");
  const double m_lat = std::numbers::pi * kEarthRadiusM / 180.0;
  return {m_lat, m_lat * std::cos(lat_deg * std::numbers::pi / 180.0)};
}

void AreaSpec::validate() const
{
  require(grid_n > 0, ErrorKind::Domain, "grid_n must be positive");
  require(std::isfinite(side_m) && side_m > 0.0, ErrorKind::Domain, "side_m must be positive");
  require(patch_px > 0, ErrorKind::Domain, "patch_px must be positive");
}

GeoPatchGrid::GeoPatchGrid(const AreaSpec& area) : area_(area)
{
  area.validate();
  const auto mpd = meters_per_degree(area.ne_corner.lat());
  require(mpd.lon > 1e-9, ErrorKind::Domain, "anchor too close to a pole");
  dlat_ = area.cell_m() / mpd.lat;
  dlon_ = area.cell_m() / mpd.lon;

  const std::size_t n = area.grid_n;
  require(area.ne_corner.lat() - static_cast<double>(n) * dlat_ >= -90.0, ErrorKind::Domain,
          "area extends past the south pole");
  require(area.ne_corner.lon() - static_cast<double>(n) * dlon_ >= -180.0, ErrorKind::Domain,
          "area crosses the antimeridian");

  cells_.reserve(n * n);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      GeoBounds b{north_edge(r), north_edge(r + 1), east_edge(c), east_edge(c + 1)};
      cells_.push_back({r, c, GeoPoint(0.5 * (b.north + b.south), 0.5 * (b.east + b.west)), b});
    }
  }
}

double GeoPatchGrid::north_edge(std::size_t row) const
{
  return area_.ne_corner.lat() - static_cast<double>(row) * dlat_;
}

double GeoPatchGrid::east_edge(std::size_t col) const
{
  return area_.ne_corner.lon() - static_cast<double>(col) * dlon_;
}

const GeoPatchMeta& GeoPatchGrid::cell(std::size_t row, std::size_t col) const
{
  require(row < area_.grid_n && col < area_.grid_n, ErrorKind::Domain, "cell index out of range");
  return cells_[row * area_.grid_n + col];
}

GeoPatchGrid build_grid(const AreaSpec& area) { return GeoPatchGrid(area); }

namespace {

// Index i such that edge(i + 1) < v <= edge(i), with edge decreasing in i.
std::optional<std::size_t> owning_index(double v, double origin, double step, std::size_t n,
                                        auto edge)
{
  if (!(v <= edge(0)) || !(v > edge(n))) return std::nullopt;
  const double est = std::floor((origin - v) / step);
  std::size_t i = est < 0 ? 0 : std::min(n - 1, static_cast<std::size_t>(est));
  while (i > 0 && v > edge(i)) --i;
  while (i + 1 < n && v <= edge(i + 1)) ++i;
  return i;
}

}  // namespace

std::optional<CellIndex> locate(const GeoPatchGrid& grid, const GeoPoint& p)
{
  const auto& a = grid.area();
  const auto row = owning_index(p.lat(), a.ne_corner.lat(), grid.cell_dlat(), a.grid_n,
                                [&](std::size_t i) { return grid.north_edge(i); });
  if (!row) return std::nullopt;
  const auto col = owning_index(p.lon(), a.ne_corner.lon(), grid.cell_dlon(), a.grid_n,
                                [&](std::size_t i) { return grid.east_edge(i); });
  if (!col) return std::nullopt;
  return CellIndex{*row, *col};
}

}  // namespace deepterra::geo
