#pragma once

#include "deepterra/geogrid.hpp"
#include "deepterra/http.hpp"
#include "deepterra/image.hpp"

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace deepterra::imagery {

struct Patch {
  RasterImage image;
  std::optional<geo::GeoPatchMeta> geo;
  std::string source_id;

  friend bool operator==(const Patch&, const Patch&) = default;
};

struct PatchFailure {
  std::size_t row;
  std::size_t col;
  std::string reason;
};

struct PatchSet {
  std::size_t patch_px = 0;
  std::vector<Patch> patches;        // row-major from the source's top-left
  std::vector<PatchFailure> failures;

  std::size_t size() const { return patches.size(); }
};

// Cuts floor(w/p) x floor(h/p) patches; right and bottom remainders are dropped.
PatchSet split_image(const RasterImage& img, std::size_t patch_px, const std::string& origin = "image");

// Tags each patch positionally with the grid cell of the same row-major index.
PatchSet attach_geo(PatchSet ps, const geo::GeoPatchGrid& grid);

enum class TileSourceKind { FileDirectory, HttpXyz };

struct TileSourceConfig {
  TileSourceKind kind = TileSourceKind::FileDirectory;
  std::string root_or_url_template;  // directory, or URL with {x},{y},{z}
  int zoom = 19;                     // slippy-map zoom for http-xyz
  std::optional<std::string> auth_token;
  std::size_t parallelism = 4;
  double rate_limit_rps = 0.0;
  http::RetryPolicy retry;

  void validate() const;
};

std::string tile_filename(std::size_t row, std::size_t col, std::size_t grid_n);

struct SlippyTile {
  long x;
  long y;
  int z;
};

SlippyTile slippy_tile(const geo::GeoPoint& p, int zoom);
std::string expand_url_template(const std::string& tmpl, const SlippyTile& t);

// Returns the geo-tagged patches in (row, col) order. Missing or malformed
// tiles become entries in PatchSet::failures; an unreachable source throws Fetch.
PatchSet fetch_area(const TileSourceConfig& src, const geo::AreaSpec& area);

// {"kind": "directory" | "http-xyz", "root" | "url_template", "zoom", "auth_token",
//  "parallelism", "rate_limit_rps", "max_retries"}; throws Config naming the field.
TileSourceConfig tile_source_from_json(const nlohmann::json& j);
// {"ne": [lat, lon], "side_m", "grid_n", "patch_px"}
geo::AreaSpec area_from_json(const nlohmann::json& j);

}  // namespace deepterra::imagery
