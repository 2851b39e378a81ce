#include "deepterra/imagery.hpp"

#include "deepterra/error.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <future>
#include <numbers>
#include <variant>

namespace deepterra::imagery {

namespace fs = std::filesystem;

PatchSet split_image(const RasterImage& img, std::size_t patch_px, const std::string& origin)
{
  require(patch_px >= 1, ErrorKind::Domain, "patch_px must be at least 1");
  PatchSet out;
  out.patch_px = patch_px;
  const std::size_t rows = img.height() / patch_px;
  const std::size_t cols = img.width() / patch_px;
  out.patches.reserve(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out.patches.push_back({img.crop(c * patch_px, r * patch_px, patch_px, patch_px), std::nullopt,
                             origin + "#r" + std::to_string(r) + "c" + std::to_string(c)});
    }
  }
  return out;
}

PatchSet attach_geo(PatchSet ps, const geo::GeoPatchGrid& grid)
{
  require(ps.patches.size() == grid.size(), ErrorKind::Domain,
          "patch count " + std::to_string(ps.patches.size()) + " does not match grid cell count " +
              std::to_string(grid.size()));
  for (std::size_t i = 0; i < ps.patches.size(); ++i) ps.patches[i].geo = grid.cells()[i];
  return ps;
}

void TileSourceConfig::validate() const
{
  require(!root_or_url_template.empty(), ErrorKind::Config, "tile source root/template is empty");
  require(parallelism >= 1, ErrorKind::Config, "parallelism must be at least 1");
  if (kind == TileSourceKind::HttpXyz) {
    for (const char* ph : {"{x}", "{y}", "{z}"})
      require(root_or_url_template.find(ph) != std::string::npos, ErrorKind::Config,
              std::string("url template lacks placeholder ") + ph);
    http::parse_url(root_or_url_template);
    require(zoom >= 0 && zoom <= 24, ErrorKind::Config, "zoom must be within [0, 24]");
  }
}

std::string tile_filename(std::size_t row, std::size_t col, std::size_t grid_n)
{
  const int width = std::max<int>(2, static_cast<int>(std::to_string(grid_n > 0 ? grid_n - 1 : 0).size()));
  char buf[64];
  std::snprintf(buf, sizeof buf, "r%0*zu_c%0*zu.png", width, row, width, col);
  return buf;
}

SlippyTile slippy_tile(const geo::GeoPoint& p, int zoom)
{
  const double n = std::ldexp(1.0, zoom);
  const double lat = p.lat() * std::numbers::pi / 180.0;
  const double x = (p.lon() + 180.0) / 360.0 * n;
  const double y = (1.0 - std::asinh(std::tan(lat)) / std::numbers::pi) / 2.0 * n;
  const long max_index = static_cast<long>(n) - 1;
  return {std::clamp(static_cast<long>(std::floor(x)), 0L, max_index),
          std::clamp(static_cast<long>(std::floor(y)), 0L, max_index), zoom};
}

std::string expand_url_template(const std::string& tmpl, const SlippyTile& t)
{
  std::string out = tmpl;
  auto replace_all = [&](const std::string& key, const std::string& value) {
    for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + value.size()))
      out.replace(pos, key.size(), value);
  };
  replace_all("{x}", std::to_string(t.x));
  replace_all("{y}", std::to_string(t.y));
  replace_all("{z}", std::to_string(t.z));
  return out;
}

namespace {

using TileResult = std::variant<RasterImage, std::string>;

TileResult decode_tile(const Bytes& bytes, std::size_t patch_px)
{
  try {
    auto img = decode_image(bytes);
    if (img.width() != patch_px || img.height() != patch_px)
      return "tile is " + std::to_string(img.width()) + "x" + std::to_string(img.height()) +
             ", expected " + std::to_string(patch_px);
    return img;
  } catch (const Error& e) {
    return std::string(e.what());
  }
}

}  // namespace

PatchSet fetch_area(const TileSourceConfig& src, const geo::AreaSpec& area)
{
  src.validate();
  const auto grid = geo::build_grid(area);
  const std::size_t n = area.grid_n;

  if (src.kind == TileSourceKind::FileDirectory && !fs::is_directory(src.root_or_url_template))
    fail(ErrorKind::Fetch, "tile directory not found: " + src.root_or_url_template);

  http::RateLimiter limiter(src.rate_limit_rps);
  http::GetOptions get_opts;
  get_opts.retry = src.retry;
  get_opts.limiter = &limiter;
  if (src.auth_token) get_opts.bearer_token = *src.auth_token;

  auto fetch_one = [&](std::size_t idx) -> TileResult {
    const auto& cell = grid.cells()[idx];
    if (src.kind == TileSourceKind::FileDirectory) {
      const auto path = fs::path(src.root_or_url_template) / tile_filename(cell.row, cell.col, n);
      if (!fs::exists(path)) return "missing tile " + path.filename().string();
      return decode_tile(read_file(path), area.patch_px);
    }
    const auto url = expand_url_template(src.root_or_url_template, slippy_tile(cell.center, src.zoom));
    const auto res = http::get(url, get_opts);
    if (res.status != 200) return "HTTP " + std::to_string(res.status) + " for " + url;
    return decode_tile(res.body, area.patch_px);
  };

  std::vector<std::optional<TileResult>> results(grid.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < results.size(); i = next++) results[i] = fetch_one(i);
  };
  const std::size_t workers = std::min(src.parallelism, grid.size());
  std::vector<std::future<void>> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.push_back(std::async(std::launch::async, worker));
  std::exception_ptr first_error;
  try {
    worker();
  } catch (...) {
    first_error = std::current_exception();
    next = results.size();
  }
  for (auto& f : pool) {
    try {
      f.get();
    } catch (...) {
      if (!first_error) first_error = std::current_exception();
    }
  }
  if (first_error) std::rethrow_exception(first_error);

  PatchSet out;
  out.patch_px = area.patch_px;
  const std::string origin = src.kind == TileSourceKind::FileDirectory ? "tiles" : "xyz";
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& cell = grid.cells()[i];
    if (auto* img = std::get_if<RasterImage>(&*results[i])) {
      out.patches.push_back({std::move(*img), cell,
                             origin + "#r" + std::to_string(cell.row) + "c" + std::to_string(cell.col)});
    } else {
      out.failures.push_back({cell.row, cell.col, std::get<std::string>(*results[i])});
    }
  }
  return out;
}

namespace {

template <typename T>
T config_field(const nlohmann::json& j, const char* key, T fallback)
{
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorKind::Config, std::string(key) + ": has the wrong type");
  }
}

}  // namespace

TileSourceConfig tile_source_from_json(const nlohmann::json& j)
{
  require(j.is_object(), ErrorKind::Config, "tile source: must be an object");
  for (const auto& [key, _] : j.items()) {
    static const std::vector<std::string> allowed = {"kind",       "root",           "url_template", "zoom",
                                                     "auth_token", "parallelism",    "rate_limit_rps",
                                                     "max_retries"};
    require(std::find(allowed.begin(), allowed.end(), key) != allowed.end(), ErrorKind::Config,
            key + ": unknown tile source field");
  }
  TileSourceConfig cfg;
  const auto kind = config_field<std::string>(j, "kind", "directory");
  if (kind == "directory") {
    cfg.kind = TileSourceKind::FileDirectory;
    cfg.root_or_url_template = config_field<std::string>(j, "root", "");
  } else if (kind == "http-xyz") {
    cfg.kind = TileSourceKind::HttpXyz;
    cfg.root_or_url_template = config_field<std::string>(j, "url_template", "");
  } else {
    fail(ErrorKind::Config, "kind: must be 'directory' or 'http-xyz'");
  }
  cfg.zoom = config_field<int>(j, "zoom", cfg.zoom);
  if (j.contains("auth_token") && !j.at("auth_token").is_null())
    cfg.auth_token = config_field<std::string>(j, "auth_token", "");
  const auto parallelism = config_field<long long>(j, "parallelism", 4);
  require(parallelism >= 1, ErrorKind::Config, "parallelism: must be at least 1");
  cfg.parallelism = static_cast<std::size_t>(parallelism);
  cfg.rate_limit_rps = config_field<double>(j, "rate_limit_rps", 0.0);
  require(cfg.rate_limit_rps >= 0.0, ErrorKind::Config, "rate_limit_rps: must be non-negative");
  const auto retries = config_field<long long>(j, "max_retries", 3);
  require(retries >= 0, ErrorKind::Config, "max_retries: must be non-negative");
  cfg.retry.max_retries = static_cast<int>(retries);
  cfg.validate();
  return cfg;
}

geo::AreaSpec area_from_json(const nlohmann::json& j)
{
  require(j.is_object() && j.contains("ne"), ErrorKind::Config, "area: needs an 'ne' corner");
  const auto& ne = j.at("ne");
  require(ne.is_array() && ne.size() == 2 && ne[0].is_number() && ne[1].is_number(), ErrorKind::Config,
          "ne: must be [lat, lon]");
  geo::AreaSpec area;
  area.ne_corner = geo::GeoPoint(ne[0].get<double>(), ne[1].get<double>());
  area.side_m = config_field<double>(j, "side_m", area.side_m);
  const auto n = config_field<long long>(j, "grid_n", 36);
  const auto px = config_field<long long>(j, "patch_px", 200);
  require(n >= 1, ErrorKind::Config, "grid_n: must be at least 1");
  require(px >= 1, ErrorKind::Config, "patch_px: must be at least 1");
  area.grid_n = static_cast<std::size_t>(n);
  area.patch_px = static_cast<std::size_t>(px);
  area.validate();
  return area;
}

}  // namespace deepterra::imagery
