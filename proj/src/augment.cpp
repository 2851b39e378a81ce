#include "deepterra/augment.hpp"

#include "deepterra/error.hpp"
#include "deepterra/random.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <future>
#include <numbers>
#include <set>

namespace deepterra::augment {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

const char* fill_name(FillMode m)
{
  switch (m) {
    case FillMode::Constant: return "constant";
    case FillMode::Nearest: return "nearest";
    case FillMode::Reflect: return "reflect";
    case FillMode::Wrap: return "wrap";
  }
  return "nearest";
}

FillMode parse_fill(const std::string& s)
{
  for (auto m : {FillMode::Constant, FillMode::Nearest, FillMode::Reflect, FillMode::Wrap})
    if (s == fill_name(m)) return m;
  fail(ErrorKind::Config, "fill_mode: unknown value '" + s + "'");
}

}  // namespace

void AugmentSpec::validate() const
{
  auto check = [](bool ok, const char* field, const char* rule) {
    require(ok, ErrorKind::Config, std::string(field) + ": " + rule);
  };
  check(std::isfinite(rotation_max_deg) && rotation_max_deg >= 0.0, "rotation_max_deg", "must be >= 0");
  check(std::isfinite(shift_max_frac) && shift_max_frac >= 0.0 && shift_max_frac < 1.0, "shift_max_frac",
        "must lie in [0, 1)");
  check(std::isfinite(zoom_low) && zoom_low > 0.0, "zoom_range", "low must be > 0");
  check(std::isfinite(zoom_high) && zoom_high >= zoom_low, "zoom_range", "high must be >= low");
  check(copies_per_image >= 1, "copies_per_image", "must be >= 1");
}

ordered_json to_json(const AugmentSpec& s)
{
  ordered_json j;
  j["rotation_max_deg"] = s.rotation_max_deg;
  j["shift_max_frac"] = s.shift_max_frac;
  j["zoom_range"] = {s.zoom_low, s.zoom_high};
  j["hflip"] = s.hflip;
  j["vflip"] = s.vflip;
  j["fill_mode"] = fill_name(s.fill_mode);
  j["fill_value"] = s.fill_value;
  j["interpolation"] = s.interpolation == Interpolation::Nearest ? "nearest" : "bilinear";
  j["copies_per_image"] = s.copies_per_image;
  j["seed"] = s.seed;
  return j;
}

AugmentSpec spec_from_json(const json& j)
{
  AugmentSpec s;
  require(j.is_object(), ErrorKind::Config, "augment spec must be a JSON object");
  static const std::set<std::string> known = {"rotation_max_deg", "shift_max_frac", "zoom_range", "hflip",
                                              "vflip", "fill_mode", "fill_value", "interpolation",
                                              "copies_per_image", "seed"};
  for (const auto& [k, _] : j.items()) require(known.count(k) > 0, ErrorKind::Config, k + ": unknown field");
  try {
    if (j.contains("rotation_max_deg")) s.rotation_max_deg = j.at("rotation_max_deg").get<double>();
    if (j.contains("shift_max_frac")) s.shift_max_frac = j.at("shift_max_frac").get<double>();
    if (j.contains("zoom_range")) {
      const auto& z = j.at("zoom_range");
      require(z.is_array() && z.size() == 2, ErrorKind::Config, "zoom_range: expected [low, high]");
      s.zoom_low = z[0].get<double>();
      s.zoom_high = z[1].get<double>();
    }
    if (j.contains("hflip")) s.hflip = j.at("hflip").get<bool>();
    if (j.contains("vflip")) s.vflip = j.at("vflip").get<bool>();
    if (j.contains("fill_mode")) s.fill_mode = parse_fill(j.at("fill_mode").get<std::string>());
    if (j.contains("fill_value")) {
      const int v = j.at("fill_value").get<int>();
      require(v >= 0 && v <= 255, ErrorKind::Config, "fill_value: must lie in [0, 255]");
      s.fill_value = static_cast<std::uint8_t>(v);
    }
    if (j.contains("interpolation")) {
      const auto v = j.at("interpolation").get<std::string>();
      require(v == "nearest" || v == "bilinear", ErrorKind::Config, "interpolation: unknown value '" + v + "'");
      s.interpolation = v == "nearest" ? Interpolation::Nearest : Interpolation::Bilinear;
    }
    if (j.contains("copies_per_image")) s.copies_per_image = j.at("copies_per_image").get<int>();
    if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("augment spec: ") + e.what());
  }
  s.validate();
  return s;
}

GeoTransform sample_transform(const AugmentSpec& spec, std::uint64_t draw_index)
{
  auto u = [&](std::uint64_t k) { return rng::uniform(spec.seed, {draw_index, k}); };
  auto symmetric = [&](double max, std::uint64_t k) { return max == 0.0 ? 0.0 : max * (2.0 * u(k) - 1.0); };
  GeoTransform t;
  t.angle_deg = symmetric(spec.rotation_max_deg, 0);
  t.shift_x_frac = symmetric(spec.shift_max_frac, 1);
  t.shift_y_frac = symmetric(spec.shift_max_frac, 2);
  t.zoom = spec.zoom_low == spec.zoom_high ? spec.zoom_low : spec.zoom_low + (spec.zoom_high - spec.zoom_low) * u(3);
  t.do_hflip = spec.hflip && u(4) < 0.5;
  t.do_vflip = spec.vflip && u(5) < 0.5;
  return t;
}

SamplePoint inverse_map(const GeoTransform& t, std::size_t side, std::size_t x, std::size_t y)
{
  const double s = static_cast<double>(side);
  const double c = 0.5 * s;
  // undo shift
  double px = static_cast<double>(x) + 0.5 - t.shift_x_frac * s;
  double py = static_cast<double>(y) + 0.5 - t.shift_y_frac * s;
  // undo rotation
  if (t.angle_deg != 0.0) {
    const double a = t.angle_deg * std::numbers::pi / 180.0;
    const double ca = std::cos(a), sa = std::sin(a);
    const double dx = px - c, dy = py - c;
    px = c + ca * dx - sa * dy;
    py = c + sa * dx + ca * dy;
  }
  // undo zoom
  if (t.zoom != 1.0) {
    px = c + (px - c) / t.zoom;
    py = c + (py - c) / t.zoom;
  }
  // undo flips
  if (t.do_hflip) px = s - px;
  if (t.do_vflip) py = s - py;
  return {px, py};
}

namespace {

long resolve_index(long i, long n, FillMode mode)
{
  if (i >= 0 && i < n) return i;
  switch (mode) {
    case FillMode::Constant:
    case FillMode::Nearest: return std::clamp(i, 0L, n - 1);
    case FillMode::Reflect: {
      // half-sample symmetric: ... c b a | a b c ... z | z y x ...
      const long period = 2 * n;
      long m = i % period;
      if (m < 0) m += period;
      return m < n ? m : period - 1 - m;
    }
    case FillMode::Wrap: {
      long m = i % n;
      return m < 0 ? m + n : m;
    }
  }
  return 0;
}

}  // namespace

RasterImage apply_transform(const RasterImage& img, const GeoTransform& t, const AugmentSpec& spec)
{
  require(img.width() == img.height(), ErrorKind::Domain, "augmentation requires square images");
  const std::size_t side = img.width();
  const long n = static_cast<long>(side);
  RasterImage out(side, side);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const auto sp = inverse_map(t, side, x, y);
      const bool outside = !(sp.x >= 0.0 && sp.x < static_cast<double>(side) && sp.y >= 0.0 &&
                             sp.y < static_cast<double>(side));
      if (outside && spec.fill_mode == FillMode::Constant) {
        for (std::size_t ch = 0; ch < 3; ++ch) out.at(x, y, ch) = spec.fill_value;
        continue;
      }
      if (spec.interpolation == Interpolation::Nearest) {
        const long sx = resolve_index(static_cast<long>(std::floor(sp.x)), n, spec.fill_mode);
        const long sy = resolve_index(static_cast<long>(std::floor(sp.y)), n, spec.fill_mode);
        for (std::size_t ch = 0; ch < 3; ++ch) out.at(x, y, ch) = img.at(sx, sy, ch);
        continue;
      }
      const double u = sp.x - 0.5, v = sp.y - 0.5;
      const double fx = std::floor(u), fy = std::floor(v);
      const double ax = u - fx, ay = v - fy;
      // Constant mode only reaches here for in-bounds samples; clamp their neighbours.
      const FillMode edge = spec.fill_mode == FillMode::Constant ? FillMode::Nearest : spec.fill_mode;
      const long x0 = resolve_index(static_cast<long>(fx), n, edge), x1 = resolve_index(static_cast<long>(fx) + 1, n, edge);
      const long y0 = resolve_index(static_cast<long>(fy), n, edge), y1 = resolve_index(static_cast<long>(fy) + 1, n, edge);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double top = (1 - ax) * img.at(x0, y0, ch) + ax * img.at(x1, y0, ch);
        const double bot = (1 - ax) * img.at(x0, y1, ch) + ax * img.at(x1, y1, ch);
        const double val = (1 - ay) * top + ay * bot;
        out.at(x, y, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(val), 0L, 255L));
      }
    }
  }
  return out;
}

std::string variant_filename(const std::string& source, int variant, int copies)
{
  const auto dot = source.rfind('.');
  const std::string stem = dot == std::string::npos ? source : source.substr(0, dot);
  const int width = std::max<int>(2, static_cast<int>(std::to_string(copies).size()));
  char buf[32];
  std::snprintf(buf, sizeof buf, "_aug%0*d.png", width, variant);
  return stem + buf;
}

std::uint64_t variant_draw_index(const std::string& source_filename, int variant)
{
  return rng::mix(rng::hash_string(source_filename), {static_cast<std::uint64_t>(variant)});
}

dataset::LabeledDataset augment_dataset(const dataset::LabeledDataset& ds, const AugmentSpec& spec, std::size_t workers)
{
  spec.validate();
  std::set<std::string> existing;
  for (std::size_t c = 0; c < 2; ++c)
    for (const auto& e : ds.entries(c)) existing.insert(e.filename);

  struct Job {
    const dataset::ImageEntry* source;
    int variant;
    std::string name;
  };
  std::array<std::vector<dataset::ImageEntry>, 2> classes;
  for (std::size_t c = 0; c < 2; ++c) {
    std::vector<const dataset::ImageEntry*> sources;
    for (const auto& e : ds.entries(c)) sources.push_back(&e);
    std::sort(sources.begin(), sources.end(), [](auto* a, auto* b) { return a->filename < b->filename; });

    std::vector<Job> jobs;
    for (const auto* src : sources) {
      for (int k = 1; k <= spec.copies_per_image; ++k) {
        auto name = variant_filename(src->filename, k, spec.copies_per_image);
        require(!existing.count(name), ErrorKind::Naming, "variant name " + name + " collides with an existing file");
        jobs.push_back({src, k, std::move(name)});
      }
    }
    std::vector<std::optional<dataset::ImageEntry>> variants(jobs.size());
    std::atomic<std::size_t> next{0};
    auto work = [&] {
      for (std::size_t i = next++; i < jobs.size(); i = next++) {
        const auto& job = jobs[i];
        const auto t = sample_transform(spec, variant_draw_index(job.source->filename, job.variant));
        variants[i] = dataset::make_entry(job.name, apply_transform(job.source->image, t, spec), job.source->geo);
      }
    };
    std::vector<std::future<void>> pool;
    for (std::size_t w = 1; w < std::max<std::size_t>(1, workers); ++w) pool.push_back(std::async(std::launch::async, work));
    work();
    for (auto& f : pool) f.get();

    std::size_t vi = 0;
    for (const auto* src : sources) {
      classes[c].push_back(*src);
      for (int k = 1; k <= spec.copies_per_image; ++k) classes[c].push_back(std::move(*variants[vi++]));
    }
  }
  return dataset::LabeledDataset(ds.labels(), std::move(classes[0]), std::move(classes[1]), ds.has_manifest());
}

void write_provenance(const AugmentSpec& spec, const std::filesystem::path& dir)
{
  const std::string text = to_json(spec).dump(2) + "\n";
  write_file(dir / "augment.json", Bytes(text.begin(), text.end()));
}

}  // namespace deepterra::augment
