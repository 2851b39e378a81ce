#include "deepterra/explain.hpp"

#include "deepterra/error.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

namespace deepterra::explain {

const char* to_string(Baseline b) { return b == Baseline::Gray ? "gray" : "mean-color"; }

void OcclusionConfig::validate(std::size_t width, std::size_t height) const
{
  require(stride_px >= 1, ErrorKind::Domain, "occlusion stride must be at least 1");
  require(stride_px <= window_px, ErrorKind::Domain, "occlusion stride must not exceed the window");
  require(window_px <= std::min(width, height), ErrorKind::Domain, "occlusion window exceeds the image side");
}

nlohmann::ordered_json to_json(const OcclusionConfig& cfg)
{
  return {{"window_px", cfg.window_px}, {"stride_px", cfg.stride_px}, {"baseline", to_string(cfg.baseline)}};
}

std::vector<std::size_t> window_origins(std::size_t side, std::size_t window, std::size_t stride)
{
  std::vector<std::size_t> out;
  for (std::size_t o = 0; o + window <= side; o += stride) out.push_back(o);
  if (out.back() + window != side) out.push_back(side - window);
  return out;
}

namespace {

std::array<std::uint8_t, 3> baseline_color(const RasterImage& img, Baseline b)
{
  if (b == Baseline::Gray) return {128, 128, 128};
  std::array<double, 3> sum{};
  const auto& px = img.pixels();
  for (std::size_t i = 0; i < px.size(); ++i) sum[i % 3] += px[i];
  const double n = static_cast<double>(img.width() * img.height());
  std::array<std::uint8_t, 3> out{};
  for (std::size_t c = 0; c < 3; ++c) out[c] = static_cast<std::uint8_t>(std::lround(sum[c] / n));
  return out;
}

std::size_t predicted_index(const std::pair<double, double>& p) { return p.second > p.first ? 1 : 0; }

double class_prob(const std::pair<double, double>& p, std::size_t cls) { return cls == 1 ? p.second : p.first; }

}  // namespace

SaliencyMap occlusion_heatmap(const Scorer& scorer, const RasterImage& img, const OcclusionConfig& cfg,
                              std::size_t workers)
{
  cfg.validate(img.width(), img.height());
  const RasterImage* self = &img;
  const auto base = scorer(std::span(&self, 1));
  require(base.size() == 1, ErrorKind::Domain, "scorer returned the wrong number of results");

  SaliencyMap map;
  map.width = img.width();
  map.height = img.height();
  map.config = cfg;
  map.predicted_class = predicted_index(base.front());
  const double p0 = class_prob(base.front(), map.predicted_class);

  const auto xs = window_origins(img.width(), cfg.window_px, cfg.stride_px);
  const auto ys = window_origins(img.height(), cfg.window_px, cfg.stride_px);
  struct Window {
    std::size_t x, y;
  };
  std::vector<Window> windows;
  for (auto y : ys)
    for (auto x : xs) windows.push_back({x, y});

  const auto fill = baseline_color(img, cfg.baseline);
  std::vector<double> scores(windows.size());
  constexpr std::size_t kBatch = 32;
  const std::size_t chunks = (windows.size() + kBatch - 1) / kBatch;
  auto run_chunk = [&](std::size_t chunk) {
    const std::size_t begin = chunk * kBatch, end = std::min(windows.size(), begin + kBatch);
    std::vector<RasterImage> occluded;
    occluded.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
      RasterImage o = img;
      for (std::size_t y = windows[i].y; y < windows[i].y + cfg.window_px; ++y)
        for (std::size_t x = windows[i].x; x < windows[i].x + cfg.window_px; ++x)
          for (std::size_t c = 0; c < 3; ++c) o.at(x, y, c) = fill[c];
      occluded.push_back(std::move(o));
    }
    std::vector<const RasterImage*> ptrs;
    for (const auto& o : occluded) ptrs.push_back(&o);
    const auto probs = scorer(ptrs);
    require(probs.size() == ptrs.size(), ErrorKind::Domain, "scorer returned the wrong number of results");
    for (std::size_t i = begin; i < end; ++i) scores[i] = p0 - class_prob(probs[i - begin], map.predicted_class);
  };

  workers = std::clamp<std::size_t>(workers, 1, chunks);
  if (workers == 1) {
    for (std::size_t c = 0; c < chunks; ++c) run_chunk(c);
  } else {
    std::vector<std::jthread> pool;
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t c; (c = next++) < chunks;) {
          try {
            run_chunk(c);
          } catch (...) {
            std::lock_guard lock(error_mu);
            if (!error) error = std::current_exception();
          }
        }
      });
    pool.clear();
    if (error) std::rethrow_exception(error);
  }

  std::vector<double> sum(map.width * map.height, 0.0);
  std::vector<std::uint32_t> cover(map.width * map.height, 0);
  for (std::size_t i = 0; i < windows.size(); ++i)
    for (std::size_t y = windows[i].y; y < windows[i].y + cfg.window_px; ++y)
      for (std::size_t x = windows[i].x; x < windows[i].x + cfg.window_px; ++x) {
        sum[y * map.width + x] += scores[i];
        ++cover[y * map.width + x];
      }
  map.values.resize(sum.size());
  for (std::size_t i = 0; i < sum.size(); ++i) map.values[i] = sum[i] / cover[i];
  return map;
}

SaliencyMap occlusion_heatmap(const nn::Checkpoint& ckpt, const RasterImage& img, const OcclusionConfig& cfg,
                              std::size_t workers)
{
  return occlusion_heatmap([&](std::span<const RasterImage* const> imgs) { return nn::predict_proba(ckpt, imgs); },
                           img, cfg, workers);
}

double significance(const SaliencyMap& map, double threshold)
{
  require(!map.values.empty(), ErrorKind::Domain, "empty saliency map");
  const auto n = std::count_if(map.values.begin(), map.values.end(), [&](double v) { return v > threshold; });
  return 100.0 * static_cast<double>(n) / static_cast<double>(map.values.size());
}

namespace {

std::pair<double, double> value_range(const SaliencyMap& map)
{
  const auto [lo, hi] = std::minmax_element(map.values.begin(), map.values.end());
  return {*lo, *hi};
}

}  // namespace

RasterImage render_overlay(const RasterImage& img, const SaliencyMap& map, double alpha)
{
  require(img.width() == map.width && img.height() == map.height, ErrorKind::Domain,
          "saliency map does not match the image dimensions");
  require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::Domain, "overlay alpha must lie in [0, 1]");
  if (alpha == 0.0) return img;
  const auto [lo, hi] = value_range(map);
  RasterImage out = img;
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x) {
      const double t = hi > lo ? (map.at(x, y) - lo) / (hi - lo) : 0.0;
      const double ramp[3] = {255.0 * t, 0.0, 255.0 * (1.0 - t)};
      for (std::size_t c = 0; c < 3; ++c)
        out.at(x, y, c) = static_cast<std::uint8_t>(std::lround((1.0 - alpha) * img.at(x, y, c) + alpha * ramp[c]));
    }
  return out;
}

Bytes saliency_png(const SaliencyMap& map)
{
  const auto [lo, hi] = value_range(map);
  std::vector<std::uint8_t> gray(map.values.size());
  for (std::size_t i = 0; i < gray.size(); ++i)
    gray[i] = hi > lo ? static_cast<std::uint8_t>(std::lround(255.0 * (map.values[i] - lo) / (hi - lo))) : 0;
  return encode_png_gray(map.width, map.height, gray);
}

nlohmann::ordered_json stats_json(const SaliencyMap& map, double threshold)
{
  const auto [lo, hi] = value_range(map);
  double mean = 0;
  for (double v : map.values) mean += v;
  mean /= static_cast<double>(map.values.size());
  return {{"width", map.width},         {"height", map.height},
          {"predicted_class", map.predicted_class}, {"min", lo},
          {"max", hi},                  {"mean", mean},
          {"threshold", threshold},     {"significance_pct", significance(map, threshold)},
          {"occlusion", to_json(map.config)}};
}

}  // namespace deepterra::explain
