#pragma once

// Occlusion-sensitivity saliency maps and the per-image significance statistic.

#include "deepterra/image.hpp"
#include "deepterra/nn/train.hpp"

#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "json.hpp"

namespace deepterra::explain {

enum class Baseline { MeanColor, Gray };

const char* to_string(Baseline b);

struct OcclusionConfig {
  std::size_t window_px = 20;
  std::size_t stride_px = 10;
  Baseline baseline = Baseline::MeanColor;

  // 1 <= stride <= window <= min(width, height); throws Domain otherwise.
  void validate(std::size_t width, std::size_t height) const;
};

nlohmann::ordered_json to_json(const OcclusionConfig& cfg);

struct SaliencyMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> values;  // row-major; positive values support the predicted class
  std::size_t predicted_class = 0;
  OcclusionConfig config;

  double at(std::size_t x, std::size_t y) const { return values[y * width + x]; }
};

// Window origins along one axis: every stride step, plus a final window
// flush with the far edge when the steps do not land on it.
std::vector<std::size_t> window_origins(std::size_t side, std::size_t window, std::size_t stride);

// Batched class probabilities (negative, positive) for a list of images.
using Scorer = std::function<std::vector<std::pair<double, double>>(std::span<const RasterImage* const>)>;

SaliencyMap occlusion_heatmap(const Scorer& scorer, const RasterImage& img, const OcclusionConfig& cfg = {},
                              std::size_t workers = 1);
SaliencyMap occlusion_heatmap(const nn::Checkpoint& ckpt, const RasterImage& img, const OcclusionConfig& cfg = {},
                              std::size_t workers = 1);

// Percentage of pixels whose value is strictly greater than threshold.
double significance(const SaliencyMap& map, double threshold = 0.0);

// Blends a blue-to-red ramp (min to max saliency) over the image; a flat map
// renders entirely in the blue endpoint.
RasterImage render_overlay(const RasterImage& img, const SaliencyMap& map, double alpha = 0.5);

// Grayscale PNG with min..max saliency mapped to 0..255.
Bytes saliency_png(const SaliencyMap& map);
nlohmann::ordered_json stats_json(const SaliencyMap& map, double threshold = 0.0);

}  // namespace deepterra::explain
