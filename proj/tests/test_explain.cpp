#include "doctest.h"

#include "support.hpp"

#include "deepterra/error.hpp"
#include "deepterra/explain.hpp"

#include <algorithm>
#include <cmath>

using namespace deepterra;
using namespace deepterra::explain;

namespace {

nn::Checkpoint checkpoint_for(const nn::ModelSpec& spec, nn::WeightMap w)
{
  return nn::Checkpoint{spec, std::move(w), dataset::LabelSet(dataset::LabelName("neg"), dataset::LabelName("pos")),
                        nn::TrainConfig{}, {}, 0, nn::StopReason::Completed};
}

nn::Checkpoint constant_model(std::size_t side)
{
  nn::ModelSpec spec = nn::default_convnet(side);
  nn::WeightMap w = nn::zero_weights(spec);
  w.set(nn::kHeadBias, nn::Tensor({2}, std::vector<double>{-0.4, 0.9}));
  return checkpoint_for(spec, std::move(w));
}

// Positive logit reads only the red channel at (px, py).
nn::Checkpoint single_pixel_model(std::size_t side, std::size_t px, std::size_t py)
{
  nn::ModelSpec spec;
  spec.input_px = side;
  spec.layers = {nn::Flatten{}};
  nn::WeightMap w = nn::zero_weights(spec);
  nn::Tensor head({2, 3 * side * side});
  head[3 * side * side + py * side + px] = 6.0;
  w.set(nn::kHeadWeight, head);
  w.set(nn::kHeadBias, nn::Tensor({2}, std::vector<double>{0.0, -3.0}));
  return checkpoint_for(spec, std::move(w));
}

}  // namespace

TEST_CASE("window origins")
{
  const auto o = window_origins(200, 20, 10);
  CHECK(o.size() == 19);
  CHECK(o.front() == 0);
  CHECK(o.back() == 180);
  CHECK(window_origins(25, 10, 10) == std::vector<std::size_t>{0, 10, 15});
  CHECK(window_origins(8, 8, 8) == std::vector<std::size_t>{0});

  OcclusionConfig bad;
  bad.stride_px = 0;
  CHECK_THROWS_AS(bad.validate(200, 200), Error);
  bad = {};
  bad.stride_px = 30;
  CHECK_THROWS_AS(bad.validate(200, 200), Error);
  bad = {};
  bad.window_px = 201;
  CHECK_THROWS_AS(bad.validate(200, 200), Error);
}

TEST_CASE("default configuration evaluates 361 windows")
{
  std::size_t evaluated = 0;
  Scorer count = [&](std::span<const RasterImage* const> imgs) {
    evaluated += imgs.size();
    return std::vector<std::pair<double, double>>(imgs.size(), {0.3, 0.7});
  };
  occlusion_heatmap(count, RasterImage(200, 200), OcclusionConfig{});
  CHECK(evaluated == 361 + 1);
}

TEST_CASE("constant model has zero saliency")
{
  const auto ck = constant_model(32);
  const auto map = occlusion_heatmap(ck, testsupport::noise_image(32, 32, 4), {8, 4, Baseline::MeanColor});
  CHECK(map.width == 32);
  CHECK(map.predicted_class == 1);
  for (double v : map.values) CHECK(v == 0.0);
  CHECK(significance(map) == 0.0);
}

TEST_CASE("single informative pixel")
{
  const std::size_t side = 16, px = 5, py = 5;
  const auto ck = single_pixel_model(side, px, py);
  RasterImage img = testsupport::solid(side, 20, 20, 20);
  img.at(px, py, 0) = 255;
  const OcclusionConfig cfg{4, 2, Baseline::Gray};
  const auto map = occlusion_heatmap(ck, img, cfg);
  CHECK(map.predicted_class == 1);

  // Brute force: only windows covering (px, py) change the score.
  const auto xs = window_origins(side, 4, 2);
  std::vector<double> expected(side * side, 0.0), cover(side * side, 0.0);
  const auto p_base = nn::predict_proba(ck, img).second;
  for (auto wy : xs)
    for (auto wx : xs) {
      RasterImage o = img;
      for (std::size_t y = wy; y < wy + 4; ++y)
        for (std::size_t x = wx; x < wx + 4; ++x)
          for (std::size_t c = 0; c < 3; ++c) o.at(x, y, c) = 128;
      const double score = p_base - nn::predict_proba(ck, o).second;
      for (std::size_t y = wy; y < wy + 4; ++y)
        for (std::size_t x = wx; x < wx + 4; ++x) {
          expected[y * side + x] += score;
          cover[y * side + x] += 1;
        }
    }
  for (std::size_t i = 0; i < expected.size(); ++i)
    CHECK(map.values[i] == doctest::Approx(expected[i] / cover[i]).epsilon(1e-12));

  const auto best = static_cast<std::size_t>(std::max_element(map.values.begin(), map.values.end()) - map.values.begin());
  const std::size_t bx = best % side, by = best / side;
  CHECK(std::abs(static_cast<long>(bx) - static_cast<long>(px)) < 4);
  CHECK(std::abs(static_cast<long>(by) - static_cast<long>(py)) < 4);
  CHECK(map.at(15, 15) == 0.0);
}

TEST_CASE("single window broadcasts one score")
{
  const auto ck = single_pixel_model(8, 2, 3);
  RasterImage img = testsupport::noise_image(8, 8, 9);
  const auto a = occlusion_heatmap(ck, img, {8, 8, Baseline::MeanColor});
  const auto b = occlusion_heatmap(ck, img, {8, 4, Baseline::MeanColor});
  for (double v : a.values) CHECK(v == a.values.front());
  for (std::size_t i = 0; i < a.values.size(); ++i) CHECK((a.values[i] > 0) == (b.values[i] > 0));
}

TEST_CASE("heatmaps are deterministic and worker-independent")
{
  const auto ck = single_pixel_model(16, 9, 2);
  const RasterImage img = testsupport::noise_image(16, 16, 10);
  const OcclusionConfig cfg{3, 1, Baseline::MeanColor};
  const auto a = occlusion_heatmap(ck, img, cfg, 1);
  const auto b = occlusion_heatmap(ck, img, cfg, 1);
  const auto c = occlusion_heatmap(ck, img, cfg, 3);
  CHECK(a.values == b.values);
  CHECK(a.values == c.values);
}

TEST_CASE("significance arithmetic")
{
  SaliencyMap m;
  m.width = m.height = 10;
  m.values.assign(100, 0.0);
  CHECK(significance(m) == 0.0);
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 5; ++x) m.values[y * 10 + x] = 0.2;
  CHECK(significance(m) == 25.0);

  rng::Stream s(5);
  SaliencyMap r;
  r.width = r.height = 20;
  for (int i = 0; i < 400; ++i) r.values.push_back(s.uniform(-1, 1));
  std::vector<double> sorted = r.values;
  std::sort(sorted.begin(), sorted.end());
  const double median = (sorted[199] + sorted[200]) / 2;
  CHECK(std::fabs(significance(r, median) - 50.0) <= 100.0 / 400.0);

  double prev = 101;
  for (double t = -1.1; t <= 1.1; t += 0.05) {
    const double v = significance(r, t);
    CHECK(v <= prev);
    prev = v;
  }
}

TEST_CASE("overlay rendering")
{
  const RasterImage img = testsupport::noise_image(6, 6, 3);
  SaliencyMap flat;
  flat.width = flat.height = 6;
  flat.values.assign(36, 0.0);
  CHECK(render_overlay(img, flat, 0.0) == img);
  const auto blue = render_overlay(img, flat, 1.0);
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t x = 0; x < 6; ++x) {
      CHECK(blue.at(x, y, 0) == 0);
      CHECK(blue.at(x, y, 2) == 255);
    }

  SaliencyMap ramp = flat;
  for (std::size_t i = 0; i < 36; ++i) ramp.values[i] = static_cast<double>(i);
  const auto full = render_overlay(img, ramp, 1.0);
  CHECK(full.at(5, 5, 0) == 255);
  CHECK(full.at(5, 5, 1) == 0);
  CHECK(full.at(5, 5, 2) == 0);
  CHECK(full.at(0, 0, 2) == 255);

  const auto half = render_overlay(img, ramp, 0.5);
  CHECK(half.at(5, 5, 0) == std::lround(0.5 * img.at(5, 5, 0) + 127.5));

  CHECK_THROWS_AS(render_overlay(RasterImage(5, 6), flat), Error);
  const auto png = decode_image(saliency_png(ramp));
  CHECK(png.width() == 6);
  CHECK(stats_json(ramp)["significance_pct"].get<double>() == doctest::Approx(100.0 * 35 / 36));
}
