#pragma once

// Seeded ahead-of-time geometric augmentation.
//
// Transforms compose in a fixed order: flip, zoom about the center, rotate
// about the center, shift. Output pixels are produced by inverse mapping;
// source samples that fall outside the image are resolved by the fill mode.

#include "deepterra/dataset.hpp"
#include "deepterra/image.hpp"

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

namespace deepterra::augment {

enum class FillMode { Constant, Nearest, Reflect, Wrap };
enum class Interpolation { Nearest, Bilinear };

struct AugmentSpec {
  double rotation_max_deg = 0.0;
  double shift_max_frac = 0.0;
  double zoom_low = 1.0;
  double zoom_high = 1.0;
  bool hflip = false;
  bool vflip = false;
  FillMode fill_mode = FillMode::Nearest;
  std::uint8_t fill_value = 0;
  Interpolation interpolation = Interpolation::Bilinear;
  int copies_per_image = 1;
  std::uint64_t seed = 0;

  void validate() const;  // throws Config naming the offending field
};

nlohmann::ordered_json to_json(const AugmentSpec& spec);
AugmentSpec spec_from_json(const nlohmann::json& j);

struct GeoTransform {
  double angle_deg = 0.0;    // positive rotates content counterclockwise on screen
  double shift_x_frac = 0.0;  // positive moves content right
  double shift_y_frac = 0.0;  // positive moves content down
  double zoom = 1.0;          // > 1 enlarges content
  bool do_hflip = false;
  bool do_vflip = false;

  friend bool operator==(const GeoTransform&, const GeoTransform&) = default;
};

GeoTransform sample_transform(const AugmentSpec& spec, std::uint64_t draw_index);

// Source-space sample position (continuous pixel coordinates, pixel i spans
// [i, i + 1)) for the center of output pixel (x, y).
struct SamplePoint {
  double x;
  double y;
};
SamplePoint inverse_map(const GeoTransform& t, std::size_t side, std::size_t x, std::size_t y);

RasterImage apply_transform(const RasterImage& img, const GeoTransform& t, const AugmentSpec& spec);

std::string variant_filename(const std::string& source, int variant, int copies);
std::uint64_t variant_draw_index(const std::string& source_filename, int variant);

// Originals plus copies_per_image variants each, ordered by (source filename, variant).
dataset::LabeledDataset augment_dataset(const dataset::LabeledDataset& ds, const AugmentSpec& spec,
                                        std::size_t workers = 1);

void write_provenance(const AugmentSpec& spec, const std::filesystem::path& dir);

}  // namespace deepterra::augment
