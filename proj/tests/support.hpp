#pragma once

#include "deepterra/dataset.hpp"
#include "deepterra/image.hpp"
#include "deepterra/random.hpp"

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

namespace testsupport {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "dt")
  {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir()
  {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

inline deepterra::RasterImage solid(std::size_t side, std::uint8_t r, std::uint8_t g, std::uint8_t b)
{
  deepterra::RasterImage img(side, side);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      img.at(x, y, 0) = r;
      img.at(x, y, 1) = g;
      img.at(x, y, 2) = b;
    }
  return img;
}

inline deepterra::RasterImage noise_image(std::size_t w, std::size_t h, std::uint64_t seed)
{
  deepterra::RasterImage img(w, h);
  deepterra::rng::Stream s(seed);
  for (auto& p : img.pixels()) p = static_cast<std::uint8_t>(s.below(256));
  return img;
}

// Two-class blob images: per-pixel intensities ~ N(mean, sigma) clipped to [0, 1].
inline deepterra::RasterImage blob_image(std::size_t side, double mean, double sigma, deepterra::rng::Stream& s)
{
  deepterra::RasterImage img(side, side);
  for (auto& p : img.pixels()) {
    double v = mean + sigma * s.normal();
    v = std::clamp(v, 0.0, 1.0);
    p = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return img;
}

inline deepterra::dataset::LabeledDataset blob_dataset(std::size_t per_class, std::size_t side, std::uint64_t seed,
                                                       double sigma = 0.1)
{
  using namespace deepterra::dataset;
  deepterra::rng::Stream s(seed);
  std::vector<ImageEntry> neg, pos;
  for (std::size_t i = 0; i < per_class; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "n%04zu.png", i);
    neg.push_back(make_entry(name, blob_image(side, 0.25, sigma, s)));
    std::snprintf(name, sizeof name, "p%04zu.png", i);
    pos.push_back(make_entry(name, blob_image(side, 0.75, sigma, s)));
  }
  return LabeledDataset(LabelSet(LabelName("not_blob"), LabelName("blob")), std::move(neg), std::move(pos));
}

// The 5-image {garbage: 3, not_garbage: 2} folder used across tests.
inline void write_small_folder(const fs::path& root, std::size_t side = 8)
{
  for (int i = 0; i < 3; ++i)
    deepterra::save_png(noise_image(side, side, 100 + i), root / "garbage" / ("g" + std::to_string(i) + ".png"));
  for (int i = 0; i < 2; ++i)
    deepterra::save_png(noise_image(side, side, 200 + i), root / "not_garbage" / ("n" + std::to_string(i) + ".png"));
}

}  // namespace testsupport
