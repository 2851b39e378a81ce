#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace deepterra {

using Bytes = std::vector<std::uint8_t>;

// 8-bit RGB raster, row-major, interleaved channels.
class RasterImage {
 public:
  static constexpr std::size_t kChannels = 3;

  RasterImage() = default;
  RasterImage(std::size_t width, std::size_t height, std::uint8_t fill = 0);
  RasterImage(std::size_t width, std::size_t height, Bytes pixels);

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t channels() const { return kChannels; }
  bool empty() const { return pixels_.empty(); }

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t ch)
  {
    return pixels_[(y * width_ + x) * kChannels + ch];
  }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t ch) const
  {
    return pixels_[(y * width_ + x) * kChannels + ch];
  }

  const Bytes& pixels() const { return pixels_; }
  Bytes& pixels() { return pixels_; }

  RasterImage crop(std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) const;

  friend bool operator==(const RasterImage&, const RasterImage&) = default;

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  Bytes pixels_;
};

enum class ImageCodec { Png, Jpeg, Unknown };

ImageCodec sniff_codec(std::span<const std::uint8_t> data);
bool has_image_extension(const std::filesystem::path& p);

// Throws Domain when the bytes are not a decodable PNG or JPEG.
RasterImage decode_image(std::span<const std::uint8_t> data);
Bytes encode_png(const RasterImage& img);
Bytes encode_png_gray(std::size_t width, std::size_t height, std::span<const std::uint8_t> gray);
Bytes encode_jpeg(const RasterImage& img, int quality = 90);

Bytes read_file(const std::filesystem::path& p);
void write_file(const std::filesystem::path& p, std::span<const std::uint8_t> data);

RasterImage load_image(const std::filesystem::path& p);
void save_png(const RasterImage& img, const std::filesystem::path& p);

}  // namespace deepterra
