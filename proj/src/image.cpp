#include "deepterra/image.hpp"

#include "deepterra/error.hpp"

#include <algorithm>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include <jpeglib.h>
#include <png.h>

namespace deepterra {

RasterImage::RasterImage(std::size_t width, std::size_t height, std::uint8_t fill)
    : width_(width), height_(height), pixels_(width * height * kChannels, fill)
{
  require(width >= 1 && height >= 1, ErrorKind::Domain, "image dimensions must be positive");
}

RasterImage::RasterImage(std::size_t width, std::size_t height, Bytes pixels)
    : width_(width), height_(height), pixels_(std::move(pixels))
{
  require(width >= 1 && height >= 1, ErrorKind::Domain, "image dimensions must be positive");
  require(pixels_.size() == width * height * kChannels, ErrorKind::Domain,
          "pixel buffer size does not match dimensions");
}

RasterImage RasterImage::crop(std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) const
{
  require(x0 + w <= width_ && y0 + h <= height_, ErrorKind::Domain, "crop outside image");
  RasterImage out(w, h);
  const std::size_t row_bytes = w * kChannels;
  for (std::size_t y = 0; y < h; ++y) {
    const auto* src = pixels_.data() + ((y0 + y) * width_ + x0) * kChannels;
    std::memcpy(out.pixels_.data() + y * row_bytes, src, row_bytes);
  }
  return out;
}

ImageCodec sniff_codec(std::span<const std::uint8_t> d)
{
  static constexpr std::uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (d.size() >= 8 && std::equal(png_sig, png_sig + 8, d.begin())) return ImageCodec::Png;
  if (d.size() >= 3 && d[0] == 0xFF && d[1] == 0xD8 && d[2] == 0xFF) return ImageCodec::Jpeg;
  return ImageCodec::Unknown;
}

bool has_image_extension(const std::filesystem::path& p)
{
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

namespace {

RasterImage decode_png(std::span<const std::uint8_t> data)
{
  png_image im;
  std::memset(&im, 0, sizeof im);
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&im, data.data(), data.size()))
    fail(ErrorKind::Domain, std::string("png decode failed: ") + im.message);
  im.format = PNG_FORMAT_RGB;
  if (im.width == 0 || im.height == 0) {
    png_image_free(&im);
    fail(ErrorKind::Domain, "png has zero dimension");
  }
  Bytes px(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, px.data(), 0, nullptr)) {
    const std::string msg = im.message;
    png_image_free(&im);
    fail(ErrorKind::Domain, "png decode failed: " + msg);
  }
  return RasterImage(im.width, im.height, std::move(px));
}

struct JpegErr {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo)
{
  auto* err = reinterpret_cast<JpegErr*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

void jpeg_silent(j_common_ptr, int) {}

RasterImage decode_jpeg(std::span<const std::uint8_t> data)
{
  jpeg_decompress_struct cinfo;
  JpegErr err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  err.mgr.emit_message = jpeg_silent;
  Bytes px;
  std::size_t w = 0, h = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    fail(ErrorKind::Domain, std::string("jpeg decode failed: ") + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, data.data(), static_cast<unsigned long>(data.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  w = cinfo.output_width;
  h = cinfo.output_height;
  px.resize(w * h * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = px.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return RasterImage(w, h, std::move(px));
}

Bytes write_png(std::size_t width, std::size_t height, png_uint_32 format, const void* buffer)
{
  png_image im;
  std::memset(&im, 0, sizeof im);
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(width);
  im.height = static_cast<png_uint_32>(height);
  im.format = format;
  png_alloc_size_t size = 0;
  if (!png_image_write_get_memory_size(im, size, 0, buffer, 0, nullptr))
    fail(ErrorKind::Io, std::string("png encode failed: ") + im.message);
  Bytes out(size);
  if (!png_image_write_to_memory(&im, out.data(), &size, 0, buffer, 0, nullptr))
    fail(ErrorKind::Io, std::string("png encode failed: ") + im.message);
  out.resize(size);
  return out;
}

}  // namespace

RasterImage decode_image(std::span<const std::uint8_t> data)
{
  switch (sniff_codec(data)) {
    case ImageCodec::Png: return decode_png(data);
    case ImageCodec::Jpeg: return decode_jpeg(data);
    case ImageCodec::Unknown: break;
  }
  fail(ErrorKind::Domain, "not a PNG or JPEG image");
}

Bytes encode_png(const RasterImage& img)
{
  require(!img.empty(), ErrorKind::Domain, "cannot encode empty image");
  return write_png(img.width(), img.height(), PNG_FORMAT_RGB, img.pixels().data());
}

Bytes encode_png_gray(std::size_t width, std::size_t height, std::span<const std::uint8_t> gray)
{
  require(gray.size() == width * height && width > 0 && height > 0, ErrorKind::Domain,
          "grayscale buffer size mismatch");
  return write_png(width, height, PNG_FORMAT_GRAY, gray.data());
}

Bytes encode_jpeg(const RasterImage& img, int quality)
{
  jpeg_compress_struct cinfo;
  JpegErr err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  unsigned char* mem = nullptr;
  unsigned long mem_size = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::free(mem);
    fail(ErrorKind::Io, std::string("jpeg encode failed: ") + err.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &mem, &mem_size);
  cinfo.image_width = static_cast<JDIMENSION>(img.width());
  cinfo.image_height = static_cast<JDIMENSION>(img.height());
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    auto* row = const_cast<JSAMPLE*>(img.pixels().data() + cinfo.next_scanline * img.width() * 3);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  Bytes out(mem, mem + mem_size);
  jpeg_destroy_compress(&cinfo);
  std::free(mem);
  return out;
}

Bytes read_file(const std::filesystem::path& p)
{
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + p.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& p, std::span<const std::uint8_t> data)
{
  if (p.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(p.parent_path(), ec);
  }
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) fail(ErrorKind::Io, "write failed for " + p.string());
}

RasterImage load_image(const std::filesystem::path& p) { return decode_image(read_file(p)); }

void save_png(const RasterImage& img, const std::filesystem::path& p) { write_file(p, encode_png(img)); }

}  // namespace deepterra
