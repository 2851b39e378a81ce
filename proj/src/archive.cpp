#include "deepterra/archive.hpp"

#include "deepterra/error.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>

#include <zlib.h>

namespace deepterra::archive {

namespace {

constexpr std::size_t kBlock = 512;

std::string field(const std::uint8_t* p, std::size_t n)
{
  std::size_t len = 0;
  while (len < n && p[len] != 0) ++len;
  return std::string(reinterpret_cast<const char*>(p), len);
}

std::uint64_t octal(const std::uint8_t* p, std::size_t n)
{
  std::uint64_t v = 0;
  std::size_t i = 0;
  while (i < n && (p[i] == ' ' || p[i] == 0)) ++i;
  for (; i < n && p[i] >= '0' && p[i] <= '7'; ++i) v = v * 8 + (p[i] - '0');
  return v;
}

void put_octal(std::uint8_t* p, std::size_t n, std::uint64_t v)
{
  std::snprintf(reinterpret_cast<char*>(p), n, "%0*llo", static_cast<int>(n - 1),
                static_cast<unsigned long long>(v));
}

unsigned header_checksum(const std::uint8_t* h)
{
  unsigned sum = 0;
  for (std::size_t i = 0; i < kBlock; ++i) sum += (i >= 148 && i < 156) ? ' ' : h[i];
  return sum;
}

// Parses "len key=value\n" records of a pax extended header for the path key.
std::string pax_path(const std::string& body)
{
  std::size_t pos = 0;
  while (pos < body.size()) {
    const auto sp = body.find(' ', pos);
    if (sp == std::string::npos) break;
    const std::size_t len = std::stoul(body.substr(pos, sp - pos));
    if (len == 0 || pos + len > body.size()) break;
    const std::string rec = body.substr(sp + 1, len - (sp - pos) - 2);
    if (rec.rfind("path=", 0) == 0) return rec.substr(5);
    pos += len;
  }
  return {};
}

}  // namespace

Bytes gzip(std::span<const std::uint8_t> data)
{
  z_stream zs{};
  if (deflateInit2(&zs, Z_BEST_COMPRESSION, Z_DEFLATED, 15 + 16, 9, Z_DEFAULT_STRATEGY) != Z_OK)
    fail(ErrorKind::Archive, "deflateInit2 failed");
  Bytes out(deflateBound(&zs, static_cast<uLong>(data.size())) + 32);
  zs.next_in = const_cast<Bytef*>(data.data());
  zs.avail_in = static_cast<uInt>(data.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) fail(ErrorKind::Archive, "gzip compression failed");
  out.resize(zs.total_out);
  return out;
}

Bytes gunzip(std::span<const std::uint8_t> data)
{
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 32) != Z_OK) fail(ErrorKind::Archive, "inflateInit2 failed");
  Bytes out;
  std::uint8_t buf[1 << 16];
  zs.next_in = const_cast<Bytef*>(data.data());
  zs.avail_in = static_cast<uInt>(data.size());
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = buf;
    zs.avail_out = sizeof buf;
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      fail(ErrorKind::Archive, "corrupt gzip stream");
    }
    out.insert(out.end(), buf, buf + (sizeof buf - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      fail(ErrorKind::Archive, "truncated gzip stream");
    }
  }
  inflateEnd(&zs);
  return out;
}

Bytes write_tar(const std::vector<Entry>& entries)
{
  Bytes out;
  for (const auto& e : entries) {
    std::uint8_t h[kBlock] = {};
    std::string name = e.path, prefix;
    if (name.size() > 100) {
      const auto cut = name.rfind('/', 155);
      if (cut == std::string::npos || name.size() - cut - 1 > 100)
        fail(ErrorKind::Archive, "path too long for ustar: " + e.path);
      prefix = name.substr(0, cut);
      name = name.substr(cut + 1);
    }
    std::memcpy(h, name.data(), name.size());
    put_octal(h + 100, 8, 0644);
    put_octal(h + 108, 8, 0);
    put_octal(h + 116, 8, 0);
    put_octal(h + 124, 12, e.data.size());
    put_octal(h + 136, 12, 0);
    h[156] = '0';
    std::memcpy(h + 257, "ustar", 6);
    h[263] = '0';
    h[264] = '0';
    std::memcpy(h + 345, prefix.data(), prefix.size());
    std::snprintf(reinterpret_cast<char*>(h + 148), 8, "%06o", header_checksum(h));
    h[155] = ' ';
    out.insert(out.end(), h, h + kBlock);
    out.insert(out.end(), e.data.begin(), e.data.end());
    out.resize((out.size() + kBlock - 1) / kBlock * kBlock, 0);
  }
  out.resize(out.size() + 2 * kBlock, 0);
  return out;
}

std::vector<Entry> read_tar(std::span<const std::uint8_t> data)
{
  std::vector<Entry> out;
  std::string pending_name;
  std::size_t pos = 0;
  while (true) {
    if (pos + kBlock > data.size()) {
      if (pos == data.size() && !out.empty()) break;  // tolerate missing end-of-archive blocks
      fail(ErrorKind::Archive, "truncated tar header");
    }
    const std::uint8_t* h = data.data() + pos;
    if (std::all_of(h, h + kBlock, [](std::uint8_t b) { return b == 0; })) break;
    if (octal(h + 148, 8) != header_checksum(h)) fail(ErrorKind::Archive, "tar header checksum mismatch");
    const std::uint64_t size = octal(h + 124, 12);
    const char type = static_cast<char>(h[156]);
    pos += kBlock;
    if (pos + size > data.size()) fail(ErrorKind::Archive, "truncated tar entry");
    const auto* body = data.data() + pos;
    pos += (size + kBlock - 1) / kBlock * kBlock;

    if (type == 'L') {
      pending_name = field(body, size);
      continue;
    }
    if (type == 'x') {
      pending_name = pax_path(std::string(reinterpret_cast<const char*>(body), size));
      continue;
    }
    if (type != '0' && type != '\0') {
      pending_name.clear();
      continue;  // directories, links, global headers
    }
    std::string name = field(h, 100);
    if (std::memcmp(h + 257, "ustar", 5) == 0) {
      const std::string prefix = field(h + 345, 155);
      if (!prefix.empty()) name = prefix + "/" + name;
    }
    if (!pending_name.empty()) name = std::move(pending_name);
    pending_name.clear();
    while (name.rfind("./", 0) == 0) name.erase(0, 2);
    if (name.empty() || name.front() == '/' || name.find("..") != std::string::npos)
      fail(ErrorKind::Archive, "unsafe path in archive: " + name);
    out.push_back({name, Bytes(body, body + size)});
  }
  return out;
}

Bytes write_tgz(const std::vector<Entry>& entries) { return gzip(write_tar(entries)); }

std::vector<Entry> read_tgz(std::span<const std::uint8_t> data) { return read_tar(gunzip(data)); }

std::vector<Entry> read_tgz_file(const std::filesystem::path& p)
{
  const auto bytes = read_file(p);
  return read_tgz(bytes);
}

void write_tgz_file(const std::filesystem::path& p, const std::vector<Entry>& entries)
{
  write_file(p, write_tgz(entries));
}

}  // namespace deepterra::archive
