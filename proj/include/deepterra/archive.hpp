#pragma once

// Gzip-compressed ustar archives holding regular files only.

#include "deepterra/image.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace deepterra::archive {

struct Entry {
  std::string path;  // '/'-separated, relative
  Bytes data;

  friend bool operator==(const Entry&, const Entry&) = default;
};

Bytes gzip(std::span<const std::uint8_t> data);
Bytes gunzip(std::span<const std::uint8_t> data);

// Deterministic output: zero mtime/uid/gid, mode 0644, entries in given order.
Bytes write_tar(const std::vector<Entry>& entries);
std::vector<Entry> read_tar(std::span<const std::uint8_t> data);

Bytes write_tgz(const std::vector<Entry>& entries);
std::vector<Entry> read_tgz(std::span<const std::uint8_t> data);

// Throws Archive for anything that is not a well-formed tgz.
std::vector<Entry> read_tgz_file(const std::filesystem::path& p);
void write_tgz_file(const std::filesystem::path& p, const std::vector<Entry>& entries);

}  // namespace deepterra::archive
