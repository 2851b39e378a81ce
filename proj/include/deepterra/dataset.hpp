#pragma once

// Binary labeled image datasets.
//
// On-disk layout: <root>/<label>/<image>.{png,jpg} with an optional
// <root>/manifest.csv (header "filename,label,lat,lon", coordinates with six
// decimals, blank when unknown) and an optional <root>/dataset.json naming
// the positive and negative labels. Archives are gzip-compressed tars of the
// same layout; a single wrapping top-level directory is accepted.

#include "deepterra/archive.hpp"
#include "deepterra/geogrid.hpp"
#include "deepterra/http.hpp"
#include "deepterra/image.hpp"

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace deepterra::dataset {

// Nonempty, [a-z0-9_] only.
class LabelName {
 public:
  explicit LabelName(std::string name);

  static bool is_valid(std::string_view name);

  const std::string& str() const { return name_; }

  friend auto operator<=>(const LabelName&, const LabelName&) = default;

 private:
  std::string name_;
};

// Ordered binary label set: index 0 is the negative class and 1 the positive.
struct LabelSet {
  LabelName negative;
  LabelName positive;

  LabelSet(LabelName neg, LabelName pos);

  std::size_t index_of(const LabelName& l) const;  // throws Domain for unknown labels
  const LabelName& at(std::size_t index) const { return index == 0 ? negative : positive; }
  const LabelName& other(const LabelName& l) const { return index_of(l) == 0 ? positive : negative; }
  bool contains(const LabelName& l) const { return l == negative || l == positive; }

  friend bool operator==(const LabelSet&, const LabelSet&) = default;
};

// Picks the positive label for a pair of class directory names:
// "x" vs "not_x"/"no_x"/"non_x" gives "x"; well-known pairs (neg/pos,
// negative/positive, no/yes, false/true, 0/1) map naturally; otherwise the
// lexicographically first name is positive.
LabelSet infer_label_set(const LabelName& a, const LabelName& b);

struct ImageEntry {
  std::string filename;
  Bytes encoded;  // original file bytes
  RasterImage image;
  std::optional<geo::GeoPoint> geo;

  // Coordinates compare at manifest precision (six decimals).
  friend bool operator==(const ImageEntry& a, const ImageEntry& b);
};

ImageEntry make_entry(std::string filename, Bytes encoded, std::optional<geo::GeoPoint> geo = {});
ImageEntry make_entry(std::string filename, const RasterImage& image, std::optional<geo::GeoPoint> geo = {});

struct ManifestRow {
  std::string filename;
  std::string label;  // blank for unlabeled images
  std::optional<geo::GeoPoint> geo;

  friend bool operator==(const ManifestRow&, const ManifestRow&) = default;
};

std::string format_manifest(const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> parse_manifest(std::string_view text);

class LabeledDataset {
 public:
  // Validates unique filenames and shared image dimensions. Classes may be
  // empty in memory; import and export reject empty classes.
  LabeledDataset(LabelSet labels, std::vector<ImageEntry> negatives, std::vector<ImageEntry> positives,
                 bool has_manifest = false);

  const LabelSet& labels() const { return labels_; }
  const std::vector<ImageEntry>& entries(std::size_t class_index) const { return classes_.at(class_index); }
  const std::vector<ImageEntry>& entries(const LabelName& l) const { return classes_[labels_.index_of(l)]; }
  std::size_t size() const { return classes_[0].size() + classes_[1].size(); }
  bool has_manifest() const { return has_manifest_; }

  // Width/height shared by all images; nullopt for an empty dataset.
  std::optional<std::pair<std::size_t, std::size_t>> image_size() const;

  std::vector<ManifestRow> manifest() const;

  friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;

 private:
  LabelSet labels_;
  std::array<std::vector<ImageEntry>, 2> classes_;
  bool has_manifest_;
};

struct ImportOptions {
  std::optional<LabelName> positive_label;
};

// Warnings (skipped undecodable files and similar) are appended to *warnings when given.
LabeledDataset import_tree(std::vector<archive::Entry> files, const ImportOptions& opts = {},
                           std::vector<std::string>* warnings = nullptr,
                           const std::vector<std::string>& empty_dirs = {});
LabeledDataset import_folder(const std::filesystem::path& root, const ImportOptions& opts = {},
                             std::vector<std::string>* warnings = nullptr);
LabeledDataset import_archive(const std::filesystem::path& tgz, const ImportOptions& opts = {},
                              std::vector<std::string>* warnings = nullptr);
LabeledDataset import_archive_bytes(std::span<const std::uint8_t> tgz, const ImportOptions& opts = {},
                                    std::vector<std::string>* warnings = nullptr);

struct UrlImportOptions {
  std::filesystem::path cache_dir;
  std::size_t max_bytes = 512ull << 20;
  http::RetryPolicy retry;
  ImportOptions import;
};

// Downloads into the content-addressed cache (once per URL), then imports the archive.
LabeledDataset import_url(const std::string& url, const UrlImportOptions& opts,
                          std::vector<std::string>* warnings = nullptr);

// Stratified per class; |train_c| = round(ratio * |c|) clamped to [1, |c| - 1].
std::pair<LabeledDataset, LabeledDataset> split_train_val(const LabeledDataset& ds, double ratio,
                                                          std::uint64_t seed);
std::size_t train_count(std::size_t class_size, double ratio);

std::vector<archive::Entry> to_tree(const LabeledDataset& ds);
void export_archive(const LabeledDataset& ds, const std::filesystem::path& path);
void write_folder(const LabeledDataset& ds, const std::filesystem::path& root);

// Flat folder of images (no class directories) with an optional manifest.csv.
std::vector<ImageEntry> import_unlabeled_folder(const std::filesystem::path& root,
                                                std::vector<std::string>* warnings = nullptr);
bool looks_labeled(const std::filesystem::path& root);

// Relabels one image; throws Domain when the filename is unknown.
LabeledDataset relabel(const LabeledDataset& ds, const std::string& filename, const LabelName& label);

}  // namespace deepterra::dataset
