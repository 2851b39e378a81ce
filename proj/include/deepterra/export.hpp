#pragma once

// CSV, JSON and interactive HTML map exports of prediction runs.

#include "deepterra/geogrid.hpp"
#include "deepterra/inference.hpp"

#include <filesystem>
#include <string>
#include <string_view>

namespace deepterra::exporting {

// "https://www.google.com/maps?q=<lat>,<lon>" with six decimals.
std::string maps_link(const geo::GeoPoint& p);

inline constexpr std::string_view kCsvHeader =
    "filename,predicted,actual_or_chosen,confidence_pct,significance_pct,lat,lon,maps_link";

std::string to_csv(const inference::PredictionRun& run);
// Records only; percentages carry two decimals and coordinates six.
std::vector<inference::PredictionRecord> parse_csv(std::string_view text);

std::string to_json_text(const inference::PredictionRun& run);
struct ParsedJsonRun {
  std::string checkpoint_id;
  inference::RunMode mode;
  dataset::LabelSet labels;
  std::string created_at;
  std::string source;
  std::vector<inference::PredictionRecord> records;
};
ParsedJsonRun parse_json(std::string_view text);

// Throws Export when no included record is geo-tagged.
std::string to_html_map(const inference::PredictionRun& run, bool positive_only);
// The GeoJSON FeatureCollection embedded in an HTML export.
nlohmann::json extract_html_data(std::string_view html);

void write_csv(const inference::PredictionRun& run, const std::filesystem::path& path);
void write_json(const inference::PredictionRun& run, const std::filesystem::path& path);
void write_html_map(const inference::PredictionRun& run, const std::filesystem::path& path, bool positive_only);

// Values rounded to their export precision, as round-trips reproduce them.
inference::PredictionRecord at_export_precision(inference::PredictionRecord r);

}  // namespace deepterra::exporting
