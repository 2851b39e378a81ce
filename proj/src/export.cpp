#include "deepterra/export.hpp"

#include "deepterra/csv.hpp"
#include "deepterra/error.hpp"

#include <cstdio>

namespace deepterra::exporting {

using inference::PredictionRecord;
using inference::PredictionRun;
using nlohmann::json;
using nlohmann::ordered_json;

std::string maps_link(const geo::GeoPoint& p)
{
  return "https://www.google.com/maps?q=" + csv::fixed(p.lat(), 6) + "," + csv::fixed(p.lon(), 6);
}

namespace {

double rounded(double v, int dp) { return std::stod(csv::fixed(v, dp)); }

void write_text(const std::filesystem::path& path, const std::string& text)
{
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::optional<double> optional_number(const std::string& cell, const char* column)
{
  if (cell.empty()) return std::nullopt;
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(cell, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == cell.size(), ErrorKind::Structure, std::string(column) + ": not a number: " + cell);
  return v;
}

}  // namespace

PredictionRecord at_export_precision(PredictionRecord r)
{
  r.confidence_pct = rounded(r.confidence_pct, 2);
  if (r.significance_pct) r.significance_pct = rounded(*r.significance_pct, 2);
  if (r.geo) {
    r.geo = geo::GeoPoint(rounded(r.geo->lat(), 6), rounded(r.geo->lon(), 6));
    r.maps_link = maps_link(*r.geo);
  }
  if (r.bounds)
    r.bounds = geo::GeoBounds{rounded(r.bounds->north, 6), rounded(r.bounds->south, 6), rounded(r.bounds->east, 6),
                              rounded(r.bounds->west, 6)};
  return r;
}

std::string to_csv(const PredictionRun& run)
{
  std::string out = std::string(kCsvHeader) + "\r\n";
  for (const auto& r : run.records) {
    out += csv::format_row({r.filename, r.predicted.str(), r.actual_or_chosen ? r.actual_or_chosen->str() : "",
                            csv::fixed(r.confidence_pct, 2), r.significance_pct ? csv::fixed(*r.significance_pct, 2) : "",
                            r.geo ? csv::fixed(r.geo->lat(), 6) : "", r.geo ? csv::fixed(r.geo->lon(), 6) : "",
                            r.geo ? maps_link(*r.geo) : ""});
  }
  return out;
}

std::vector<PredictionRecord> parse_csv(std::string_view text)
{
  const auto rows = csv::parse(text);
  require(!rows.empty(), ErrorKind::Structure, "empty CSV export");
  require(csv::format_row(rows.front()) == std::string(kCsvHeader) + "\r\n", ErrorKind::Structure,
          "unexpected CSV header");
  std::vector<PredictionRecord> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& row = rows[i];
    if (row.size() == 1 && row[0].empty()) continue;
    require(row.size() == 8, ErrorKind::Structure, "CSV row " + std::to_string(i) + " has the wrong column count");
    PredictionRecord r{.filename = row[0], .predicted = dataset::LabelName(row[1])};
    if (!row[2].empty()) r.actual_or_chosen = dataset::LabelName(row[2]);
    const auto conf = optional_number(row[3], "confidence_pct");
    require(conf.has_value(), ErrorKind::Structure, "confidence_pct: missing");
    r.confidence_pct = *conf;
    r.significance_pct = optional_number(row[4], "significance_pct");
    const auto lat = optional_number(row[5], "lat");
    const auto lon = optional_number(row[6], "lon");
    require(lat.has_value() == lon.has_value(), ErrorKind::Structure, "lat and lon must both be set or both blank");
    if (lat) r.geo = geo::GeoPoint(*lat, *lon);
    if (!row[7].empty()) r.maps_link = row[7];
    r.source_ref = r.filename;
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

ordered_json summary_json(const PredictionRun& run)
{
  const auto s = inference::summarize(run);
  ordered_json j;
  j["total"] = s.total;
  for (std::size_t c = 0; c < 2; ++c)
    j["classes"][run.labels.at(c).str()] = {{"count", s.counts[c]}, {"pct", rounded(s.pct[c], 2)},
                                            {"display", inference::display_pct(s.pct[c])}};
  j["confusion"] = s.confusion ? metrics::to_json(*s.confusion) : ordered_json(nullptr);
  j["metrics"] = s.report ? metrics::to_json(*s.report) : ordered_json(nullptr);
  return j;
}

}  // namespace

std::string to_json_text(const PredictionRun& run)
{
  ordered_json j;
  j["checkpoint_id"] = run.checkpoint_id;
  j["mode"] = inference::to_string(run.mode);
  j["labels"] = {{"negative", run.labels.negative.str()}, {"positive", run.labels.positive.str()}};
  j["created_at"] = run.created_at;
  j["source"] = run.source;
  j["summary"] = summary_json(run);
  ordered_json records = ordered_json::array();
  for (const auto& r : run.records) records.push_back(inference::to_json(at_export_precision(r)));
  j["records"] = std::move(records);
  return j.dump(2) + "\n";
}

ParsedJsonRun parse_json(std::string_view text)
{
  try {
    const json j = json::parse(text);
    const auto& labels = j.at("labels");
    ParsedJsonRun out{j.at("checkpoint_id").get<std::string>(),
                      j.at("mode").get<std::string>() == "test" ? inference::RunMode::Test : inference::RunMode::Predict,
                      dataset::LabelSet(dataset::LabelName(labels.at("negative").get<std::string>()),
                                        dataset::LabelName(labels.at("positive").get<std::string>())),
                      j.at("created_at").get<std::string>(),
                      j.at("source").get<std::string>(),
                      {}};
    for (const auto& r : j.at("records")) out.records.push_back(inference::record_from_json(r));
    return out;
  } catch (const json::exception& e) {
    fail(ErrorKind::Structure, std::string("malformed JSON export: ") + e.what());
  }
}

namespace {

constexpr std::string_view kDataOpen = R"(<script type="application/json" id="run-data">)";

geo::GeoBounds footprint(const PredictionRecord& r)
{
  if (r.bounds) return *r.bounds;
  // Unknown footprint: a square the size of one default survey cell.
  const double half = geo::AreaSpec{}.cell_m() / 2.0;
  const auto mpd = geo::meters_per_degree(r.geo->lat());
  const double dlat = half / mpd.lat, dlon = half / mpd.lon;
  return {r.geo->lat() + dlat, r.geo->lat() - dlat, r.geo->lon() + dlon, r.geo->lon() - dlon};
}

std::string escape_html(std::string_view s)
{
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string escape_script(std::string text)
{
  std::string out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '<' && i + 1 < text.size() && text[i + 1] == '/') {
      out += "<\\/";
      ++i;
    } else {
      out += text[i];
    }
  }
  return out;
}

constexpr const char* kPositiveColor = "#1f5fd6";
constexpr const char* kNegativeColor = "#d62828";

}  // namespace

std::string to_html_map(const PredictionRun& run, bool positive_only)
{
  ordered_json features = ordered_json::array();
  for (const auto& raw : run.records) {
    if (!raw.geo) continue;
    const bool positive = raw.predicted == run.labels.positive;
    if (positive_only && !positive) continue;
    const auto r = at_export_precision(raw);
    const auto b = footprint(r);
    auto c = [](double v) { return rounded(v, 6); };
    ordered_json ring = ordered_json::array({{c(b.west), c(b.north)},
                                             {c(b.east), c(b.north)},
                                             {c(b.east), c(b.south)},
                                             {c(b.west), c(b.south)},
                                             {c(b.west), c(b.north)}});
    ordered_json f;
    f["type"] = "Feature";
    f["geometry"] = {{"type", "Polygon"}, {"coordinates", ordered_json::array({ring})}};
    f["properties"] = {{"filename", r.filename},
                       {"predicted", r.predicted.str()},
                       {"class", positive ? "positive" : "negative"},
                       {"color", positive ? kPositiveColor : kNegativeColor},
                       {"confidence_pct", r.confidence_pct},
                       {"significance_pct", r.significance_pct ? ordered_json(*r.significance_pct) : ordered_json(nullptr)},
                       {"maps_link", *r.maps_link}};
    features.push_back(std::move(f));
  }
  require(!features.empty(), ErrorKind::Export, "no geo-tagged records to place on the map");
  ordered_json collection = {{"type", "FeatureCollection"}, {"features", std::move(features)}};

  std::string html;
  html += "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n";
  html += "<title>" + escape_html(run.source.empty() ? "Prediction map" : run.source) + "</title>\n";
  html += R"(<meta name="viewport" content="width=device-width, initial-scale=1">
<link rel="stylesheet" href="https://unpkg.com/leaflet@1.9.4/dist/leaflet.css">
<script src="https://unpkg.com/leaflet@1.9.4/dist/leaflet.js"></script>
<style>html,body,#map{height:100%;margin:0}.legend{background:#fff;padding:6px 8px;font:13px sans-serif}</style>
</head>
<body>
<div id="map"></div>
)";
  html += kDataOpen;
  html += escape_script(collection.dump());
  html += "</script>\n";
  html += "<script>\nconst positiveLabel = " + escape_script(json(run.labels.positive.str()).dump()) + ";\n";
  html += R"(const data = JSON.parse(document.getElementById('run-data').textContent);
const map = L.map('map');
L.tileLayer('https://tile.openstreetmap.org/{z}/{x}/{y}.png', {
  maxZoom: 19,
  attribution: '&copy; OpenStreetMap contributors'
}).addTo(map);
const esc = s => String(s).replace(/[&<>"]/g, c => ({'&': '&amp;', '<': '&lt;', '>': '&gt;', '"': '&quot;'}[c]));
const layer = L.geoJSON(data, {
  style: f => ({color: f.properties.color, weight: 1, fillOpacity: 0.35}),
  onEachFeature: (f, l) => {
    const p = f.properties;
    const sig = p.significance_pct === null ? 'n/a' : p.significance_pct.toFixed(2) + '%';
    l.bindPopup('<b>' + esc(p.filename) + '</b><br>' + esc(p.predicted) +
      '<br>confidence ' + p.confidence_pct.toFixed(2) + '%<br>significance ' + sig +
      '<br><a href="' + esc(p.maps_link) + '" target="_blank" rel="noopener">Google Maps</a>');
  }
}).addTo(map);
map.fitBounds(layer.getBounds());
const legend = L.control({position: 'bottomright'});
legend.onAdd = () => {
  const d = L.DomUtil.create('div', 'legend');
  d.innerHTML = '<span style="color:)" + std::string(kPositiveColor) + R"(">&#9632;</span> ' + esc(positiveLabel) +
    ' &nbsp; <span style="color:)" + std::string(kNegativeColor) + R"(">&#9632;</span> other';
  return d;
};
legend.addTo(map);
</script>
</body>
</html>
)";
  return html;
}

json extract_html_data(std::string_view html)
{
  const auto start = html.find(kDataOpen);
  require(start != std::string_view::npos, ErrorKind::Structure, "HTML export has no run-data block");
  const auto body = start + kDataOpen.size();
  const auto end = html.find("</script>", body);
  require(end != std::string_view::npos, ErrorKind::Structure, "unterminated run-data block");
  try {
    return json::parse(html.substr(body, end - body));
  } catch (const json::exception& e) {
    fail(ErrorKind::Structure, std::string("run-data block is not JSON: ") + e.what());
  }
}

void write_csv(const PredictionRun& run, const std::filesystem::path& path) { write_text(path, to_csv(run)); }
void write_json(const PredictionRun& run, const std::filesystem::path& path) { write_text(path, to_json_text(run)); }
void write_html_map(const PredictionRun& run, const std::filesystem::path& path, bool positive_only)
{
  write_text(path, to_html_map(run, positive_only));
}

}  // namespace deepterra::exporting
